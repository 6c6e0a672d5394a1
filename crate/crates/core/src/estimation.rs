//! Estimation of `omega = (beta0, beta1', sigma2_b)'` for the area-level
//! model with correlated measurement and sampling errors.
//!
//! The regression coefficients come from a moment system corrected for the
//! known error covariances; `sigma2_b` maximizes the normal likelihood of the
//! residuals `v_i` with `(beta0, beta1)` held at their moment estimates.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SaeError};
use crate::model::{AreaObservation, Dataset, ModelParams};
use crate::optimize::maximize_on_interval;

/// Condition number above which the moment matrix counts as singular.
pub const MAX_CONDITION_NUMBER: f64 = 1e12;

/// Minimum admissible `sigma2_b + sigma2_delta_i`.
pub const MIN_TOTAL_VARIANCE: f64 = 1e-12;

/// Absolute tolerance on the maximizing `sigma2_b`.
pub const SIGMA2_XTOL: f64 = 1e-10;

/// Estimation and prediction procedure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Correlated measurement and sampling errors.
    Mecor,
    /// Measurement error with `Cov(u, e)` assumed zero.
    Yl,
    /// Plain Fay-Herriot, covariate treated as exact.
    Fh,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Mecor => "mecor",
            Method::Yl => "yl",
            Method::Fh => "fh",
        }
    }

    pub(crate) fn error_model(self) -> ErrorModel {
        match self {
            Method::Mecor => ErrorModel::Correlated,
            Method::Yl => ErrorModel::Uncorrelated,
            Method::Fh => ErrorModel::Ignored,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = SaeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mecor" => Ok(Method::Mecor),
            "yl" => Ok(Method::Yl),
            "fh" => Ok(Method::Fh),
            other => Err(SaeError::InvalidConfig(format!("unknown method `{other}`"))),
        }
    }
}

/// Which blocks of `Psi_i` an estimator takes into account.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum ErrorModel {
    Correlated,
    Uncorrelated,
    Ignored,
}

impl ErrorModel {
    pub(crate) fn cross_ue(self, obs: &AreaObservation, beta1: &[f64]) -> f64 {
        match self {
            ErrorModel::Correlated => obs.psi.cross_ue(beta1),
            _ => 0.0,
        }
    }

    pub(crate) fn quad_uu(self, obs: &AreaObservation, beta1: &[f64]) -> f64 {
        match self {
            ErrorModel::Ignored => 0.0,
            _ => obs.psi.quad_uu(beta1),
        }
    }

    /// `sigma2_delta_i = beta1' Psi_uu beta1 + psi_ee - 2 beta1' Psi_ue`.
    pub(crate) fn delta_variance(self, obs: &AreaObservation, beta1: &[f64]) -> f64 {
        self.quad_uu(obs, beta1) + obs.psi.psi_ee - 2.0 * self.cross_ue(obs, beta1)
    }
}

/// Sample moments corrected for the known error covariances.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentStats {
    pub zeta1: DVector<f64>,
    pub zeta2: f64,
    pub zeta3: DVector<f64>,
    pub zeta4: DMatrix<f64>,
}

impl MomentStats {
    /// `[[1, zeta3'], [zeta3, zeta4]]`.
    pub fn moment_matrix(&self) -> DMatrix<f64> {
        let p = self.zeta3.len();
        let mut m = DMatrix::zeros(p + 1, p + 1);
        m[(0, 0)] = 1.0;
        for k in 0..p {
            m[(0, k + 1)] = self.zeta3[k];
            m[(k + 1, 0)] = self.zeta3[k];
        }
        m.view_mut((1, 1), (p, p)).copy_from(&self.zeta4);
        m
    }

    /// `(zeta2, zeta1')'`.
    pub fn moment_rhs(&self) -> DVector<f64> {
        let p = self.zeta1.len();
        let mut r = DVector::zeros(p + 1);
        r[0] = self.zeta2;
        for k in 0..p {
            r[k + 1] = self.zeta1[k];
        }
        r
    }
}

/// Regression coefficients with the conditioning of the system that
/// produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Coefficients {
    pub beta0: f64,
    pub beta1: Vec<f64>,
    pub condition_number: f64,
}

/// Outcome of fitting one procedure to one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub method: Method,
    pub params: ModelParams,
    /// Untruncated moment estimator of `sigma2_b`; absent for FH.
    pub sigma2_b_yl: Option<f64>,
    pub loglik_at_optimum: f64,
    pub n_areas: usize,
    pub diagnostics: BTreeMap<String, f64>,
}

pub fn compute_moments(ds: &Dataset) -> Result<MomentStats> {
    let refs: Vec<&AreaObservation> = ds.iter().collect();
    moments_of(&refs, ds.p(), ErrorModel::Correlated)
}

pub(crate) fn moments_of(
    obs: &[&AreaObservation],
    p: usize,
    model: ErrorModel,
) -> Result<MomentStats> {
    let n = obs.len();
    if n < p + 2 {
        return Err(SaeError::TooFewAreas {
            required: p + 2,
            got: n,
        });
    }
    let mut yw = vec![0.0; p];
    let mut ue = vec![0.0; p];
    let mut y = 0.0;
    let mut w = vec![0.0; p];
    let mut ww = DMatrix::<f64>::zeros(p, p);
    let mut uu = DMatrix::<f64>::zeros(p, p);
    for o in obs {
        y += o.y;
        for r in 0..p {
            yw[r] += o.y * o.w[r];
            w[r] += o.w[r];
            for c in 0..p {
                ww[(r, c)] += o.w[r] * o.w[c];
            }
        }
        if model == ErrorModel::Correlated {
            for r in 0..p {
                ue[r] += o.psi.psi_ue[r];
            }
        }
        if model != ErrorModel::Ignored {
            uu += &o.psi.psi_uu;
        }
    }
    let nf = n as f64;
    let zeta1 = DVector::from_iterator(p, (0..p).map(|r| yw[r] / nf - ue[r] / nf));
    let zeta3 = DVector::from_iterator(p, w.iter().map(|s| s / nf));
    let zeta4 = DMatrix::from_fn(p, p, |r, c| ww[(r, c)] / nf - uu[(r, c)] / nf);
    Ok(MomentStats {
        zeta1,
        zeta2: y / nf,
        zeta3,
        zeta4,
    })
}

/// Solves `(1, zeta3'; zeta3, zeta4) (beta0, beta1')' = (zeta2, zeta1')'`.
pub fn estimate_beta(moments: &MomentStats) -> Result<Coefficients> {
    solve_checked(moments.moment_matrix(), moments.moment_rhs())
}

pub(crate) fn solve_checked(m: DMatrix<f64>, rhs: DVector<f64>) -> Result<Coefficients> {
    let condition = condition_number(&m);
    if !(condition <= MAX_CONDITION_NUMBER) {
        return Err(SaeError::SingularMomentMatrix { condition });
    }
    let sol = m
        .lu()
        .solve(&rhs)
        .ok_or(SaeError::SingularMomentMatrix { condition })?;
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(SaeError::SingularMomentMatrix { condition });
    }
    Ok(Coefficients {
        beta0: sol[0],
        beta1: sol.rows(1, sol.len() - 1).iter().copied().collect(),
        condition_number: condition,
    })
}

pub(crate) fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().singular_values();
    let max = sv.iter().copied().fold(0.0, f64::max);
    let min = sv.iter().copied().fold(f64::INFINITY, f64::min);
    if min > 0.0 {
        max / min
    } else {
        f64::INFINITY
    }
}

/// Moment estimator of `sigma2_b`, returned untruncated.
pub fn sigma2_b_yl(ds: &Dataset, beta0: f64, beta1: &[f64]) -> Result<f64> {
    let refs: Vec<&AreaObservation> = ds.iter().collect();
    sigma2_b_moment(&refs, ds.p(), beta0, beta1, ErrorModel::Correlated)
}

pub(crate) fn sigma2_b_moment(
    obs: &[&AreaObservation],
    p: usize,
    beta0: f64,
    beta1: &[f64],
    model: ErrorModel,
) -> Result<f64> {
    let n = obs.len();
    if n <= p + 1 {
        return Err(SaeError::TooFewAreas {
            required: p + 2,
            got: n,
        });
    }
    let total: f64 = obs
        .iter()
        .map(|o| {
            let v = residual(o, beta0, beta1);
            v * v - model.delta_variance(o, beta1)
        })
        .sum();
    Ok(total / (n - p - 1) as f64)
}

fn residual(o: &AreaObservation, beta0: f64, beta1: &[f64]) -> f64 {
    o.y - beta0 - o.w.iter().zip(beta1).map(|(w, b)| w * b).sum::<f64>()
}

/// Squared residuals and per-area error variances entering the normal
/// likelihood for `sigma2_b`.
#[derive(Debug, Clone)]
pub(crate) struct VarianceProfile {
    pub sq_resid: Vec<f64>,
    pub base_var: Vec<f64>,
}

impl VarianceProfile {
    pub fn loglik(&self, sigma2: f64) -> f64 {
        let ln_2pi = (2.0 * std::f64::consts::PI).ln();
        let mut acc = 0.0;
        for (r2, d) in self.sq_resid.iter().zip(&self.base_var) {
            let t = sigma2 + d;
            acc += ln_2pi + t.ln() + r2 / t;
        }
        -0.5 * acc
    }

    pub fn score(&self, sigma2: f64) -> f64 {
        let mut acc = 0.0;
        for (r2, d) in self.sq_resid.iter().zip(&self.base_var) {
            let inv = 1.0 / (sigma2 + d);
            acc += r2 * inv * inv - inv;
        }
        0.5 * acc
    }

    /// `max(1, 10 * sample variance of the residuals)`.
    pub fn upper_bound(resid: &[f64]) -> f64 {
        let n = resid.len() as f64;
        let mean = resid.iter().sum::<f64>() / n;
        let var = if resid.len() > 1 {
            resid.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        (10.0 * var).max(1.0)
    }

    /// Clamps each error variance to `1e-8 * median(psi_ee)`; returns the
    /// number of clamped entries.
    pub fn clamp_base(&mut self, psi_ee: &mut [f64]) -> usize {
        let floor = 1e-8 * median(psi_ee);
        let mut clamped = 0;
        for d in self.base_var.iter_mut() {
            if *d < floor {
                *d = floor;
                clamped += 1;
            }
        }
        clamped
    }

    /// Maximizes the likelihood over `[0, upper]`.
    pub fn maximize(&self, upper: f64) -> (f64, usize) {
        if self.sq_resid.iter().all(|r| *r == 0.0) {
            return (0.0, 0);
        }
        let min_base = self.base_var.iter().copied().fold(f64::INFINITY, f64::min);
        // Keep every total variance strictly positive inside the search.
        let lo = if min_base > MIN_TOTAL_VARIANCE {
            0.0
        } else {
            2.0 * MIN_TOTAL_VARIANCE - min_base
        };
        let hi = upper.max(lo);
        let best = maximize_on_interval(
            |s| self.loglik(s),
            |s| self.score(s),
            lo,
            hi,
            SIGMA2_XTOL,
        );
        (best.argmax, best.evaluations)
    }
}

pub(crate) fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let m = values.len() / 2;
    if values.len() % 2 == 1 {
        values[m]
    } else {
        0.5 * (values[m - 1] + values[m])
    }
}

/// Log of the normal likelihood of the residuals as a function of
/// `sigma2_b`, with `(beta0, beta1)` fixed.
pub fn profile_loglik(sigma2_b: f64, ds: &Dataset, beta0: f64, beta1: &[f64]) -> Result<f64> {
    let mut acc = 0.0;
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    for o in ds {
        let total = sigma2_b + o.psi.delta_variance(beta1);
        if total <= MIN_TOTAL_VARIANCE {
            return Err(SaeError::NonPositiveTotalVariance {
                area_id: o.area_id.clone(),
                value: total,
            });
        }
        let v = residual(o, beta0, beta1);
        acc += ln_2pi + total.ln() + v * v / total;
    }
    Ok(-0.5 * acc)
}

/// Maximum-likelihood `sigma2_b` given moment estimates of the coefficients.
pub fn estimate_sigma2_b_ml(ds: &Dataset, beta0: f64, beta1: &[f64]) -> Result<f64> {
    let refs: Vec<&AreaObservation> = ds.iter().collect();
    let (sigma2, _) = ml_sigma2(&refs, beta0, beta1, ErrorModel::Correlated)?;
    Ok(sigma2)
}

pub(crate) struct MlOutcome {
    pub loglik: f64,
    pub evaluations: usize,
    pub clamped: usize,
}

pub(crate) fn ml_sigma2(
    obs: &[&AreaObservation],
    beta0: f64,
    beta1: &[f64],
    model: ErrorModel,
) -> Result<(f64, MlOutcome)> {
    let resid: Vec<f64> = obs.iter().map(|o| residual(o, beta0, beta1)).collect();
    let mut profile = VarianceProfile {
        sq_resid: resid.iter().map(|r| r * r).collect(),
        base_var: obs.iter().map(|o| model.delta_variance(o, beta1)).collect(),
    };
    let mut psi_ee: Vec<f64> = obs.iter().map(|o| o.psi.psi_ee).collect();
    let clamped = profile.clamp_base(&mut psi_ee);
    let (sigma2, evaluations) = profile.maximize(VarianceProfile::upper_bound(&resid));
    let loglik = profile.loglik(sigma2);
    Ok((
        sigma2,
        MlOutcome {
            loglik,
            evaluations,
            clamped,
        },
    ))
}

/// Moment coefficients followed by the profile-likelihood `sigma2_b`.
pub fn fit_mecor(ds: &Dataset) -> Result<FitResult> {
    let refs: Vec<&AreaObservation> = ds.iter().collect();
    fit_mecor_refs(&refs, ds.p())
}

pub(crate) fn fit_mecor_refs(obs: &[&AreaObservation], p: usize) -> Result<FitResult> {
    let moments = moments_of(obs, p, ErrorModel::Correlated)?;
    let coefs = estimate_beta(&moments)?;
    let raw = sigma2_b_moment(obs, p, coefs.beta0, &coefs.beta1, ErrorModel::Correlated)?;
    let (sigma2, ml) = ml_sigma2(obs, coefs.beta0, &coefs.beta1, ErrorModel::Correlated)?;
    let mut diagnostics = BTreeMap::new();
    diagnostics.insert("condition_number".to_string(), coefs.condition_number);
    diagnostics.insert("optimizer_evaluations".to_string(), ml.evaluations as f64);
    diagnostics.insert("sigma2_delta_clamped".to_string(), ml.clamped as f64);
    Ok(FitResult {
        method: Method::Mecor,
        params: ModelParams::new(coefs.beta0, coefs.beta1, sigma2),
        sigma2_b_yl: Some(raw),
        loglik_at_optimum: ml.loglik,
        n_areas: obs.len(),
        diagnostics,
    })
}
