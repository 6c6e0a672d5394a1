//! Delete-one jackknife: refits, the `M2` and bias terms of the MSPE
//! estimator, and the jackknife covariance of `omega_hat`.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{fit_fh_refs, fit_yl_refs};
use crate::error::{Result, SaeError};
use crate::estimation::{fit_mecor_refs, FitResult, Method};
use crate::model::{AreaObservation, Dataset, ModelParams};
use crate::prediction::shrinkage_terms;

/// Largest tolerated share of failed deletions.
pub const MAX_FAILED_SHARE: f64 = 0.05;

/// Scaling applied to jackknife sums of squares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JkScale {
    /// Plain sum over deletions.
    #[default]
    #[serde(rename = "paper", alias = "plain")]
    Plain,
    /// Sum multiplied by `(n - 1) / n`.
    Classic,
}

impl JkScale {
    fn factor(self, n_success: usize) -> f64 {
        match self {
            JkScale::Plain => 1.0,
            JkScale::Classic => (n_success as f64 - 1.0) / n_success as f64,
        }
    }
}

impl std::str::FromStr for JkScale {
    type Err = SaeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" | "plain" => Ok(JkScale::Plain),
            "classic" => Ok(JkScale::Classic),
            other => Err(SaeError::InvalidConfig(format!("unknown jackknife scale `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeletedFit {
    /// Position of the omitted area in the dataset.
    pub index: usize,
    pub area_id: String,
    pub params: ModelParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JackknifeSet {
    pub method: Method,
    pub omega_full: ModelParams,
    pub omega_deleted: Vec<DeletedFit>,
    pub failed_deletions: Vec<String>,
}

impl JackknifeSet {
    /// Successful deletions ordered by area id.
    fn canonical(&self) -> Vec<&DeletedFit> {
        let mut v: Vec<&DeletedFit> = self.omega_deleted.iter().collect();
        v.sort_by(|a, b| a.area_id.cmp(&b.area_id).then(a.index.cmp(&b.index)));
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MspeRecord {
    pub area_id: String,
    pub theta_hat: f64,
    pub m1_hat: f64,
    pub m2_jk: f64,
    pub bias_jk: f64,
    pub mspe: f64,
    pub mspe_lb: f64,
    pub lb_applied: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JackknifeCovariance {
    /// Ordered as `(beta0, beta1..., sigma2_b)`.
    pub matrix: DMatrix<f64>,
    pub std_errors: Vec<f64>,
}

/// Delete-one refits of the correlated-error procedure.
pub fn jackknife_refits(ds: &Dataset) -> Result<JackknifeSet> {
    jackknife_refits_with(ds, Method::Mecor)
}

pub(crate) fn fit_refs(method: Method, obs: &[&AreaObservation], p: usize) -> Result<FitResult> {
    match method {
        Method::Mecor => fit_mecor_refs(obs, p),
        Method::Yl => fit_yl_refs(obs, p),
        Method::Fh => fit_fh_refs(obs, p).map(|f| f.0),
    }
}

pub fn jackknife_refits_with(ds: &Dataset, method: Method) -> Result<JackknifeSet> {
    let n = ds.n();
    let p = ds.p();
    if n < p + 3 {
        return Err(SaeError::TooFewAreas {
            required: p + 3,
            got: n,
        });
    }
    let all: Vec<&AreaObservation> = ds.iter().collect();
    let full = fit_refs(method, &all, p)?;

    let outcomes: Vec<(usize, Result<FitResult>)> = (0..n)
        .into_par_iter()
        .map(|k| {
            let subset: Vec<&AreaObservation> = all
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != k)
                .map(|(_, o)| *o)
                .collect();
            (k, fit_refs(method, &subset, p))
        })
        .collect();

    let mut omega_deleted = Vec::with_capacity(n);
    let mut failed_deletions = Vec::new();
    for (k, outcome) in outcomes {
        match outcome {
            Ok(fit) => omega_deleted.push(DeletedFit {
                index: k,
                area_id: all[k].area_id.clone(),
                params: fit.params,
            }),
            Err(_) => failed_deletions.push(all[k].area_id.clone()),
        }
    }
    if failed_deletions.len() as f64 > MAX_FAILED_SHARE * n as f64 {
        return Err(SaeError::JackknifeDegenerate(format!(
            "{} of {n} deletions failed",
            failed_deletions.len()
        )));
    }
    Ok(JackknifeSet {
        method,
        omega_full: full.params,
        omega_deleted,
        failed_deletions,
    })
}

/// Per-area MSPE estimates `M1(omega_hat) + M2_jk - b_jk`, plus the
/// lower-bounded variant that falls back to `M1 + M2_jk` when the estimate
/// is not positive.
pub fn mspe_estimate(ds: &Dataset, jk: &JackknifeSet, scale: JkScale) -> Result<Vec<MspeRecord>> {
    let model = jk.method.error_model();
    let deleted = jk.canonical();
    let n_success = deleted.len();
    if n_success < 2 {
        return Err(SaeError::JackknifeDegenerate(format!(
            "only {n_success} successful deletions"
        )));
    }
    let factor = scale.factor(n_success);
    let nf = n_success as f64;

    ds.iter()
        .map(|obs| {
            let full = &jk.omega_full;
            let (shrink_full, m1_hat) = shrinkage_terms(obs, full, model)?;
            let v_full = obs.y - full.linear_predictor(obs.w.as_slice());
            let theta_hat = obs.y - shrink_full * v_full;

            let mut e_k = Vec::with_capacity(n_success);
            let mut m1_sum = 0.0;
            for d in &deleted {
                let (shrink, m1) = shrinkage_terms(obs, &d.params, model)?;
                let v = obs.y - d.params.linear_predictor(obs.w.as_slice());
                e_k.push(shrink * v);
                m1_sum += m1;
            }
            let e_mean = e_k.iter().sum::<f64>() / nf;
            let m2_jk = factor * e_k.iter().map(|e| (e - e_mean).powi(2)).sum::<f64>();
            let bias_jk = m1_sum / nf - m1_hat;
            let mspe = m1_hat + m2_jk - bias_jk;
            let lb_applied = !(mspe > 0.0);
            let mspe_lb = if lb_applied { m1_hat + m2_jk } else { mspe };
            Ok(MspeRecord {
                area_id: obs.area_id.clone(),
                theta_hat,
                m1_hat,
                m2_jk,
                bias_jk,
                mspe,
                mspe_lb,
                lb_applied,
            })
        })
        .collect()
}

/// `sum_k (omega^(k) - mean)(omega^(k) - mean)'` and the square roots of its
/// diagonal.
pub fn jackknife_covariance(jk: &JackknifeSet, scale: JkScale) -> Result<JackknifeCovariance> {
    let deleted = jk.canonical();
    let m = deleted.len();
    if m < 2 {
        return Err(SaeError::JackknifeDegenerate(format!(
            "only {m} successful deletions"
        )));
    }
    let dim = jk.omega_full.p() + 2;
    let vecs: Vec<Vec<f64>> = deleted.iter().map(|d| d.params.to_vec()).collect();
    let mut mean = vec![0.0; dim];
    for v in &vecs {
        for (acc, x) in mean.iter_mut().zip(v) {
            *acc += x;
        }
    }
    for x in &mut mean {
        *x /= m as f64;
    }
    let mut cov = DMatrix::<f64>::zeros(dim, dim);
    for v in &vecs {
        for r in 0..dim {
            for c in 0..dim {
                cov[(r, c)] += (v[r] - mean[r]) * (v[c] - mean[c]);
            }
        }
    }
    cov *= scale.factor(m);
    let std_errors = (0..dim).map(|k| cov[(k, k)].sqrt()).collect();
    Ok(JackknifeCovariance {
        matrix: cov,
        std_errors,
    })
}
