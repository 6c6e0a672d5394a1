//! Comparator procedures: the naive Fay-Herriot fit that treats the observed
//! covariate as exact, and the measurement-error fit that assumes the
//! measurement and sampling errors are uncorrelated.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SaeError};
use crate::estimation::{
    estimate_beta, median, moments_of, sigma2_b_moment, solve_checked, ErrorModel,
    FitResult, Method, VarianceProfile, MIN_TOTAL_VARIANCE, SIGMA2_XTOL,
};
use crate::model::{AreaObservation, Dataset, ModelParams};
use crate::optimize::maximize_on_interval;
use crate::prediction::{predict_all_with, PredictionRecord};

/// Prasad-Rao style MSPE estimate for the Fay-Herriot predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct FhMspeRecord {
    pub area_id: String,
    pub theta_hat: f64,
    pub g1: f64,
    pub g2: f64,
    pub g3: f64,
    /// `g1 + g2 + 2 g3`.
    pub mspe: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FhFit {
    pub fit: FitResult,
    pub predictions: Vec<PredictionRecord>,
    pub mspe: Vec<FhMspeRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct YlFit {
    pub fit: FitResult,
    pub predictions: Vec<PredictionRecord>,
}

/// Uncorrelated-error fit: moment coefficients with `Psi_ue` dropped and the
/// moment estimator of `sigma2_b` truncated at zero.
pub fn fit_yl(ds: &Dataset) -> Result<YlFit> {
    let refs: Vec<&AreaObservation> = ds.iter().collect();
    let fit = fit_yl_refs(&refs, ds.p())?;
    let predictions = predict_all_with(ds, &fit.params, ErrorModel::Uncorrelated)?;
    Ok(YlFit { fit, predictions })
}

pub(crate) fn fit_yl_refs(obs: &[&AreaObservation], p: usize) -> Result<FitResult> {
    let model = ErrorModel::Uncorrelated;
    let moments = moments_of(obs, p, model)?;
    let coefs = estimate_beta(&moments)?;
    let raw = sigma2_b_moment(obs, p, coefs.beta0, &coefs.beta1, model)?;
    let sigma2 = raw.max(0.0);

    let mut profile = VarianceProfile {
        sq_resid: obs
            .iter()
            .map(|o| {
                let v = o.y
                    - coefs.beta0
                    - o.w.iter().zip(&coefs.beta1).map(|(w, b)| w * b).sum::<f64>();
                v * v
            })
            .collect(),
        base_var: obs.iter().map(|o| model.delta_variance(o, &coefs.beta1)).collect(),
    };
    let mut psi_ee: Vec<f64> = obs.iter().map(|o| o.psi.psi_ee).collect();
    let clamped = profile.clamp_base(&mut psi_ee);

    let mut diagnostics = BTreeMap::new();
    diagnostics.insert("condition_number".to_string(), coefs.condition_number);
    diagnostics.insert("sigma2_delta_clamped".to_string(), clamped as f64);
    diagnostics.insert("truncated".to_string(), if raw < 0.0 { 1.0 } else { 0.0 });
    Ok(FitResult {
        method: Method::Yl,
        loglik_at_optimum: profile.loglik(sigma2),
        params: ModelParams::new(coefs.beta0, coefs.beta1, sigma2),
        sigma2_b_yl: Some(raw),
        n_areas: obs.len(),
        diagnostics,
    })
}

/// Naive Fay-Herriot fit: ML variance component, GLS coefficients, EBLUP
/// and the `g1 + g2 + 2 g3` MSPE estimator.
pub fn fit_fh(ds: &Dataset) -> Result<FhFit> {
    let refs: Vec<&AreaObservation> = ds.iter().collect();
    let (fit, precision_inv) = fit_fh_refs(&refs, ds.p())?;
    let predictions = predict_all_with(ds, &fit.params, ErrorModel::Ignored)?;

    let s2 = fit.params.sigma2_b;
    let info: f64 = ds
        .iter()
        .map(|o| (s2 + o.psi.psi_ee).powi(-2))
        .sum();
    let var_sigma2 = 2.0 / info;
    let mspe = ds
        .iter()
        .zip(&predictions)
        .map(|(o, pred)| {
            let psi = o.psi.psi_ee;
            let total = s2 + psi;
            let x = design_row(o);
            let leverage = (x.transpose() * &precision_inv * &x)[(0, 0)];
            let g1 = s2 * psi / total;
            let g2 = (psi / total).powi(2) * leverage;
            let g3 = psi * psi / total.powi(3) * var_sigma2;
            FhMspeRecord {
                area_id: o.area_id.clone(),
                theta_hat: pred.theta_hat,
                g1,
                g2,
                g3,
                mspe: g1 + g2 + 2.0 * g3,
            }
        })
        .collect();
    Ok(FhFit {
        fit,
        predictions,
        mspe,
    })
}

fn design_row(o: &AreaObservation) -> DVector<f64> {
    let p = o.p();
    let mut x = DVector::zeros(p + 1);
    x[0] = 1.0;
    for k in 0..p {
        x[k + 1] = o.w[k];
    }
    x
}

/// Weighted least squares with weights `1 / (sigma2 + psi_i)`. Returns the
/// coefficients (as `[beta0, beta1...]`), the residuals, and `X' V^-1 X`.
fn gls(obs: &[&AreaObservation], base: &[f64], sigma2: f64) -> Result<(Vec<f64>, Vec<f64>, DMatrix<f64>)> {
    let q = obs[0].p() + 1;
    let mut xtx = DMatrix::<f64>::zeros(q, q);
    let mut xty = DVector::<f64>::zeros(q);
    let mut row = vec![0.0; q];
    for (o, d) in obs.iter().zip(base) {
        let wgt = 1.0 / (sigma2 + d);
        row[0] = 1.0;
        for k in 1..q {
            row[k] = o.w[k - 1];
        }
        for r in 0..q {
            xty[r] += wgt * row[r] * o.y;
            for c in 0..q {
                xtx[(r, c)] += wgt * row[r] * row[c];
            }
        }
    }
    let coefs = solve_checked(xtx.clone(), xty)?;
    let mut beta = Vec::with_capacity(q);
    beta.push(coefs.beta0);
    beta.extend_from_slice(&coefs.beta1);
    let resid = obs
        .iter()
        .map(|o| {
            o.y - beta[0] - o.w.iter().zip(&beta[1..]).map(|(w, b)| w * b).sum::<f64>()
        })
        .collect();
    Ok((beta, resid, xtx))
}

pub(crate) fn fit_fh_refs(obs: &[&AreaObservation], p: usize) -> Result<(FitResult, DMatrix<f64>)> {
    let n = obs.len();
    if n < p + 2 {
        return Err(SaeError::TooFewAreas {
            required: p + 2,
            got: n,
        });
    }
    let mut psi_ee: Vec<f64> = obs.iter().map(|o| o.psi.psi_ee).collect();
    let floor = 1e-8 * median(&mut psi_ee);
    let mut clamped = 0usize;
    let base: Vec<f64> = obs
        .iter()
        .map(|o| {
            if o.psi.psi_ee < floor {
                clamped += 1;
                floor
            } else {
                o.psi.psi_ee
            }
        })
        .collect();

    // Equal weights give the OLS fit used for the search bound.
    let zero_base = vec![0.0; n];
    let (_, ols_resid, _) = gls(obs, &zero_base, 1.0)?;
    let upper = VarianceProfile::upper_bound(&ols_resid);

    let min_base = base.iter().copied().fold(f64::INFINITY, f64::min);
    let lo = if min_base > MIN_TOTAL_VARIANCE {
        0.0
    } else {
        2.0 * MIN_TOTAL_VARIANCE - min_base
    };
    let hi = upper.max(lo);

    let profile_at = |s: f64| -> Option<VarianceProfile> {
        let (_, resid, _) = gls(obs, &base, s).ok()?;
        Some(VarianceProfile {
            sq_resid: resid.iter().map(|r| r * r).collect(),
            base_var: base.clone(),
        })
    };
    let best = maximize_on_interval(
        |s| profile_at(s).map_or(f64::NEG_INFINITY, |pr| pr.loglik(s)),
        |s| profile_at(s).map_or(f64::NAN, |pr| pr.score(s)),
        lo,
        hi,
        SIGMA2_XTOL,
    );
    let sigma2 = best.argmax;
    let (beta, _, xtx) = gls(obs, &base, sigma2)?;
    let precision_inv = xtx
        .clone()
        .try_inverse()
        .ok_or(SaeError::SingularMomentMatrix { condition: f64::INFINITY })?;

    let mut diagnostics = BTreeMap::new();
    diagnostics.insert(
        "condition_number".to_string(),
        crate::estimation::condition_number(&xtx),
    );
    diagnostics.insert("optimizer_evaluations".to_string(), best.evaluations as f64);
    diagnostics.insert("sigma2_delta_clamped".to_string(), clamped as f64);
    let fit = FitResult {
        method: Method::Fh,
        params: ModelParams::new(beta[0], beta[1..].to_vec(), sigma2),
        sigma2_b_yl: None,
        loglik_at_optimum: best.value,
        n_areas: n,
        diagnostics,
    };
    Ok((fit, precision_inv))
}
