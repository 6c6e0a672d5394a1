//! Predictor of the area mean and the leading term of its MSPE.

use crate::error::{Result, SaeError};
use crate::estimation::{ErrorModel, MIN_TOTAL_VARIANCE};
use crate::model::{AreaObservation, Dataset, ModelParams};

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub area_id: String,
    pub y: f64,
    pub v: f64,
    pub e_hat: f64,
    pub theta_hat: f64,
    pub m1: f64,
    /// `(psi_ee - beta1' Psi_ue) / (sigma2_b + sigma2_delta)`.
    pub shrink_coef: f64,
}

/// `v_i = Y_i - beta0 - beta1' W_i`.
pub fn residual_v(obs: &AreaObservation, params: &ModelParams) -> f64 {
    obs.y - params.linear_predictor(obs.w.as_slice())
}

/// `theta_hat = Y - e_hat` with `e_hat` the conditional mean of the sampling
/// error given `v`; `m1` is the conditional variance.
pub fn predict_theta(obs: &AreaObservation, params: &ModelParams) -> Result<PredictionRecord> {
    predict_with(obs, params, ErrorModel::Correlated)
}

pub fn predict_all(ds: &Dataset, params: &ModelParams) -> Result<Vec<PredictionRecord>> {
    ds.iter().map(|o| predict_theta(o, params)).collect()
}

pub(crate) fn predict_all_with(
    ds: &Dataset,
    params: &ModelParams,
    model: ErrorModel,
) -> Result<Vec<PredictionRecord>> {
    ds.iter().map(|o| predict_with(o, params, model)).collect()
}

/// Shrinkage factor and `M1` without building a record, for the jackknife.
pub(crate) fn shrinkage_terms(
    obs: &AreaObservation,
    params: &ModelParams,
    model: ErrorModel,
) -> Result<(f64, f64)> {
    let beta1 = params.beta1.as_slice();
    let total = params.sigma2_b + model.delta_variance(obs, beta1);
    if !(total > MIN_TOTAL_VARIANCE) {
        return Err(SaeError::NonPositiveTotalVariance {
            area_id: obs.area_id.clone(),
            value: total,
        });
    }
    let numer = obs.psi.psi_ee - model.cross_ue(obs, beta1);
    let shrink = numer / total;
    let m1 = obs.psi.psi_ee - numer * numer / total;
    Ok((shrink, m1))
}

pub(crate) fn predict_with(
    obs: &AreaObservation,
    params: &ModelParams,
    model: ErrorModel,
) -> Result<PredictionRecord> {
    let v = residual_v(obs, params);
    let (shrink, m1) = shrinkage_terms(obs, params, model)?;
    let e_hat = shrink * v;
    Ok(PredictionRecord {
        area_id: obs.area_id.clone(),
        y: obs.y,
        v,
        e_hat,
        theta_hat: obs.y - e_hat,
        m1,
        shrink_coef: shrink,
    })
}
