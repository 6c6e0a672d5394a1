//! Domain types shared by every estimator: per-area observations, their
//! error covariances, and the fixed model parameters.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SaeError};

/// Relative eigenvalue tolerance for the PSD check, scaled by the trace.
pub const PSD_RELATIVE_TOLERANCE: f64 = 1e-10;

/// Partitioned covariance of `(u_i', e_i)'`: measurement error in the
/// covariate followed by sampling error in the response.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorCov {
    pub psi_uu: DMatrix<f64>,
    pub psi_ue: DVector<f64>,
    pub psi_ee: f64,
}

impl ErrorCov {
    pub fn new(psi_uu: DMatrix<f64>, psi_ue: DVector<f64>, psi_ee: f64) -> Self {
        Self {
            psi_uu,
            psi_ue,
            psi_ee,
        }
    }

    /// Scalar-covariate convenience constructor.
    pub fn univariate(psi_uu: f64, psi_ue: f64, psi_ee: f64) -> Self {
        Self::new(
            DMatrix::from_element(1, 1, psi_uu),
            DVector::from_element(1, psi_ue),
            psi_ee,
        )
    }

    pub fn zeros(p: usize) -> Self {
        Self::new(DMatrix::zeros(p, p), DVector::zeros(p), 0.0)
    }

    pub fn p(&self) -> usize {
        self.psi_ue.len()
    }

    /// The full `(p+1) x (p+1)` matrix with the response in the last slot.
    pub fn assemble(&self) -> DMatrix<f64> {
        let p = self.p();
        let mut m = DMatrix::zeros(p + 1, p + 1);
        m.view_mut((0, 0), (p, p)).copy_from(&self.psi_uu);
        for k in 0..p {
            m[(k, p)] = self.psi_ue[k];
            m[(p, k)] = self.psi_ue[k];
        }
        m[(p, p)] = self.psi_ee;
        m
    }

    /// Splits a full `(p+1) x (p+1)` matrix back into its blocks.
    pub fn from_matrix(m: &DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() || m.nrows() < 2 {
            return Err(SaeError::DimensionMismatch(format!(
                "error covariance must be square with size >= 2, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let p = m.nrows() - 1;
        Ok(Self {
            psi_uu: m.view((0, 0), (p, p)).into_owned(),
            psi_ue: m.view((0, p), (p, 1)).column(0).into_owned(),
            psi_ee: m[(p, p)],
        })
    }

    /// `beta' Psi_uu beta`.
    pub fn quad_uu(&self, beta: &[f64]) -> f64 {
        let p = self.p();
        let mut acc = 0.0;
        for r in 0..p {
            let mut row = 0.0;
            for c in 0..p {
                row += self.psi_uu[(r, c)] * beta[c];
            }
            acc += beta[r] * row;
        }
        acc
    }

    /// `beta' Psi_ue`.
    pub fn cross_ue(&self, beta: &[f64]) -> f64 {
        self.psi_ue.iter().zip(beta).map(|(a, b)| a * b).sum()
    }

    /// Variance of `e_i - beta' u_i`.
    pub fn delta_variance(&self, beta: &[f64]) -> f64 {
        self.quad_uu(beta) + self.psi_ee - 2.0 * self.cross_ue(beta)
    }

    /// Smallest eigenvalue of the assembled matrix.
    pub fn min_eigenvalue(&self) -> f64 {
        let m = self.assemble();
        SymmetricEigen::new(m)
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    fn check(&self, area_id: &str) -> Result<()> {
        let p = self.p();
        if self.psi_uu.nrows() != p || self.psi_uu.ncols() != p {
            return Err(SaeError::DimensionMismatch(format!(
                "area `{area_id}`: psi_uu is {}x{} but psi_ue has length {p}",
                self.psi_uu.nrows(),
                self.psi_uu.ncols()
            )));
        }
        let finite = self.psi_uu.iter().all(|v| v.is_finite())
            && self.psi_ue.iter().all(|v| v.is_finite())
            && self.psi_ee.is_finite();
        if !finite {
            return Err(SaeError::NonFiniteValue {
                area_id: area_id.to_string(),
                field: "psi".into(),
            });
        }
        let scale = self.psi_uu.amax().max(1.0);
        for r in 0..p {
            for c in (r + 1)..p {
                if (self.psi_uu[(r, c)] - self.psi_uu[(c, r)]).abs() > 1e-12 * scale {
                    return Err(SaeError::NonPsdCovariance {
                        area_id: area_id.to_string(),
                        min_eigenvalue: f64::NAN,
                    });
                }
            }
        }
        let neg_diag = (0..p).any(|k| self.psi_uu[(k, k)] < 0.0) || self.psi_ee < 0.0;
        let min_eig = self.min_eigenvalue();
        let trace = self.psi_uu.trace() + self.psi_ee;
        if neg_diag || min_eig < -PSD_RELATIVE_TOLERANCE * trace.abs() {
            return Err(SaeError::NonPsdCovariance {
                area_id: area_id.to_string(),
                min_eigenvalue: min_eig,
            });
        }
        Ok(())
    }
}

/// One area's direct estimates and their known error covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct AreaObservation {
    pub area_id: String,
    pub y: f64,
    pub w: DVector<f64>,
    pub psi: ErrorCov,
}

impl AreaObservation {
    pub fn new(area_id: impl Into<String>, y: f64, w: DVector<f64>, psi: ErrorCov) -> Self {
        Self {
            area_id: area_id.into(),
            y,
            w,
            psi,
        }
    }

    pub fn univariate(area_id: impl Into<String>, y: f64, w: f64, psi: ErrorCov) -> Self {
        Self::new(area_id, y, DVector::from_element(1, w), psi)
    }

    pub fn p(&self) -> usize {
        self.w.len()
    }

    fn check(&self) -> Result<()> {
        if !self.y.is_finite() {
            return Err(SaeError::NonFiniteValue {
                area_id: self.area_id.clone(),
                field: "y".into(),
            });
        }
        if self.w.iter().any(|v| !v.is_finite()) {
            return Err(SaeError::NonFiniteValue {
                area_id: self.area_id.clone(),
                field: "w".into(),
            });
        }
        if self.psi.p() != self.p() {
            return Err(SaeError::DimensionMismatch(format!(
                "area `{}`: w has length {} but psi has p = {}",
                self.area_id,
                self.p(),
                self.psi.p()
            )));
        }
        self.psi.check(&self.area_id)
    }
}

/// `omega = (beta0, beta1', sigma2_b)'`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub beta0: f64,
    pub beta1: Vec<f64>,
    pub sigma2_b: f64,
}

impl ModelParams {
    pub fn new(beta0: f64, beta1: Vec<f64>, sigma2_b: f64) -> Self {
        Self {
            beta0,
            beta1,
            sigma2_b,
        }
    }

    pub fn p(&self) -> usize {
        self.beta1.len()
    }

    /// Flattened `(beta0, beta1..., sigma2_b)`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.p() + 2);
        out.push(self.beta0);
        out.extend_from_slice(&self.beta1);
        out.push(self.sigma2_b);
        out
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        if values.len() < 3 {
            return Err(SaeError::DimensionMismatch(format!(
                "parameter vector needs at least 3 entries, got {}",
                values.len()
            )));
        }
        let last = values.len() - 1;
        Ok(Self::new(values[0], values[1..last].to_vec(), values[last]))
    }

    /// Regression mean `beta0 + beta1' w`.
    pub fn linear_predictor(&self, w: &[f64]) -> f64 {
        self.beta0 + self.beta1.iter().zip(w).map(|(b, x)| b * x).sum::<f64>()
    }

    pub fn validate(&self) -> Result<()> {
        if !self.to_vec().iter().all(|v| v.is_finite()) {
            return Err(SaeError::NonFiniteValue {
                area_id: "<params>".into(),
                field: "omega".into(),
            });
        }
        if self.sigma2_b < 0.0 {
            return Err(SaeError::InvalidConfig(format!(
                "sigma2_b must be >= 0, got {}",
                self.sigma2_b
            )));
        }
        Ok(())
    }
}

/// Simulation-only latent quantities for one area.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTruth {
    pub x: Vec<f64>,
    pub b: f64,
    pub theta: f64,
}

impl LatentTruth {
    pub fn new(params: &ModelParams, x: Vec<f64>, b: f64) -> Self {
        let theta = params.linear_predictor(&x) + b;
        Self { x, b, theta }
    }
}

/// A non-empty collection of observations sharing one covariate dimension,
/// with every per-area invariant verified.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    obs: Vec<AreaObservation>,
    p: usize,
}

/// Checks every observation and returns a dataset with `p` inferred from
/// the first area.
pub fn validate_dataset(obs: Vec<AreaObservation>) -> Result<Dataset> {
    let first = obs.first().ok_or(SaeError::EmptyDataset)?;
    let p = first.p();
    if p == 0 {
        return Err(SaeError::DimensionMismatch(
            "at least one covariate is required".into(),
        ));
    }
    for o in &obs {
        if o.p() != p {
            return Err(SaeError::DimensionMismatch(format!(
                "area `{}` has p = {} but the first area has p = {p}",
                o.area_id,
                o.p()
            )));
        }
        o.check()?;
    }
    Ok(Dataset { obs, p })
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.obs.len()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn observations(&self) -> &[AreaObservation] {
        &self.obs
    }

    pub fn into_observations(self) -> Vec<AreaObservation> {
        self.obs
    }

    pub fn iter(&self) -> std::slice::Iter<'_, AreaObservation> {
        self.obs.iter()
    }

    /// Same data with every `Psi_ue` set to zero. Diagonal blocks of a PSD
    /// matrix are PSD, so the result needs no revalidation.
    pub fn with_psi_ue_zeroed(&self) -> Dataset {
        let obs = self
            .obs
            .iter()
            .map(|o| {
                let mut o = o.clone();
                o.psi.psi_ue.fill(0.0);
                o
            })
            .collect();
        Dataset { obs, p: self.p }
    }

    /// Same data keeping only the sampling variance `psi_ee`.
    pub fn with_measurement_error_ignored(&self) -> Dataset {
        let obs = self
            .obs
            .iter()
            .map(|o| {
                let mut o = o.clone();
                o.psi.psi_uu.fill(0.0);
                o.psi.psi_ue.fill(0.0);
                o
            })
            .collect();
        Dataset { obs, p: self.p }
    }

    /// A copy without the area at `index`.
    pub fn without(&self, index: usize) -> Dataset {
        let obs = self
            .obs
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != index)
            .map(|(_, o)| o.clone())
            .collect();
        Dataset { obs, p: self.p }
    }
}

impl<'a> IntoIterator for &'a Dataset {
    type Item = &'a AreaObservation;
    type IntoIter = std::slice::Iter<'a, AreaObservation>;

    fn into_iter(self) -> Self::IntoIter {
        self.obs.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_area(id: &str, y: f64, w: f64) -> AreaObservation {
        AreaObservation::univariate(id, y, w, ErrorCov::univariate(1.0, 0.0, 1.0))
    }

    #[test]
    fn identity_covariances_validate() {
        let ds = validate_dataset(vec![
            identity_area("a", 1.0, 1.0),
            identity_area("b", 2.0, 2.0),
            identity_area("c", 3.0, 3.0),
        ])
        .unwrap();
        assert_eq!(ds.n(), 3);
        assert_eq!(ds.p(), 1);
    }

    #[test]
    fn negative_sampling_variance_rejected() {
        let bad = AreaObservation::univariate("x", 0.0, 0.0, ErrorCov::univariate(1.0, 0.0, -0.1));
        let err = validate_dataset(vec![identity_area("a", 1.0, 1.0), bad]).unwrap_err();
        assert!(matches!(err, SaeError::NonPsdCovariance { .. }), "{err}");
    }

    #[test]
    fn mixed_dimensions_rejected() {
        let two = AreaObservation::new(
            "two",
            1.0,
            DVector::from_vec(vec![1.0, 2.0]),
            ErrorCov::zeros(2),
        );
        let err = validate_dataset(vec![identity_area("a", 1.0, 1.0), two]).unwrap_err();
        assert!(matches!(err, SaeError::DimensionMismatch(_)));
    }

    #[test]
    fn non_finite_rejected() {
        let err = validate_dataset(vec![identity_area("a", f64::NAN, 1.0)]).unwrap_err();
        assert!(matches!(err, SaeError::NonFiniteValue { .. }));
    }

    #[test]
    fn empty_rejected() {
        assert!(matches!(
            validate_dataset(vec![]).unwrap_err(),
            SaeError::EmptyDataset
        ));
    }

    #[test]
    fn rank_one_covariance_accepted() {
        // rho = 1: singular but PSD
        let cov = ErrorCov::univariate(0.25, (0.25f64 * 0.75).sqrt(), 0.75);
        assert!(cov.check("r1").is_ok());
        assert!(cov.assemble().determinant().abs() < 1e-15);
    }

    #[test]
    fn correlation_above_one_rejected() {
        let cov = ErrorCov::univariate(1.0, 1.1, 1.0);
        assert!(cov.check("bad").is_err());
    }

    #[test]
    fn assemble_then_split_is_identity() {
        let cov = ErrorCov::new(
            DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]),
            DVector::from_vec(vec![0.1, -0.2]),
            1.5,
        );
        let back = ErrorCov::from_matrix(&cov.assemble()).unwrap();
        assert_eq!(back, cov);
    }

    #[test]
    fn validation_is_idempotent() {
        let ds = validate_dataset(vec![identity_area("a", 1.0, 1.0), identity_area("b", 2.0, 0.5)])
            .unwrap();
        let again = validate_dataset(ds.clone().into_observations()).unwrap();
        assert_eq!(ds, again);
    }

    #[test]
    fn latent_truth_theta() {
        let params = ModelParams::new(1.0, vec![2.0], 0.36);
        let t = LatentTruth::new(&params, vec![3.0], 0.5);
        assert_eq!(t.theta, 1.0 + 2.0 * 3.0 + 0.5);
    }

    #[test]
    fn delta_variance_is_variance_of_e_minus_beta_u() {
        let cov = ErrorCov::univariate(0.5, 0.2, 1.0);
        // (-2, 1) Psi (-2, 1)' = 4*0.5 - 2*2*0.2 + 1
        assert!((cov.delta_variance(&[2.0]) - 2.2).abs() < 1e-15);
    }
}
