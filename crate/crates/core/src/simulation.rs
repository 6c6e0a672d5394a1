//! Monte Carlo engine for the area-level model with correlated measurement
//! and sampling errors.
//!
//! A configuration fixes the error covariance design and the sample size;
//! the true covariates are drawn once per configuration and held fixed
//! across replicates. Each replicate draws its own random effects and errors
//! from an independent ChaCha stream keyed by `(seed, replicate index)`, so
//! results do not depend on how replicates are scheduled across threads.

use nalgebra::{Matrix2, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, StandardNormal, StudentT};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{fit_fh, fit_yl};
use crate::error::{Result, SaeError};
use crate::estimation::{fit_mecor, Method};
use crate::model::{validate_dataset, AreaObservation, Dataset, ErrorCov, LatentTruth, ModelParams};
use crate::mspe::{jackknife_refits, mspe_estimate, JkScale};
use crate::prediction::predict_all;

/// Block indices used for the unequal-covariance design, one per quarter of
/// the areas.
pub const UNEQUAL_BLOCKS: [u32; 4] = [0, 1, 2, 3];

/// Block index used everywhere in the equal-covariance design.
pub const EQUAL_BLOCK: u32 = 1;

/// Largest tolerated share of failed replicates per method.
pub const MAX_FAILED_REPLICATE_SHARE: f64 = 0.01;

/// Degrees of freedom of the heavy-tailed generator.
const T_DOF: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorDistribution {
    #[default]
    Normal,
    /// Student t with 5 degrees of freedom scaled to unit variance.
    T5,
}

impl ErrorDistribution {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorDistribution::Normal => "normal",
            ErrorDistribution::T5 => "t5",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PsiPattern {
    #[default]
    Unequal,
    Equal,
}

impl PsiPattern {
    pub fn as_str(self) -> &'static str {
        match self {
            PsiPattern::Unequal => "unequal",
            PsiPattern::Equal => "equal",
        }
    }
}

fn default_reps() -> usize {
    1000
}

/// `(beta0, beta1, sigma2_b) = (1, 2, 0.36)`.
pub fn default_truth() -> ModelParams {
    ModelParams::new(1.0, vec![2.0], 0.36)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub a: f64,
    pub b: f64,
    pub rho: f64,
    pub n: usize,
    #[serde(default)]
    pub dist: ErrorDistribution,
    #[serde(default)]
    pub psi_pattern: PsiPattern,
    #[serde(default = "default_reps")]
    pub mc_reps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_truth")]
    pub true_params: ModelParams,
}

impl SimConfig {
    pub fn new(a: f64, b: f64, rho: f64, n: usize) -> Self {
        Self {
            a,
            b,
            rho,
            n,
            dist: ErrorDistribution::Normal,
            psi_pattern: PsiPattern::Unequal,
            mc_reps: default_reps(),
            seed: 0,
            true_params: default_truth(),
        }
    }

    pub fn with_dist(mut self, dist: ErrorDistribution) -> Self {
        self.dist = dist;
        self
    }

    pub fn with_pattern(mut self, pattern: PsiPattern) -> Self {
        self.psi_pattern = pattern;
        self
    }

    pub fn with_reps(mut self, reps: usize) -> Self {
        self.mc_reps = reps;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(SaeError::InvalidConfig(msg));
        if !(self.a > 0.0 && self.b > 0.0) {
            return bad(format!("a and b must be positive, got a={} b={}", self.a, self.b));
        }
        if !(self.rho > -1.0 && self.rho < 1.0) {
            return bad(format!("rho must lie in (-1, 1), got {}", self.rho));
        }
        if self.mc_reps == 0 {
            return bad("mc_reps must be at least 1".into());
        }
        if self.n < 4 {
            return bad(format!("n must be at least 4, got {}", self.n));
        }
        if self.psi_pattern == PsiPattern::Unequal && self.n % 4 != 0 {
            return bad(format!("n = {} is not divisible by 4", self.n));
        }
        if self.true_params.p() != 1 {
            return bad("simulation supports a single covariate".into());
        }
        self.true_params.validate()
    }

    /// Covariance block assigned to area `i` (0-based).
    pub fn block_of(&self, i: usize) -> u32 {
        match self.psi_pattern {
            PsiPattern::Equal => EQUAL_BLOCK,
            PsiPattern::Unequal => UNEQUAL_BLOCKS[i / (self.n / 4)],
        }
    }
}

/// `(0.75 + 0.25 j)^2 diag(sqrt a, sqrt b) [[1, rho], [rho, 1]] diag(sqrt a, sqrt b)`.
pub fn build_psi(j: u32, a: f64, b: f64, rho: f64) -> ErrorCov {
    assert!(j <= 4, "block index {j} out of range");
    let c = (0.75 + 0.25 * j as f64).powi(2);
    ErrorCov::univariate(c * a, c * rho * (a * b).sqrt(), c * b)
}

/// Symmetric principal square root of a 2x2 PSD matrix.
pub fn sqrt_psd_2x2(m: &Matrix2<f64>) -> Matrix2<f64> {
    let eig = SymmetricEigen::new(*m);
    let d = Matrix2::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    eig.eigenvectors * d * eig.eigenvectors.transpose()
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn chi_squared_5<R: Rng>(rng: &mut R) -> f64 {
    (0..5)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            z * z
        })
        .sum()
}

/// Fixed true covariates: `n` independent chi-squared(5) draws from stream 0.
pub fn generate_population(config: &SimConfig) -> Vec<f64> {
    let mut rng = stream_rng(config.seed, 0);
    (0..config.n).map(|_| chi_squared_5(&mut rng)).collect()
}

struct Sampler {
    t: Option<StudentT<f64>>,
}

impl Sampler {
    fn new(dist: ErrorDistribution) -> Self {
        let t = match dist {
            ErrorDistribution::Normal => None,
            ErrorDistribution::T5 => Some(StudentT::new(T_DOF).expect("valid dof")),
        };
        Self { t }
    }

    /// One draw with mean 0 and unit variance.
    fn draw<R: Rng>(&self, rng: &mut R) -> f64 {
        match &self.t {
            None => rng.sample(StandardNormal),
            Some(t) => t.sample(rng) / (T_DOF / (T_DOF - 2.0)).sqrt(),
        }
    }
}

/// One Monte Carlo data set together with the latent quantities that
/// generated it.
pub fn generate_replicate(
    config: &SimConfig,
    x: &[f64],
    rep_index: usize,
) -> Result<(Dataset, Vec<LatentTruth>)> {
    let truth = &config.true_params;
    let sigma_b = truth.sigma2_b.sqrt();
    let sampler = Sampler::new(config.dist);
    let mut rng = stream_rng(config.seed, rep_index as u64 + 1);

    let blocks: Vec<(ErrorCov, Matrix2<f64>)> = (0..=4)
        .map(|j| {
            let psi = build_psi(j, config.a, config.b, config.rho);
            let m = Matrix2::new(
                psi.psi_uu[(0, 0)],
                psi.psi_ue[0],
                psi.psi_ue[0],
                psi.psi_ee,
            );
            (psi, sqrt_psd_2x2(&m))
        })
        .collect();

    let mut obs = Vec::with_capacity(x.len());
    let mut latent = Vec::with_capacity(x.len());
    for (i, &xi) in x.iter().enumerate() {
        let (psi, root) = &blocks[config.block_of(i) as usize];
        let zu = sampler.draw(&mut rng);
        let ze = sampler.draw(&mut rng);
        let zb = sampler.draw(&mut rng);
        let u = root[(0, 0)] * zu + root[(0, 1)] * ze;
        let e = root[(1, 0)] * zu + root[(1, 1)] * ze;
        let b = sigma_b * zb;
        let t = LatentTruth::new(truth, vec![xi], b);
        obs.push(AreaObservation::univariate(
            format!("{:04}", i + 1),
            t.theta + e,
            xi + u,
            psi.clone(),
        ));
        latent.push(t);
    }
    Ok((validate_dataset(obs)?, latent))
}

/// Which procedures a simulation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MethodSet {
    pub mecor: bool,
    pub yl: bool,
    pub fh: bool,
    /// Jackknife MSPE estimation for the correlated-error predictor.
    pub mecor_mspe: bool,
    pub jk_scale: JkScale,
}

impl Default for MethodSet {
    fn default() -> Self {
        Self {
            mecor: true,
            yl: true,
            fh: true,
            mecor_mspe: true,
            jk_scale: JkScale::Plain,
        }
    }
}

impl MethodSet {
    /// All estimators but no jackknife.
    pub fn without_jackknife() -> Self {
        Self {
            mecor_mspe: false,
            ..Self::default()
        }
    }

    fn methods(&self) -> Vec<Method> {
        let mut v = Vec::new();
        if self.mecor {
            v.push(Method::Mecor);
        }
        if self.yl {
            v.push(Method::Yl);
        }
        if self.fh {
            v.push(Method::Fh);
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodSummary {
    pub method: Method,
    pub mc_mean: ModelParams,
    pub mc_sd: ModelParams,
    /// Squared prediction error averaged over replicates and areas.
    pub mc_mspe_avg: f64,
    /// Estimated MSPE averaged over replicates and areas.
    pub mc_mean_est_mspe: Option<f64>,
    /// Same for the lower-bounded jackknife estimator.
    pub mc_mean_est_mspe_lb: Option<f64>,
    pub per_area_mspe: Vec<f64>,
    pub successes: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimResult {
    pub config: SimConfig,
    pub direct_mspe_avg: f64,
    pub direct_per_area: Vec<f64>,
    pub mean_psi_ee: f64,
    pub methods: Vec<MethodSummary>,
}

impl SimResult {
    pub fn method(&self, m: Method) -> Option<&MethodSummary> {
        self.methods.iter().find(|s| s.method == m)
    }
}

struct MethodRep {
    params: Vec<f64>,
    sq_err: Vec<f64>,
    est_mspe: Option<Vec<f64>>,
    est_mspe_lb: Option<Vec<f64>>,
}

struct ReplicateOutcome {
    direct_sq_err: Vec<f64>,
    methods: Vec<Option<MethodRep>>,
}

fn squared_errors(pred: impl Iterator<Item = f64>, latent: &[LatentTruth]) -> Vec<f64> {
    pred.zip(latent).map(|(p, t)| (p - t.theta).powi(2)).collect()
}

fn run_method(method: Method, set: &MethodSet, ds: &Dataset, latent: &[LatentTruth]) -> Result<MethodRep> {
    match method {
        Method::Mecor => {
            let fit = fit_mecor(ds)?;
            let preds = predict_all(ds, &fit.params)?;
            let (est, est_lb) = if set.mecor_mspe {
                let jk = jackknife_refits(ds)?;
                let recs = mspe_estimate(ds, &jk, set.jk_scale)?;
                (
                    Some(recs.iter().map(|r| r.mspe).collect()),
                    Some(recs.iter().map(|r| r.mspe_lb).collect()),
                )
            } else {
                (None, None)
            };
            Ok(MethodRep {
                params: fit.params.to_vec(),
                sq_err: squared_errors(preds.iter().map(|p| p.theta_hat), latent),
                est_mspe: est,
                est_mspe_lb: est_lb,
            })
        }
        Method::Yl => {
            let fit = fit_yl(ds)?;
            Ok(MethodRep {
                params: fit.fit.params.to_vec(),
                sq_err: squared_errors(fit.predictions.iter().map(|p| p.theta_hat), latent),
                est_mspe: None,
                est_mspe_lb: None,
            })
        }
        Method::Fh => {
            let fit = fit_fh(ds)?;
            Ok(MethodRep {
                params: fit.fit.params.to_vec(),
                sq_err: squared_errors(fit.predictions.iter().map(|p| p.theta_hat), latent),
                est_mspe: Some(fit.mspe.iter().map(|m| m.mspe).collect()),
                est_mspe_lb: None,
            })
        }
    }
}

fn run_replicate(config: &SimConfig, x: &[f64], rep: usize, set: &MethodSet) -> Result<ReplicateOutcome> {
    let (ds, latent) = generate_replicate(config, x, rep)?;
    let direct_sq_err = squared_errors(ds.iter().map(|o| o.y), &latent);
    let methods = set
        .methods()
        .into_iter()
        .map(|m| run_method(m, set, &ds, &latent).ok())
        .collect();
    Ok(ReplicateOutcome {
        direct_sq_err,
        methods,
    })
}

fn mean_and_sd(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let dim = rows.first().map_or(0, |r| r.len());
    let m = rows.len() as f64;
    let mut mean = vec![0.0; dim];
    for r in rows {
        for (acc, v) in mean.iter_mut().zip(r) {
            *acc += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= m);
    let mut sd = vec![0.0; dim];
    if rows.len() > 1 {
        for r in rows {
            for k in 0..dim {
                sd[k] += (r[k] - mean[k]).powi(2);
            }
        }
        sd.iter_mut().for_each(|v| *v = (*v / (m - 1.0)).sqrt());
    }
    (mean, sd)
}

fn grand_mean(rows: &[&Vec<f64>]) -> f64 {
    let count: usize = rows.iter().map(|r| r.len()).sum();
    rows.iter().flat_map(|r| r.iter()).sum::<f64>() / count as f64
}

fn per_area_mean(rows: &[&Vec<f64>], n: usize) -> Vec<f64> {
    let mut acc = vec![0.0; n];
    for r in rows {
        for (a, v) in acc.iter_mut().zip(r.iter()) {
            *a += v;
        }
    }
    acc.iter().map(|v| v / rows.len() as f64).collect()
}

/// Runs every replicate of `config` on the current rayon pool and reduces
/// the outcomes in replicate order.
pub fn run_simulation(config: &SimConfig, set: &MethodSet) -> Result<SimResult> {
    config.validate()?;
    let x = generate_population(config);
    let outcomes: Vec<ReplicateOutcome> = (0..config.mc_reps)
        .into_par_iter()
        .map(|rep| run_replicate(config, &x, rep, set))
        .collect::<Result<_>>()?;

    let direct_rows: Vec<&Vec<f64>> = outcomes.iter().map(|o| &o.direct_sq_err).collect();
    let mean_psi_ee = (0..config.n)
        .map(|i| build_psi(config.block_of(i), config.a, config.b, config.rho).psi_ee)
        .sum::<f64>()
        / config.n as f64;

    let mut methods = Vec::new();
    for (slot, method) in set.methods().into_iter().enumerate() {
        let reps: Vec<&MethodRep> = outcomes
            .iter()
            .filter_map(|o| o.methods[slot].as_ref())
            .collect();
        let failures = outcomes.len() - reps.len();
        if failures as f64 > MAX_FAILED_REPLICATE_SHARE * outcomes.len() as f64 || reps.is_empty() {
            return Err(SaeError::SimulationUnstable {
                method: method.to_string(),
                failed: failures,
                total: outcomes.len(),
            });
        }
        let params: Vec<Vec<f64>> = reps.iter().map(|r| r.params.clone()).collect();
        let (mean, sd) = mean_and_sd(&params);
        let sq: Vec<&Vec<f64>> = reps.iter().map(|r| &r.sq_err).collect();
        let est: Option<Vec<&Vec<f64>>> = reps.iter().map(|r| r.est_mspe.as_ref()).collect();
        let est_lb: Option<Vec<&Vec<f64>>> = reps.iter().map(|r| r.est_mspe_lb.as_ref()).collect();
        methods.push(MethodSummary {
            method,
            mc_mean: ModelParams::from_slice(&mean)?,
            mc_sd: ModelParams::from_slice(&sd)?,
            mc_mspe_avg: grand_mean(&sq),
            mc_mean_est_mspe: est.as_deref().map(grand_mean),
            mc_mean_est_mspe_lb: est_lb.as_deref().map(grand_mean),
            per_area_mspe: per_area_mean(&sq, config.n),
            successes: reps.len(),
            failures,
        });
    }

    Ok(SimResult {
        config: config.clone(),
        direct_mspe_avg: grand_mean(&direct_rows),
        direct_per_area: per_area_mean(&direct_rows, config.n),
        mean_psi_ee,
        methods,
    })
}

#[derive(Deserialize)]
#[serde(untagged)]
enum GridFile {
    List(Vec<SimConfig>),
    Wrapped { configs: Vec<SimConfig> },
}

/// Reads a grid given either as a JSON list of configs or as
/// `{"configs": [...]}`.
pub fn parse_grid<R: std::io::Read>(reader: R) -> Result<Vec<SimConfig>> {
    let configs = match serde_json::from_reader(reader)? {
        GridFile::List(c) | GridFile::Wrapped { configs: c } => c,
    };
    if configs.is_empty() {
        return Err(SaeError::InvalidConfig("grid has no configurations".into()));
    }
    Ok(configs)
}

/// The 24 configurations of the study: four `(a, b, rho)` designs at two
/// sample sizes, for normal errors with unequal and equal covariances and
/// for t errors with unequal covariances.
pub fn study_grid(mc_reps: usize, seed: u64) -> Vec<SimConfig> {
    let designs = [(0.25, 0.75, 0.2), (0.25, 0.75, 0.8), (0.75, 0.25, 0.2), (0.75, 0.25, 0.8)];
    let families = [
        (ErrorDistribution::Normal, PsiPattern::Unequal),
        (ErrorDistribution::Normal, PsiPattern::Equal),
        (ErrorDistribution::T5, PsiPattern::Unequal),
    ];
    let mut out = Vec::new();
    let mut k = 0u64;
    for (dist, pattern) in families {
        for &(a, b, rho) in &designs {
            for n in [100, 500] {
                out.push(
                    SimConfig::new(a, b, rho, n)
                        .with_dist(dist)
                        .with_pattern(pattern)
                        .with_reps(mc_reps)
                        .with_seed(seed.wrapping_add(k)),
                );
                k += 1;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_block_is_identity() {
        let psi = build_psi(1, 1.0, 1.0, 0.0);
        assert_eq!(psi, ErrorCov::univariate(1.0, 0.0, 1.0));
    }

    #[test]
    fn fourth_block_by_hand() {
        let psi = build_psi(4, 0.25, 0.75, 0.2);
        let c = 3.0625;
        assert!((psi.psi_uu[(0, 0)] - 0.765625).abs() < 1e-15);
        assert!((psi.psi_ee - 2.296875).abs() < 1e-15);
        assert!((psi.psi_ue[0] - c * 0.2 * 0.1875f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn perfect_correlation_is_rank_one() {
        for rho in [-1.0, 1.0] {
            let psi = build_psi(2, 0.25, 0.75, rho);
            let m = psi.assemble();
            assert!(m.determinant().abs() < 1e-14);
            assert!(psi.min_eigenvalue() > -1e-12);
        }
    }

    #[test]
    fn square_root_squares_back() {
        let m = Matrix2::new(0.25, 0.3, 0.3, 0.75);
        let r = sqrt_psd_2x2(&m);
        assert!((r * r - m).abs().max() < 1e-14);
        assert!((r - r.transpose()).abs().max() < 1e-15);
    }

    #[test]
    fn degenerate_replicate_is_the_regression_line() {
        let mut cfg = SimConfig::new(0.25, 0.75, 0.2, 8).with_reps(1);
        cfg.true_params.sigma2_b = 0.0;
        // Tiny a, b: errors vanish up to 1e-7.
        cfg.a = 1e-20;
        cfg.b = 1e-20;
        let x = generate_population(&cfg);
        let (ds, latent) = generate_replicate(&cfg, &x, 0).unwrap();
        for ((o, t), xi) in ds.iter().zip(&latent).zip(&x) {
            assert!((o.y - (1.0 + 2.0 * xi)).abs() < 1e-8);
            assert!((o.w[0] - xi).abs() < 1e-8);
            assert_eq!(t.b, 0.0);
        }
    }

    #[test]
    fn population_is_deterministic() {
        let cfg = SimConfig::new(0.25, 0.75, 0.2, 100).with_seed(7);
        assert_eq!(generate_population(&cfg), generate_population(&cfg));
        let other = cfg.clone().with_seed(8);
        assert_ne!(generate_population(&cfg), generate_population(&other));
    }

    #[test]
    fn quarter_blocks() {
        let cfg = SimConfig::new(0.25, 0.75, 0.2, 8);
        let blocks: Vec<u32> = (0..8).map(|i| cfg.block_of(i)).collect();
        assert_eq!(blocks, vec![0, 0, 1, 1, 2, 2, 3, 3]);
        let eq = cfg.with_pattern(PsiPattern::Equal);
        assert!((0..8).all(|i| eq.block_of(i) == EQUAL_BLOCK));
    }

    #[test]
    fn config_validation() {
        assert!(SimConfig::new(0.25, 0.75, 0.2, 102).validate().is_err());
        assert!(SimConfig::new(0.25, 0.75, 0.2, 102)
            .with_pattern(PsiPattern::Equal)
            .validate()
            .is_ok());
        assert!(SimConfig::new(0.0, 0.75, 0.2, 100).validate().is_err());
        assert!(SimConfig::new(0.25, 0.75, 1.0, 100).validate().is_err());
        assert!(SimConfig::new(0.25, 0.75, 0.2, 100).with_reps(0).validate().is_err());
    }

    #[test]
    fn grid_json_defaults() {
        let cfg: SimConfig =
            serde_json::from_str(r#"{"a":0.25,"b":0.75,"rho":0.2,"n":100}"#).unwrap();
        assert_eq!(cfg.dist, ErrorDistribution::Normal);
        assert_eq!(cfg.psi_pattern, PsiPattern::Unequal);
        assert_eq!(cfg.mc_reps, 1000);
        assert_eq!(cfg.true_params, default_truth());
        let t: SimConfig = serde_json::from_str(
            r#"{"a":0.25,"b":0.75,"rho":0.2,"n":100,"dist":"t5","psi_pattern":"equal"}"#,
        )
        .unwrap();
        assert_eq!(t.dist, ErrorDistribution::T5);
        assert_eq!(t.psi_pattern, PsiPattern::Equal);
    }

    #[test]
    fn study_grid_has_24_configs() {
        let g = study_grid(10, 1);
        assert_eq!(g.len(), 24);
        assert!(g.iter().all(|c| c.validate().is_ok()));
    }
}
