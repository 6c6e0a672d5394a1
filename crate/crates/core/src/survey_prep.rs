//! Unit-level survey records to area-level observations.
//!
//! Each area is treated as a simple random sample. Within-area covariances
//! of the raw unit values are moved to the log scale by the delta method,
//! pooled across areas with degrees-of-freedom weights, and divided by the
//! area sample size.

use std::collections::BTreeMap;

use nalgebra::Matrix2;
use serde::Serialize;

use crate::error::{Result, SaeError};
use crate::model::{validate_dataset, AreaObservation, Dataset, ErrorCov};

#[derive(Debug, Clone, PartialEq)]
pub struct UnitRecord {
    pub area_id: String,
    /// Unit value of the covariate.
    pub w_raw: f64,
    /// Unit value of the response.
    pub y_raw: f64,
}

impl UnitRecord {
    pub fn new(area_id: impl Into<String>, w_raw: f64, y_raw: f64) -> Self {
        Self {
            area_id: area_id.into(),
            w_raw,
            y_raw,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AreaMeans {
    pub w_mean: f64,
    pub y_mean: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedArea {
    pub area_id: String,
    pub n_i: usize,
    /// Log of the area mean response.
    pub y: f64,
    /// Log of the area mean covariate.
    pub w: f64,
    pub psi: ErrorCov,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrepOutput {
    /// Ordered by area id.
    pub areas: Vec<PreparedArea>,
    pub pooled_psi: Matrix2<f64>,
    pub cor_ue: f64,
    pub var_ratio: f64,
    /// Areas with one unit, kept but left out of the pool.
    pub singleton_areas: Vec<String>,
}

#[derive(Serialize)]
struct Sidecar<'a> {
    pooled_psi: [[f64; 2]; 2],
    cor_ue: f64,
    var_ratio: f64,
    singleton_areas: &'a [String],
}

impl PrepOutput {
    pub fn dataset(&self) -> Result<Dataset> {
        validate_dataset(
            self.areas
                .iter()
                .map(|a| AreaObservation::univariate(a.area_id.clone(), a.y, a.w, a.psi.clone()))
                .collect(),
        )
    }

    pub fn sample_sizes(&self) -> Vec<usize> {
        self.areas.iter().map(|a| a.n_i).collect()
    }

    /// `{pooled_psi, cor_ue, var_ratio, singleton_areas}`.
    pub fn sidecar_json(&self) -> serde_json::Value {
        let p = &self.pooled_psi;
        serde_json::to_value(Sidecar {
            pooled_psi: [[p[(0, 0)], p[(0, 1)]], [p[(1, 0)], p[(1, 1)]]],
            cor_ue: self.cor_ue,
            var_ratio: self.var_ratio,
            singleton_areas: &self.singleton_areas,
        })
        .expect("plain numbers serialize")
    }
}

/// Units grouped by area, in area-id order.
pub fn group_units(units: &[UnitRecord]) -> BTreeMap<&str, Vec<&UnitRecord>> {
    let mut groups: BTreeMap<&str, Vec<&UnitRecord>> = BTreeMap::new();
    for u in units {
        groups.entry(u.area_id.as_str()).or_default().push(u);
    }
    groups
}

pub fn area_means(area_id: &str, units: &[&UnitRecord]) -> Result<AreaMeans> {
    if units.is_empty() {
        return Err(SaeError::EmptyArea(area_id.to_string()));
    }
    let n = units.len();
    let w_mean = units.iter().map(|u| u.w_raw).sum::<f64>() / n as f64;
    let y_mean = units.iter().map(|u| u.y_raw).sum::<f64>() / n as f64;
    Ok(AreaMeans { w_mean, y_mean, n })
}

/// Sample covariance of `(w_raw, y_raw)` with divisor `n - 1`.
pub fn within_area_cov(area_id: &str, units: &[&UnitRecord]) -> Result<Matrix2<f64>> {
    let m = area_means(area_id, units)?;
    if m.n < 2 {
        return Err(SaeError::SingletonArea(area_id.to_string()));
    }
    let mut s = Matrix2::zeros();
    for u in units {
        let d = [u.w_raw - m.w_mean, u.y_raw - m.y_mean];
        for r in 0..2 {
            for c in 0..2 {
                s[(r, c)] += d[r] * d[c];
            }
        }
    }
    Ok(s / (m.n - 1) as f64)
}

/// `D Sigma D` with `D = diag(1 / w_mean, 1 / y_mean)`.
pub fn delta_transform(
    area_id: &str,
    sigma: &Matrix2<f64>,
    w_mean: f64,
    y_mean: f64,
) -> Result<Matrix2<f64>> {
    for v in [w_mean, y_mean] {
        if !(v > 0.0) {
            return Err(SaeError::NonPositiveMean {
                area_id: area_id.to_string(),
                value: v,
            });
        }
    }
    let d = Matrix2::from_diagonal(&nalgebra::Vector2::new(1.0 / w_mean, 1.0 / y_mean));
    let out = d * sigma * d;
    Ok((out + out.transpose()) * 0.5)
}

/// `sum (n_i - 1) Psi_i / (sum n_i - D)`.
pub fn pool_psi(items: &[(Matrix2<f64>, usize)]) -> Result<Matrix2<f64>> {
    let dof = items.iter().map(|(_, n)| *n as i64).sum::<i64>() - items.len() as i64;
    if dof <= 0 {
        return Err(SaeError::InsufficientDegreesOfFreedom(dof));
    }
    let mut acc = Matrix2::zeros();
    for (m, n) in items {
        if *n > 1 {
            acc += m * (*n - 1) as f64;
        }
    }
    Ok(acc / dof as f64)
}

fn check_unit(u: &UnitRecord) -> Result<()> {
    for (field, v) in [("w_raw", u.w_raw), ("y_raw", u.y_raw)] {
        if !v.is_finite() {
            return Err(SaeError::NonFiniteValue {
                area_id: u.area_id.clone(),
                field: field.into(),
            });
        }
        if v <= 0.0 {
            return Err(SaeError::NonPositiveMean {
                area_id: u.area_id.clone(),
                value: v,
            });
        }
    }
    Ok(())
}

pub fn prepare(units: &[UnitRecord]) -> Result<PrepOutput> {
    units.iter().try_for_each(check_unit)?;
    let groups = group_units(units);
    if groups.len() < 2 {
        return Err(SaeError::TooFewAreas {
            required: 2,
            got: groups.len(),
        });
    }

    let mut means = Vec::with_capacity(groups.len());
    let mut pool_items = Vec::with_capacity(groups.len());
    let mut singletons = Vec::new();
    for (id, members) in &groups {
        let m = area_means(id, members)?;
        match within_area_cov(id, members) {
            Ok(sigma) => {
                pool_items.push((delta_transform(id, &sigma, m.w_mean, m.y_mean)?, m.n));
            }
            Err(SaeError::SingletonArea(_)) => singletons.push(id.to_string()),
            Err(e) => return Err(e),
        }
        means.push((id.to_string(), m));
    }
    let pooled = pool_psi(&pool_items)?;

    let areas = means
        .into_iter()
        .map(|(area_id, m)| {
            let psi = pooled / m.n as f64;
            PreparedArea {
                area_id,
                n_i: m.n,
                y: m.y_mean.ln(),
                w: m.w_mean.ln(),
                psi: ErrorCov::univariate(psi[(0, 0)], psi[(0, 1)], psi[(1, 1)]),
            }
        })
        .collect();

    Ok(PrepOutput {
        areas,
        pooled_psi: pooled,
        cor_ue: pooled[(0, 1)] / (pooled[(0, 0)] * pooled[(1, 1)]).sqrt(),
        var_ratio: pooled[(0, 0)] / pooled[(1, 1)],
        singleton_areas: singletons,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn units(id: &str, pairs: &[(f64, f64)]) -> Vec<UnitRecord> {
        pairs.iter().map(|&(w, y)| UnitRecord::new(id, w, y)).collect()
    }

    fn refs(u: &[UnitRecord]) -> Vec<&UnitRecord> {
        u.iter().collect()
    }

    #[test]
    fn two_unit_means() {
        let u = units("a", &[(1.0, 1.0), (3.0, 3.0)]);
        assert_eq!(
            area_means("a", &refs(&u)).unwrap(),
            AreaMeans {
                w_mean: 2.0,
                y_mean: 2.0,
                n: 2
            }
        );
    }

    #[test]
    fn single_unit_means() {
        let u = units("a", &[(1.5, 4.0)]);
        let m = area_means("a", &refs(&u)).unwrap();
        assert_eq!((m.w_mean, m.y_mean, m.n), (1.5, 4.0, 1));
        assert!(matches!(
            within_area_cov("a", &refs(&u)),
            Err(SaeError::SingletonArea(_))
        ));
    }

    #[test]
    fn empty_area() {
        assert!(matches!(area_means("z", &[]), Err(SaeError::EmptyArea(_))));
    }

    #[test]
    fn covariance_by_hand() {
        let u = units("a", &[(0.0, 0.0), (2.0, 2.0)]);
        assert_eq!(within_area_cov("a", &refs(&u)).unwrap(), Matrix2::new(2.0, 2.0, 2.0, 2.0));
        let same = units("a", &[(1.0, 5.0), (1.0, 5.0)]);
        assert_eq!(within_area_cov("a", &refs(&same)).unwrap(), Matrix2::zeros());
    }

    #[test]
    fn delta_by_hand() {
        let s = Matrix2::new(4.0, 0.0, 0.0, 9.0);
        assert_eq!(delta_transform("a", &s, 2.0, 3.0).unwrap(), Matrix2::identity());
        assert_eq!(
            delta_transform("a", &Matrix2::identity(), 1.0, 1.0).unwrap(),
            Matrix2::identity()
        );
        assert!(matches!(
            delta_transform("a", &s, 0.0, 3.0),
            Err(SaeError::NonPositiveMean { .. })
        ));
    }

    #[test]
    fn pooling_rules() {
        let p = Matrix2::new(1.0, 0.2, 0.2, 3.0);
        assert_eq!(pool_psi(&[(p, 4), (p, 9)]).unwrap(), p);
        let a = Matrix2::new(1.0, 0.0, 0.0, 1.0);
        let b = Matrix2::new(3.0, 1.0, 1.0, 5.0);
        assert_eq!(pool_psi(&[(a, 2), (b, 2)]).unwrap(), (a + b) / 2.0);
        let hand = (a * 1.0 + b * 4.0) / 5.0;
        assert!((pool_psi(&[(a, 2), (b, 5)]).unwrap() - hand).abs().max() < 1e-12);
        assert!(matches!(
            pool_psi(&[(a, 1), (b, 1)]),
            Err(SaeError::InsufficientDegreesOfFreedom(0))
        ));
    }

    #[test]
    fn singleton_kept_with_full_pooled_psi() {
        let mut u = units("a", &[(1.0, 2.0), (2.0, 3.0), (4.0, 3.5)]);
        u.extend(units("b", &[(2.0, 2.0), (3.0, 5.0)]));
        u.extend(units("c", &[(5.0, 5.0)]));
        let out = prepare(&u).unwrap();
        assert_eq!(out.singleton_areas, vec!["c".to_string()]);
        let c = &out.areas[2];
        assert_eq!(c.n_i, 1);
        assert_eq!(c.psi.psi_ee, out.pooled_psi[(1, 1)]);
        assert_eq!(c.y, 5.0f64.ln());
        let a = &out.areas[0];
        assert!((a.psi.psi_uu[(0, 0)] * 3.0 - out.pooled_psi[(0, 0)]).abs() < 1e-15);
    }

    #[test]
    fn equal_sizes_give_equal_psi() {
        let mut u = units("a", &[(1.0, 2.0), (2.0, 3.0)]);
        u.extend(units("b", &[(3.0, 1.0), (2.5, 4.0)]));
        let out = prepare(&u).unwrap();
        assert_eq!(out.areas[0].psi, out.areas[1].psi);
    }

    #[test]
    fn rescaling_a_variable_leaves_pool_unchanged() {
        let base: Vec<UnitRecord> = (0..20)
            .map(|k| {
                let id = format!("{}", k % 4);
                UnitRecord::new(id, 1.0 + (k as f64 * 0.37).sin().abs(), 2.0 + (k as f64 * 0.91).cos())
            })
            .collect();
        let scaled: Vec<UnitRecord> = base
            .iter()
            .map(|u| UnitRecord::new(u.area_id.clone(), 7.5 * u.w_raw, u.y_raw))
            .collect();
        let a = prepare(&base).unwrap().pooled_psi;
        let b = prepare(&scaled).unwrap().pooled_psi;
        assert!((a - b).abs().max() < 1e-12);
    }

    #[test]
    fn input_errors() {
        let one = units("a", &[(1.0, 2.0), (2.0, 3.0)]);
        assert!(matches!(prepare(&one), Err(SaeError::TooFewAreas { .. })));
        let mut zero = one.clone();
        zero.push(UnitRecord::new("b", 1.0, 0.0));
        assert!(matches!(prepare(&zero), Err(SaeError::NonPositiveMean { .. })));
    }

    #[test]
    fn sidecar_shape() {
        let mut u = units("a", &[(1.0, 2.0), (2.0, 3.0)]);
        u.extend(units("b", &[(3.0, 1.0), (2.5, 4.0)]));
        let j = prepare(&u).unwrap().sidecar_json();
        assert!(j["pooled_psi"][1][1].is_f64());
        assert!(j["cor_ue"].is_f64());
        assert!(j["var_ratio"].is_f64());
    }
}
