//! CSV and JSON formats.
//!
//! Area data: `area_id, y, w_1..w_p, psi_uu_rc (upper triangle, row-major),
//! psi_ue_1..psi_ue_p, psi_ee`, with an optional trailing `n_i`. Floats are
//! written in shortest round-trip form so output is stable byte for byte.

use std::collections::HashMap;
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde_json::json;

use crate::baselines::FhMspeRecord;
use crate::error::{Result, SaeError};
use crate::estimation::{FitResult, Method};
use crate::model::{validate_dataset, AreaObservation, Dataset, ErrorCov};
use crate::mspe::{JackknifeCovariance, MspeRecord};
use crate::prediction::PredictionRecord;
use crate::simulation::SimResult;
use crate::survey_prep::UnitRecord;

/// Area-level input together with optional sample sizes.
#[derive(Debug, Clone)]
pub struct AreaFile {
    pub dataset: Dataset,
    pub sample_sizes: Option<Vec<usize>>,
}

fn psi_uu_name(r: usize, c: usize, p: usize) -> String {
    if p < 10 {
        format!("psi_uu_{r}{c}")
    } else {
        format!("psi_uu_{r}_{c}")
    }
}

/// Column names for `p` covariates.
pub fn area_header(p: usize, with_n: bool) -> Vec<String> {
    let mut h = vec!["area_id".to_string(), "y".to_string()];
    h.extend((1..=p).map(|k| format!("w_{k}")));
    for r in 1..=p {
        for c in r..=p {
            h.push(psi_uu_name(r, c, p));
        }
    }
    h.extend((1..=p).map(|k| format!("psi_ue_{k}")));
    h.push("psi_ee".into());
    if with_n {
        h.push("n_i".into());
    }
    h
}

struct Columns {
    index: HashMap<String, usize>,
}

impl Columns {
    fn new(headers: &csv::StringRecord) -> Self {
        Self {
            index: headers
                .iter()
                .enumerate()
                .map(|(i, h)| (h.trim().to_string(), i))
                .collect(),
        }
    }

    fn has(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    fn find(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| SaeError::Parse(format!("missing column `{name}`")))
    }
}

fn field<'a>(rec: &'a csv::StringRecord, idx: usize, line: u64) -> Result<&'a str> {
    rec.get(idx)
        .map(str::trim)
        .ok_or_else(|| SaeError::Parse(format!("line {line}: missing field {}", idx + 1)))
}

fn parse_f64(rec: &csv::StringRecord, idx: usize, line: u64, name: &str) -> Result<f64> {
    let s = field(rec, idx, line)?;
    s.parse::<f64>()
        .map_err(|_| SaeError::Parse(format!("line {line}: column `{name}`: cannot parse `{s}` as a number")))
}

fn line_of(rec: &csv::StringRecord) -> u64 {
    rec.position().map_or(0, |p| p.line())
}

pub fn read_areas<R: Read>(reader: R) -> Result<AreaFile> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let cols = Columns::new(rdr.headers()?);
    let mut p = 0;
    while cols.has(&format!("w_{}", p + 1)) {
        p += 1;
    }
    if p == 0 {
        return Err(SaeError::Parse("no covariate columns `w_1..w_p`".into()));
    }
    let id_col = cols.find("area_id")?;
    let y_col = cols.find("y")?;
    let w_cols: Vec<usize> = (1..=p).map(|k| cols.find(&format!("w_{k}"))).collect::<Result<_>>()?;
    let mut uu_cols = Vec::new();
    for r in 1..=p {
        for c in r..=p {
            let name = psi_uu_name(r, c, p);
            let idx = cols.find(&name).or_else(|_| cols.find(&format!("psi_uu_{r}_{c}")))?;
            uu_cols.push((r - 1, c - 1, idx, name));
        }
    }
    let ue_cols: Vec<usize> = (1..=p).map(|k| cols.find(&format!("psi_ue_{k}"))).collect::<Result<_>>()?;
    let ee_col = cols.find("psi_ee")?;
    let n_col = cols.index.get("n_i").copied();

    let mut obs = Vec::new();
    let mut sizes = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = line_of(&rec);
        let area_id = field(&rec, id_col, line)?.to_string();
        let y = parse_f64(&rec, y_col, line, "y")?;
        let w = DVector::from_iterator(
            p,
            w_cols
                .iter()
                .enumerate()
                .map(|(k, &c)| parse_f64(&rec, c, line, &format!("w_{}", k + 1)))
                .collect::<Result<Vec<_>>>()?,
        );
        let mut uu = DMatrix::zeros(p, p);
        for (r, c, idx, name) in &uu_cols {
            let v = parse_f64(&rec, *idx, line, name)?;
            uu[(*r, *c)] = v;
            uu[(*c, *r)] = v;
        }
        let ue = DVector::from_iterator(
            p,
            ue_cols
                .iter()
                .enumerate()
                .map(|(k, &c)| parse_f64(&rec, c, line, &format!("psi_ue_{}", k + 1)))
                .collect::<Result<Vec<_>>>()?,
        );
        let ee = parse_f64(&rec, ee_col, line, "psi_ee")?;
        if let Some(c) = n_col {
            let s = field(&rec, c, line)?;
            sizes.push(s.parse::<usize>().map_err(|_| {
                SaeError::Parse(format!("line {line}: column `n_i`: `{s}` is not a count"))
            })?);
        }
        obs.push(AreaObservation::new(area_id, y, w, ErrorCov::new(uu, ue, ee)));
    }
    Ok(AreaFile {
        dataset: validate_dataset(obs)?,
        sample_sizes: n_col.map(|_| sizes),
    })
}

pub fn write_areas<W: Write>(writer: W, ds: &Dataset, sample_sizes: Option<&[usize]>) -> Result<()> {
    if let Some(s) = sample_sizes {
        if s.len() != ds.n() {
            return Err(SaeError::DimensionMismatch(format!(
                "{} sample sizes for {} areas",
                s.len(),
                ds.n()
            )));
        }
    }
    let p = ds.p();
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(area_header(p, sample_sizes.is_some()))?;
    for (i, o) in ds.iter().enumerate() {
        let mut row = vec![o.area_id.clone(), o.y.to_string()];
        row.extend(o.w.iter().map(f64::to_string));
        for r in 0..p {
            for c in r..p {
                row.push(o.psi.psi_uu[(r, c)].to_string());
            }
        }
        row.extend(o.psi.psi_ue.iter().map(f64::to_string));
        row.push(o.psi.psi_ee.to_string());
        if let Some(s) = sample_sizes {
            row.push(s[i].to_string());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_predictions<W: Write>(writer: W, records: &[PredictionRecord], method: Method) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["area_id", "y", "theta_hat", "v", "e_hat", "m1", "shrink_coef", "method"])?;
    for r in records {
        w.write_record([
            r.area_id.clone(),
            r.y.to_string(),
            r.theta_hat.to_string(),
            r.v.to_string(),
            r.e_hat.to_string(),
            r.m1.to_string(),
            r.shrink_coef.to_string(),
            method.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

const MSPE_HEADER: [&str; 9] = [
    "area_id", "theta_hat", "m1", "m2_jk", "bias_jk", "mspe", "mspe_lb", "lb_applied", "method",
];

/// FH terms in the jackknife layout: `m1 = g1`, `m2_jk = g2`,
/// `bias_jk = -2 g3`, so that `mspe = m1 + m2_jk - bias_jk` still holds.
pub fn fh_as_mspe_records(records: &[FhMspeRecord]) -> Vec<MspeRecord> {
    records
        .iter()
        .map(|r| MspeRecord {
            area_id: r.area_id.clone(),
            theta_hat: r.theta_hat,
            m1_hat: r.g1,
            m2_jk: r.g2,
            bias_jk: -2.0 * r.g3,
            mspe: r.mspe,
            mspe_lb: r.mspe,
            lb_applied: false,
        })
        .collect()
}

pub fn write_mspe<W: Write>(writer: W, records: &[MspeRecord], method: Method) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(MSPE_HEADER)?;
    for r in records {
        w.write_record([
            r.area_id.clone(),
            r.theta_hat.to_string(),
            r.m1_hat.to_string(),
            r.m2_jk.to_string(),
            r.bias_jk.to_string(),
            r.mspe.to_string(),
            r.mspe_lb.to_string(),
            r.lb_applied.to_string(),
            method.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_mspe<R: Read>(reader: R) -> Result<Vec<MspeRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let cols = Columns::new(rdr.headers()?);
    let idx: Vec<usize> = MSPE_HEADER[..8].iter().map(|n| cols.find(n)).collect::<Result<_>>()?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = line_of(&rec);
        let num = |k: usize| parse_f64(&rec, idx[k], line, MSPE_HEADER[k]);
        let lb = field(&rec, idx[7], line)?;
        out.push(MspeRecord {
            area_id: field(&rec, idx[0], line)?.to_string(),
            theta_hat: num(1)?,
            m1_hat: num(2)?,
            m2_jk: num(3)?,
            bias_jk: num(4)?,
            mspe: num(5)?,
            mspe_lb: num(6)?,
            lb_applied: lb.parse().map_err(|_| {
                SaeError::Parse(format!("line {line}: column `lb_applied`: `{lb}` is not a boolean"))
            })?,
        });
    }
    Ok(out)
}

/// Unit records plus any warnings raised while reading.
pub fn read_units<R: Read>(reader: R) -> Result<(Vec<UnitRecord>, Vec<String>)> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let cols = Columns::new(rdr.headers()?);
    let id = cols.find("area_id")?;
    let w = cols.find("w_raw")?;
    let y = cols.find("y_raw")?;
    let mut warnings = Vec::new();
    if cols.index.keys().any(|k| k.to_ascii_lowercase().contains("weight")) {
        warnings.push("design weights column ignored; units are treated as a simple random sample".to_string());
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = line_of(&rec);
        out.push(UnitRecord::new(
            field(&rec, id, line)?,
            parse_f64(&rec, w, line, "w_raw")?,
            parse_f64(&rec, y, line, "y_raw")?,
        ));
    }
    Ok((out, warnings))
}

/// `{method, beta0, beta1, sigma2_b, sigma2_b_yl_raw, loglik, n, diagnostics}`,
/// plus `jackknife` standard errors and covariance when supplied.
pub fn fit_json(fit: &FitResult, jk: Option<&JackknifeCovariance>) -> serde_json::Value {
    let mut v = json!({
        "method": fit.method.as_str(),
        "beta0": fit.params.beta0,
        "beta1": fit.params.beta1,
        "sigma2_b": fit.params.sigma2_b,
        "sigma2_b_yl_raw": fit.sigma2_b_yl,
        "loglik": fit.loglik_at_optimum,
        "n": fit.n_areas,
        "diagnostics": fit.diagnostics,
    });
    if let Some(jk) = jk {
        let rows: Vec<Vec<f64>> = jk.matrix.row_iter().map(|r| r.iter().copied().collect()).collect();
        v["jackknife"] = json!({ "std_errors": jk.std_errors, "covariance": rows });
    }
    v
}

pub fn write_json<W: Write>(mut writer: W, value: &serde_json::Value) -> Result<()> {
    serde_json::to_writer_pretty(&mut writer, value)?;
    writer.write_all(b"\n")?;
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// Parameter table: `method, param, a, b, rho, n, mc_mean, mc_sd`.
pub fn write_param_table<W: Write>(writer: W, results: &[SimResult]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["method", "param", "a", "b", "rho", "n", "mc_mean", "mc_sd"])?;
    for r in results {
        let c = &r.config;
        for m in &r.methods {
            let names = ["beta0".to_string(), "beta1".to_string(), "sigma2_b".to_string()];
            let mean = m.mc_mean.to_vec();
            let sd = m.mc_sd.to_vec();
            for (k, name) in names.iter().enumerate() {
                w.write_record([
                    m.method.to_string(),
                    name.clone(),
                    c.a.to_string(),
                    c.b.to_string(),
                    c.rho.to_string(),
                    c.n.to_string(),
                    mean[k].to_string(),
                    sd[k].to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// MSPE table: `a, b, rho, n, direct, mecor, yl, fh, mecor_mspe, fh_mspe`,
/// with the lower-bounded jackknife mean appended as `mecor_mspe_lb`.
pub fn write_mspe_table<W: Write>(writer: W, results: &[SimResult]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "a", "b", "rho", "n", "direct", "mecor", "yl", "fh", "mecor_mspe", "fh_mspe", "mecor_mspe_lb",
    ])?;
    for r in results {
        let c = &r.config;
        let mc = |m: Method| r.method(m).map(|s| s.mc_mspe_avg);
        let mecor = r.method(Method::Mecor);
        w.write_record([
            c.a.to_string(),
            c.b.to_string(),
            c.rho.to_string(),
            c.n.to_string(),
            r.direct_mspe_avg.to_string(),
            opt(mc(Method::Mecor)),
            opt(mc(Method::Yl)),
            opt(mc(Method::Fh)),
            opt(mecor.and_then(|s| s.mc_mean_est_mspe)),
            opt(r.method(Method::Fh).and_then(|s| s.mc_mean_est_mspe)),
            opt(mecor.and_then(|s| s.mc_mean_est_mspe_lb)),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Per-area MC MSPE: `a, b, rho, n, area, direct, mecor, yl, fh`.
pub fn write_per_area_table<W: Write>(writer: W, results: &[SimResult]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["a", "b", "rho", "n", "area", "direct", "mecor", "yl", "fh"])?;
    for r in results {
        let c = &r.config;
        let col = |m: Method, i: usize| opt(r.method(m).map(|s| s.per_area_mspe[i]));
        for i in 0..c.n {
            w.write_record([
                c.a.to_string(),
                c.b.to_string(),
                c.rho.to_string(),
                c.n.to_string(),
                (i + 1).to_string(),
                r.direct_per_area[i].to_string(),
                col(Method::Mecor, i),
                col(Method::Yl, i),
                col(Method::Fh, i),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO_AREAS: &str = "area_id,y,w_1,psi_uu_11,psi_ue_1,psi_ee\n\
                             a,1.5,2,0.25,0.1,0.75\n\
                             b,2.5,3,0.25,0,1\n";

    #[test]
    fn area_round_trip() {
        let f = read_areas(TWO_AREAS.as_bytes()).unwrap();
        assert_eq!(f.dataset.n(), 2);
        assert!(f.sample_sizes.is_none());
        let mut out = Vec::new();
        write_areas(&mut out, &f.dataset, None).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), TWO_AREAS);
    }

    #[test]
    fn bivariate_header_and_sizes() {
        let h = area_header(2, true).join(",");
        assert_eq!(
            h,
            "area_id,y,w_1,w_2,psi_uu_11,psi_uu_12,psi_uu_22,psi_ue_1,psi_ue_2,psi_ee,n_i"
        );
        let csv = format!("{h}\nx,1,2,3,1,0.5,1,0,0,1,7\n");
        let f = read_areas(csv.as_bytes()).unwrap();
        let o = &f.dataset.observations()[0];
        assert_eq!(o.psi.psi_uu[(1, 0)], 0.5);
        assert_eq!(f.sample_sizes, Some(vec![7]));
    }

    #[test]
    fn malformed_inputs() {
        let bad_num = "area_id,y,w_1,psi_uu_11,psi_ue_1,psi_ee\na,abc,2,0.25,0.1,0.75\n";
        assert!(matches!(read_areas(bad_num.as_bytes()), Err(SaeError::Parse(_))));
        let missing = "area_id,y,w_1,psi_ue_1,psi_ee\na,1,2,0.1,0.75\n";
        assert!(matches!(read_areas(missing.as_bytes()), Err(SaeError::Parse(_))));
        let ragged = "area_id,y,w_1,psi_uu_11,psi_ue_1,psi_ee\na,1,2\n";
        assert!(read_areas(ragged.as_bytes()).is_err());
        let non_psd = "area_id,y,w_1,psi_uu_11,psi_ue_1,psi_ee\na,1,2,0.25,0.9,0.75\n";
        assert!(matches!(
            read_areas(non_psd.as_bytes()),
            Err(SaeError::NonPsdCovariance { .. })
        ));
    }

    #[test]
    fn mspe_round_trip() {
        let recs = vec![MspeRecord {
            area_id: "a".into(),
            theta_hat: 1.25,
            m1_hat: 0.5,
            m2_jk: 0.125,
            bias_jk: -0.01,
            mspe: 0.635,
            mspe_lb: 0.635,
            lb_applied: false,
        }];
        let mut out = Vec::new();
        write_mspe(&mut out, &recs, Method::Mecor).unwrap();
        assert_eq!(read_mspe(out.as_slice()).unwrap(), recs);
    }

    #[test]
    fn units_with_weights_warn() {
        let (u, warn) = read_units("area_id,w_raw,y_raw,weight\na,1,2,3\n".as_bytes()).unwrap();
        assert_eq!(u, vec![UnitRecord::new("a", 1.0, 2.0)]);
        assert_eq!(warn.len(), 1);
        let (_, none) = read_units("area_id,w_raw,y_raw\na,1,2\n".as_bytes()).unwrap();
        assert!(none.is_empty());
    }
}
