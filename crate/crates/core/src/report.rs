//! Direct standard errors against root MSPE of the predictor, per area.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::Write;

use crate::error::{Result, SaeError};
use crate::model::Dataset;
use crate::mspe::MspeRecord;

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub area_id: String,
    pub n_i: Option<usize>,
    /// `sqrt(psi_ee)`.
    pub se_direct: f64,
    /// `sqrt(mspe_lb)`.
    pub rmspe: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub mean_ratio: f64,
}

/// Rows ordered by ascending sample size when sizes are known, otherwise by
/// descending direct variance; ties keep area-id order.
pub fn build_report(ds: &Dataset, sample_sizes: Option<&[usize]>, mspe: &[MspeRecord]) -> Result<Report> {
    if let Some(s) = sample_sizes {
        if s.len() != ds.n() {
            return Err(SaeError::DimensionMismatch(format!(
                "{} sample sizes for {} areas",
                s.len(),
                ds.n()
            )));
        }
    }
    if mspe.len() != ds.n() {
        return Err(SaeError::DimensionMismatch(format!(
            "{} MSPE rows for {} areas",
            mspe.len(),
            ds.n()
        )));
    }
    let by_id: HashMap<&str, &MspeRecord> = mspe.iter().map(|r| (r.area_id.as_str(), r)).collect();
    let mut rows = Vec::with_capacity(ds.n());
    for (i, o) in ds.iter().enumerate() {
        let rec = by_id.get(o.area_id.as_str()).ok_or_else(|| {
            SaeError::DimensionMismatch(format!("no MSPE row for area `{}`", o.area_id))
        })?;
        let se_direct = o.psi.psi_ee.sqrt();
        let rmspe = rec.mspe_lb.max(0.0).sqrt();
        rows.push(ReportRow {
            area_id: o.area_id.clone(),
            n_i: sample_sizes.map(|s| s[i]),
            se_direct,
            rmspe,
            ratio: rmspe / se_direct,
        });
    }
    rows.sort_by(|a, b| {
        let key = match (a.n_i, b.n_i) {
            (Some(x), Some(y)) => x.cmp(&y),
            _ => b.se_direct.total_cmp(&a.se_direct),
        };
        key.then_with(|| a.area_id.cmp(&b.area_id))
    });
    let finite: Vec<f64> = rows.iter().map(|r| r.ratio).filter(|r| r.is_finite()).collect();
    let mean_ratio = finite.iter().sum::<f64>() / finite.len() as f64;
    Ok(Report { rows, mean_ratio })
}

pub fn write_report_csv<W: Write>(writer: W, report: &Report) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["area_id", "n_i", "se_direct", "rmspe", "ratio"])?;
    for r in &report.rows {
        w.write_record([
            r.area_id.clone(),
            r.n_i.map_or_else(String::new, |n| n.to_string()),
            r.se_direct.to_string(),
            r.rmspe.to_string(),
            r.ratio.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

const BAR: f64 = 6.0;
const GAP: f64 = 4.0;
const MARGIN: f64 = 40.0;
const PLOT_HEIGHT: f64 = 240.0;

/// Grouped bars, red for the direct standard error and green for the root
/// MSPE, one pair per area in report order.
pub fn report_svg(report: &Report) -> String {
    let n = report.rows.len();
    let top = report
        .rows
        .iter()
        .flat_map(|r| [r.se_direct, r.rmspe])
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::max);
    let scale = if top > 0.0 { PLOT_HEIGHT / top } else { 0.0 };
    let width = 2.0 * MARGIN + n as f64 * (2.0 * BAR + GAP);
    let height = PLOT_HEIGHT + 2.0 * MARGIN;
    let base = MARGIN + PLOT_HEIGHT;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(
        s,
        r#"<line x1="{MARGIN}" y1="{base}" x2="{}" y2="{base}" stroke="black"/>"#,
        width - MARGIN
    );
    let _ = writeln!(
        s,
        r#"<text x="{MARGIN}" y="{}" font-size="12">max {top:.4}; red: direct SE, green: root MSPE</text>"#,
        MARGIN / 2.0
    );
    for (k, r) in report.rows.iter().enumerate() {
        let x = MARGIN + k as f64 * (2.0 * BAR + GAP);
        for (dx, value, colour) in [(0.0, r.se_direct, "red"), (BAR, r.rmspe, "green")] {
            let h = if value.is_finite() { value * scale } else { 0.0 };
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{BAR}" height="{:.2}" fill="{colour}"><title>{} {:.6}</title></rect>"#,
                x + dx,
                base - h,
                h,
                xml_escape(&r.area_id),
                value
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
