use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use tempfile::tempdir;

fn manifest() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

fn data(name: &str) -> PathBuf {
    manifest().join("tests/data").join(name)
}

fn mecor(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mecor"))
        .args(args)
        .output()
        .expect("failed to run mecor")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn error_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("stderr is empty");
    serde_json::from_str(line).expect("stderr is not JSON")
}

fn fit_json(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("fit.json")).unwrap()).unwrap()
}

#[test]
fn fit_matches_golden_files() {
    let dir = tempdir().unwrap();
    let out = mecor(&["--output-dir", s(dir.path()), "fit", s(&data("areas20.csv"))]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for name in ["fit.json", "predictions.csv", "mspe.csv"] {
        let got = fs::read(dir.path().join(name)).unwrap();
        let want = fs::read(manifest().join("tests/golden").join(name)).unwrap();
        assert!(got == want, "{name} differs from golden copy");
    }
}

#[test]
fn fit_is_repeatable_byte_for_byte() {
    let a = tempdir().unwrap();
    let b = tempdir().unwrap();
    for d in [&a, &b] {
        let out = mecor(&["--output-dir", s(d.path()), "fit", s(&data("areas20.csv"))]);
        assert!(out.status.success());
    }
    for name in ["fit.json", "predictions.csv", "mspe.csv"] {
        assert_eq!(
            fs::read(a.path().join(name)).unwrap(),
            fs::read(b.path().join(name)).unwrap()
        );
    }
}

#[test]
fn malformed_csv_exits_2() {
    let dir = tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "area_id,y,w_1,psi_uu_11,psi_ue_1,psi_ee\na,one,2,0.1,0,1\n").unwrap();
    let out = mecor(&["--output-dir", s(dir.path()), "fit", s(&bad)]);
    assert_eq!(out.status.code(), Some(2));
    let e = error_json(&out);
    assert_eq!(e["class"], "validation");
    assert_eq!(e["error"], "Parse");
}

#[test]
fn missing_file_exits_2() {
    let dir = tempdir().unwrap();
    let out = mecor(&["--output-dir", s(dir.path()), "fit", s(&dir.path().join("nope.csv"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn singular_moment_matrix_exits_3() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("flat.csv");
    let mut text = String::from("area_id,y,w_1,psi_uu_11,psi_ue_1,psi_ee\n");
    for i in 0..10 {
        text.push_str(&format!("a{i},{},3,0,0,0.5\n", i as f64 * 0.3));
    }
    fs::write(&path, text).unwrap();
    let out = mecor(&["--output-dir", s(dir.path()), "fit", s(&path)]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_json(&out)["class"], "numerical");
}

#[test]
fn yl_equals_mecor_without_cross_covariance() {
    let input = data("areas20_uncorrelated.csv");
    let m = tempdir().unwrap();
    let y = tempdir().unwrap();
    assert!(mecor(&["--output-dir", s(m.path()), "fit", s(&input)]).status.success());
    assert!(mecor(&["--method", "yl", "--output-dir", s(y.path()), "fit", s(&input)])
        .status
        .success());
    let (fm, fy) = (fit_json(m.path()), fit_json(y.path()));
    assert_eq!(fy["method"], "yl");
    let b = |v: &serde_json::Value| (v["beta0"].as_f64().unwrap(), v["beta1"][0].as_f64().unwrap());
    let ((m0, m1), (y0, y1)) = (b(&fm), b(&fy));
    assert!((m0 - y0).abs() < 1e-10);
    assert!((m1 - y1).abs() < 1e-10);
}

#[test]
fn fh_and_no_jackknife_outputs() {
    let fh = tempdir().unwrap();
    let out = mecor(&["--method", "fh", "--output-dir", s(fh.path()), "fit", s(&data("areas20.csv"))]);
    assert!(out.status.success());
    let mspe = fs::read_to_string(fh.path().join("mspe.csv")).unwrap();
    assert!(mspe.lines().skip(1).all(|l| l.ends_with(",false,fh")));
    assert!(fit_json(fh.path())["sigma2_b_yl_raw"].is_null());

    let nj = tempdir().unwrap();
    let out = mecor(&["--output-dir", s(nj.path()), "fit", "--no-jackknife", s(&data("areas20.csv"))]);
    assert!(out.status.success());
    assert!(nj.path().join("predictions.csv").exists());
    assert!(!nj.path().join("mspe.csv").exists());
}

#[test]
fn dash_writes_to_stdout() {
    let out = mecor(&["--output-dir", "-", "fit", "--no-jackknife", s(&data("areas20.csv"))]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with('{'));
    assert!(text.contains("area_id,y,theta_hat,v,e_hat,m1,shrink_coef,method\n"));
    assert!(out.stderr.is_empty());
}

/// Units from `log y = 0.5 + 1.0 log w + b + noise` on 30 areas.
fn synthetic_units(path: &Path) {
    let mut text = String::from("area_id,w_raw,y_raw\n");
    for area in 0..30 {
        let n = 3 + area % 5;
        let level = 1.0 + 0.1 * area as f64;
        let b = 0.3 * ((area as f64) * 1.7).sin();
        for j in 0..n {
            let t = (area * 7 + j) as f64;
            let w = (level + 0.2 * (t * 0.9).sin()).exp();
            let y = (0.5 + w.ln() + b + 0.15 * (t * 1.3).cos()).exp();
            text.push_str(&format!("c{area:02},{w},{y}\n"));
        }
    }
    fs::write(path, text).unwrap();
}

#[test]
fn prep_output_feeds_fit() {
    let dir = tempdir().unwrap();
    let units = dir.path().join("units.csv");
    synthetic_units(&units);
    let out = mecor(&["--output-dir", s(dir.path()), "prep", s(&units)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let areas = fs::read_to_string(dir.path().join("areas.csv")).unwrap();
    assert!(areas.starts_with("area_id,y,w_1,psi_uu_11,psi_ue_1,psi_ee,n_i\n"));
    assert_eq!(areas.lines().count(), 31);
    let side: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("prep.json")).unwrap()).unwrap();
    assert!(side["cor_ue"].as_f64().unwrap().abs() <= 1.0);
    assert!(side["var_ratio"].as_f64().unwrap() > 0.0);

    let fit_dir = dir.path().join("fit");
    let out = mecor(&["--output-dir", s(&fit_dir), "fit", s(&dir.path().join("areas.csv"))]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let rep_dir = dir.path().join("report");
    let out = mecor(&[
        "--output-dir",
        s(&rep_dir),
        "report",
        "--areas",
        s(&dir.path().join("areas.csv")),
        "--mspe",
        s(&fit_dir.join("mspe.csv")),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows: Vec<String> = fs::read_to_string(rep_dir.join("report.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(String::from)
        .collect();
    let sizes: Vec<usize> = rows.iter().map(|r| r.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert!(sizes.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn prep_rejects_zero_response() {
    let dir = tempdir().unwrap();
    let units = dir.path().join("units.csv");
    fs::write(&units, "area_id,w_raw,y_raw\na,1,2\na,2,3\nb,1,0\nb,2,1\n").unwrap();
    let out = mecor(&["--output-dir", s(dir.path()), "prep", s(&units)]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"], "NonPositiveMean");
}

#[test]
fn prep_rejects_single_area() {
    let dir = tempdir().unwrap();
    let units = dir.path().join("units.csv");
    fs::write(&units, "area_id,w_raw,y_raw\na,1,2\na,2,3\na,3,3\n").unwrap();
    let out = mecor(&["--output-dir", s(dir.path()), "prep", s(&units)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn prep_warns_on_weights() {
    let dir = tempdir().unwrap();
    let units = dir.path().join("units.csv");
    fs::write(
        &units,
        "area_id,w_raw,y_raw,weight\na,1,2,1\na,2,3,1\nb,1,1,2\nb,2,1.5,2\n",
    )
    .unwrap();
    let out = mecor(&["--output-dir", s(dir.path()), "prep", s(&units)]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
}

#[test]
fn report_quarter_mspe_gives_half_ratios() {
    let dir = tempdir().unwrap();
    let areas = dir.path().join("areas.csv");
    let mspe = dir.path().join("mspe.csv");
    let psi: [f64; 5] = [0.3, 0.8, 1.7, 0.05, 2.2];
    let mut a = String::from("area_id,y,w_1,psi_uu_11,psi_ue_1,psi_ee,n_i\n");
    let mut m = String::from("area_id,theta_hat,m1,m2_jk,bias_jk,mspe,mspe_lb,lb_applied,method\n");
    for (i, ee) in psi.iter().enumerate() {
        a.push_str(&format!("r{i},1,{i},0.1,0,{ee},{}\n", 10 - i));
        let q = ee / 4.0;
        m.push_str(&format!("r{i},1,{q},0,0,{q},{q},false,mecor\n"));
    }
    fs::write(&areas, a).unwrap();
    fs::write(&mspe, m).unwrap();
    let out = mecor(&[
        "--output-dir",
        s(dir.path()),
        "report",
        "--areas",
        s(&areas),
        "--mspe",
        s(&mspe),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("report.csv")).unwrap();
    let rows: Vec<Vec<String>> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(String::from).collect())
        .collect();
    assert_eq!(rows.len(), 5);
    for r in &rows {
        let i: usize = r[0][1..].parse().unwrap();
        let se: f64 = r[2].parse().unwrap();
        let ratio: f64 = r[4].parse().unwrap();
        assert!((se - psi[i].sqrt()).abs() < 1e-12);
        assert!((ratio - 0.5).abs() < 1e-12);
    }
    let ids: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(ids, vec!["r4", "r3", "r2", "r1", "r0"]);

    let svg = fs::read_to_string(dir.path().join("report.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    assert_eq!(svg.matches("<rect").count(), 10);
    assert_eq!(svg.matches("<rect").count(), svg.matches("</rect>").count());
    assert_eq!(svg.matches(r#"fill="red""#).count(), 5);
    assert_eq!(svg.matches(r#"fill="green""#).count(), 5);
}

#[test]
fn report_schema_mismatch_exits_2() {
    let dir = tempdir().unwrap();
    let out = mecor(&[
        "--output-dir",
        s(dir.path()),
        "report",
        "--areas",
        s(&data("areas20.csv")),
        "--mspe",
        s(&data("areas20.csv")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

fn grid(name: &str) -> PathBuf {
    manifest().join("grids").join(name)
}

#[test]
fn simulate_smoke_schema_and_speed() {
    let dir = tempdir().unwrap();
    let start = Instant::now();
    let out = mecor(&["--output-dir", s(dir.path()), "simulate", s(&grid("smoke.json"))]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(start.elapsed().as_secs_f64() < 10.0);
    let params = fs::read_to_string(dir.path().join("params_normal_unequal.csv")).unwrap();
    assert!(params.starts_with("method,param,a,b,rho,n,mc_mean,mc_sd\n"));
    assert_eq!(params.lines().count(), 1 + 9);
    let mspe = fs::read_to_string(dir.path().join("mspe_t5_unequal.csv")).unwrap();
    assert!(mspe.starts_with("a,b,rho,n,direct,mecor,yl,fh,mecor_mspe,fh_mspe"));
    assert_eq!(mspe.lines().count(), 2);
    assert!(dir.path().join("per_area_normal_equal.csv").exists());
}

#[test]
fn simulate_is_thread_count_invariant() {
    let one = tempdir().unwrap();
    let four = tempdir().unwrap();
    for (d, t) in [(&one, "1"), (&four, "4")] {
        let out = mecor(&[
            "--threads",
            t,
            "--seed",
            "99",
            "--output-dir",
            s(d.path()),
            "simulate",
            "--reps",
            "12",
            s(&grid("smoke.json")),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let mut names: Vec<_> = fs::read_dir(one.path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert_eq!(names.len(), 9);
    for name in names {
        assert_eq!(
            fs::read(one.path().join(&name)).unwrap(),
            fs::read(four.path().join(&name)).unwrap(),
            "{name:?} differs"
        );
    }
}

#[test]
fn simulate_bad_grid_exits_2() {
    let dir = tempdir().unwrap();
    let g = dir.path().join("g.json");
    fs::write(&g, r#"[{"a": 0.25, "b": 0.75, "rho": 0.2, "n": 102}]"#).unwrap();
    let out = mecor(&["--output-dir", s(dir.path()), "simulate", s(&g)]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"], "InvalidConfig");
}

#[test]
fn unknown_flag_exits_2() {
    let out = mecor(&["fit", "--jk-scale", "sideways", "x.csv"]);
    assert_eq!(out.status.code(), Some(2));
}
