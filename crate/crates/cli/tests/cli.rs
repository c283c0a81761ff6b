use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use margfit::marginal::load_external_curve;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_margfit"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn freireich() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/data/freireich.csv")
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn fit_json(args: &[&str]) -> serde_json::Value {
    let o = run(args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).unwrap()
}

fn write_data(dir: &Path, name: &str, rows: &[(f64, u8, f64)]) -> PathBuf {
    let mut text = String::from("time,status,z\n");
    for (t, d, z) in rows {
        text.push_str(&format!("{t},{d},{z}\n"));
    }
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn fit_freireich() {
    let f = freireich();
    let f = f.to_str().unwrap();
    let v = fit_json(&["fit", f, "--ties", "efron", "--json"]);
    assert_eq!(v["schema"], 1);
    let beta = v["beta"][0].as_f64().unwrap();
    assert!((beta - 1.56).abs() < 0.07, "{beta}");

    let v = fit_json(&["fit", f, "--scheme", "par:exponential", "--json"]);
    let beta = v["beta"][0].as_f64().unwrap();
    assert!((beta - 1.59).abs() < 0.1, "{beta}");

    let o = run(&["fit", f]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("z1"));
}

#[test]
fn fit_writes_json_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("nested/fit.json");
    let o = run(&["fit", freireich().to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(out).unwrap()).unwrap();
    assert_eq!(v["schema"], 1);
    assert_eq!(v["data"]["events"], 30);
}

#[test]
fn km_equals_pl_without_censoring() {
    let dir = tempfile::tempdir().unwrap();
    let rows: Vec<(f64, u8, f64)> = (0..40)
        .map(|i| {
            let z = (i % 3) as f64;
            ((1.0 + i as f64 * 0.37) / (1.0 + z), 1, z)
        })
        .collect();
    let path = write_data(dir.path(), "d.csv", &rows);
    let p = path.to_str().unwrap();
    let pl = fit_json(&["fit", p, "--scheme", "pl", "--json"])["beta"][0].as_f64().unwrap();
    let km = fit_json(&["fit", p, "--scheme", "km", "--json"])["beta"][0].as_f64().unwrap();
    assert!((pl - km).abs() < 1e-8, "{pl} {km}");
}

#[test]
fn simulate_smoke_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for sub in ["a", "b"] {
        let out = dir.path().join(sub);
        let o = run(&[
            "simulate",
            config("smoke.json").to_str().unwrap(),
            "--out-dir",
            out.to_str().unwrap(),
            "--seed",
            "11",
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(stdout(&o).contains("seed: 11"));
        outputs.push((
            fs::read(out.join("smoke.csv")).unwrap(),
            fs::read(out.join("smoke.json")).unwrap(),
        ));
    }
    assert_eq!(outputs[0], outputs[1]);
    let csv = String::from_utf8(outputs[0].0.clone()).unwrap();
    assert!(csv.starts_with("beta,target_censoring,realized_censoring"));
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn bundled_configs_parse() {
    for name in ["table1.json", "table2.json", "table3.json", "smoke.json"] {
        let text = fs::read_to_string(config(name)).unwrap();
        margfit::simulate::StudyPlan::from_json(&text).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}

#[test]
fn simulate_rejects_bad_config() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, r#"{"baseline": {"family": "exponential", "rate": 2.0}, "beta": 1.0, "n": 0, "reps": 1, "censoring_family": "uniform"}"#).unwrap();
    let o = run(&["simulate", path.to_str().unwrap(), "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn are_default_grid_and_single_cell() {
    let o = run(&["are"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 7);
    assert_eq!(lines[0].split(',').count(), 8);
    // beta0 = 0.5, t_c = 1, p = 0.25
    let first: Vec<&str> = lines[1].split(',').collect();
    assert!((first[2].parse::<f64>().unwrap() - 0.797).abs() < 1e-3);

    let o = run(&["are", "--beta0", "1", "--tc", "1", "--p", "0.5"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).lines().count(), 2);

    let o = run(&["are", "--p", "0"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn resample_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let f = freireich();
    let mut draws = Vec::new();
    for k in 0..2 {
        let out = dir.path().join(format!("draws{k}.csv"));
        let summary = dir.path().join(format!("s{k}.json"));
        let o = run(&[
            "resample",
            f.to_str().unwrap(),
            "--b",
            "50",
            "--seed",
            "3",
            "--out",
            out.to_str().unwrap(),
            "--summary",
            summary.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        draws.push(fs::read(out).unwrap());
        let v: serde_json::Value = serde_json::from_slice(&fs::read(summary).unwrap()).unwrap();
        assert_eq!(v["seed"], 3);
    }
    assert_eq!(draws[0], draws[1]);
    let text = String::from_utf8(draws.remove(0)).unwrap();
    assert_eq!(text.lines().next(), Some("z1"));
    assert_eq!(text.lines().count(), 51);
}

#[test]
fn exit_codes() {
    assert_eq!(run(&["fit", "/nonexistent.csv"]).status.code(), Some(3));
    assert_eq!(run(&["fit", "--bogus"]).status.code(), Some(2));
    assert_eq!(
        run(&["fit", freireich().to_str().unwrap(), "--scheme", "nope"]).status.code(),
        Some(2)
    );
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "time,status,z\n1,2,0\n").unwrap();
    assert_eq!(run(&["fit", bad.to_str().unwrap()]).status.code(), Some(3));
    // every subject tied with the same covariate: the information is zero
    let flat = write_data(dir.path(), "flat.csv", &[(1.0, 1, 0.0), (2.0, 1, 0.0), (3.0, 0, 0.0)]);
    assert_eq!(run(&["fit", flat.to_str().unwrap()]).status.code(), Some(4));
    assert!(run(&["--help"]).status.success());
    assert!(run(&["fit", "--help"]).status.success());
}

#[test]
fn km_export_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let f = freireich();
    let o = run(&[
        "km-export",
        f.to_str().unwrap(),
        "--family",
        "exponential",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let km_path = dir.path().join("km.csv");
    let curve = load_external_curve(&km_path).unwrap();
    assert_eq!(curve.survival_at(0.0), 1.0);

    let via_curve = fit_json(&[
        "fit",
        f.to_str().unwrap(),
        "--scheme",
        &format!("curve:{}", km_path.display()),
        "--json",
    ]);
    let via_km = fit_json(&["fit", f.to_str().unwrap(), "--scheme", "km", "--json"]);
    let (a, b) = (via_curve["beta"][0].as_f64().unwrap(), via_km["beta"][0].as_f64().unwrap());
    assert!((a - b).abs() < 1e-9, "{a} {b}");
}

#[test]
fn parametric_curve_is_smoother_than_km() {
    let dir = tempfile::tempdir().unwrap();
    // deterministic exp(2) quantiles
    let n = 60;
    let rows: Vec<(f64, u8, f64)> = (0..n)
        .map(|i| {
            let u = (i as f64 + 0.5) / n as f64;
            (-(1.0 - u).ln() / 2.0, 1, (i % 2) as f64)
        })
        .collect();
    let data = write_data(dir.path(), "exp.csv", &rows);
    let o = run(&[
        "km-export",
        data.to_str().unwrap(),
        "--family",
        "exponential",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let read = |name: &str| -> Vec<(f64, f64)> {
        let text = fs::read_to_string(dir.path().join(name)).unwrap();
        text.lines()
            .skip(1)
            .map(|l| {
                let mut it = l.split(',').map(|x| x.parse::<f64>().unwrap());
                (it.next().unwrap(), it.next().unwrap())
            })
            .collect()
    };
    let par = read("parametric.csv");
    let km = read("km.csv");
    assert_eq!(par.len(), 200);
    assert_eq!(par[0], (0.0, 1.0));
    assert!(par.windows(2).all(|w| w[1].0 > w[0].0 && w[1].1 < w[0].1));
    // the fitted exp(2) survival tracks the KM steps
    for &(t, s) in &km {
        assert!(((-2.0 * t).exp() - s).abs() < 0.05, "t = {t}: km {s}");
    }
}
