mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use num_complex::Complex64;
use sha2::{Digest, Sha256};

use affine_volterra::config::RunConfig;
use affine_volterra::simulate::read_ensemble_binary;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn avolt(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_avolt"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn csv_rows(path: &Path) -> (String, Vec<Vec<f64>>) {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().to_string();
    let rows = lines
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    (header, rows)
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn sha256(path: &Path) -> String {
    format!("{:x}", Sha256::digest(std::fs::read(path).unwrap()))
}

#[test]
fn published_schema_is_current() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("schema/run_config.schema.json");
    let on_disk: serde_json::Value = json(&path);
    let generated = serde_json::to_value(RunConfig::schema()).unwrap();
    assert_eq!(on_disk, generated, "regenerate with `avolt schema`");
}

#[test]
fn fixtures_are_canonical_after_one_round_trip() {
    for name in ["rough.json", "classical.json", "zero_vol.json", "inadmissible.json", "generic.json", "zero.json"] {
        let cfg = RunConfig::load(&fixture(name)).unwrap();
        let canon = cfg.canonical_json();
        let again = RunConfig::from_json(&canon).unwrap().canonical_json();
        assert_eq!(canon, again, "{name}");
    }
}

#[test]
fn charfn_matches_classical_oracle() {
    let out = tempfile::tempdir().unwrap();
    let o = avolt(&["charfn"], &fixture("classical.json"), out.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let (header, rows) = csv_rows(&out.path().join("charfn.csv"));
    assert_eq!(header, "w,re,im");
    let oracle = common::Classical {
        s0: 1.0,
        v0: 0.04,
        kappa: 2.0,
        theta: 0.05,
        sigma: 0.3,
        rho: -0.7,
        t: 1.0,
    };
    for r in &rows {
        let expected = oracle.charfn(Complex64::new(r[0], 0.0));
        // 200 Riccati steps
        assert!((Complex64::new(r[1], r[2]) - expected).norm() < 1e-5, "{r:?}");
        if r[0] == 0.0 {
            assert_eq!((r[1], r[2]), (1.0, 0.0));
        }
    }
    for r in &rows {
        let mirror = rows.iter().find(|m| m[0] == -r[0]).unwrap();
        assert!((r[1] - mirror[1]).abs() < 1e-14 && (r[2] + mirror[2]).abs() < 1e-14);
    }
}

#[test]
fn price_table_matches_oracle_and_parity() {
    let out = tempfile::tempdir().unwrap();
    let o = avolt(&["price"], &fixture("classical.json"), out.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let (header, rows) = csv_rows(&out.path().join("prices.csv"));
    assert_eq!(header, "strike,call,put,implied_vol,charfn_evaluations");
    let expected = [(0.9, 0.142317013), (1.0, 0.081757304), (1.1, 0.040167664)];
    for (r, (k, c)) in rows.iter().zip(expected) {
        assert_eq!(r[0], k);
        assert!((r[1] - c).abs() < 1e-5, "{r:?}");
        assert!((r[1] - r[2] - (1.0 - k)).abs() < 1e-8);
        assert!(r[3] > 0.1 && r[3] < 0.3);
    }
}

#[test]
fn zero_vol_prices_are_intrinsic_and_spot_is_flat() {
    let out = tempfile::tempdir().unwrap();
    let cfg = fixture("zero_vol.json");
    assert_eq!(avolt(&["price"], &cfg, out.path()).status.code(), Some(0));
    let (_, rows) = csv_rows(&out.path().join("prices.csv"));
    for r in &rows {
        assert!((r[1] - (1.0 - r[0]).max(0.0)).abs() < 1e-15, "{r:?}");
    }

    assert_eq!(avolt(&["simulate"], &cfg, out.path()).status.code(), Some(0));
    let bin = read_ensemble_binary(std::fs::File::open(out.path().join("ensemble.bin")).unwrap()).unwrap();
    assert_eq!((bin.dim, bin.noise_dim, bin.n_paths, bin.n_steps), (2, 2, 200, 100));
    assert!(bin.states.chunks(2).all(|x| x[0] == 0.0));
    let (header, rows) = csv_rows(&out.path().join("ensemble.csv"));
    assert_eq!(header, "path,node,x1,x2");
    assert_eq!(rows.len(), 200 * 101);
    let summary = json(&out.path().join("summary.json"));
    assert_eq!(summary["martingale"]["pass"], true);
}

#[test]
fn simulate_is_reproducible_and_mean_path_is_consistent() {
    let cfg = fixture("generic.json");
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [&a, &b] {
        let o = avolt(&["simulate", "--threads", "1"], &cfg, dir.path());
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(sha256(&a.path().join("ensemble.bin")), sha256(&b.path().join("ensemble.bin")));
    assert_eq!(sha256(&a.path().join("summary.json")), sha256(&b.path().join("summary.json")));
    let s = json(&a.path().join("summary.json"));
    assert!(s["mean_path_terminal_z"].as_f64().unwrap() <= 3.0, "{s}");
    assert!(s["martingale"].is_null());
}

#[test]
fn validate_reports_rejected_functionals() {
    let out = tempfile::tempdir().unwrap();
    let o = avolt(&["validate"], &fixture("inadmissible.json"), out.path());
    assert_eq!(o.status.code(), Some(1));
    let report = json(&out.path().join("validation.json"));
    assert_eq!(report["passed"], false);
    let items = report["items"].as_array().unwrap();
    let rejected: Vec<_> = items.iter().filter(|i| i["status"] == "rejected").collect();
    assert_eq!(rejected.len(), 1);
    assert_eq!(rejected[0]["name"], "admissibility:explosive_variance");
    assert!(items.iter().filter(|i| i["status"] != "rejected").all(|i| i["status"] == "pass"));
}

#[test]
fn validate_zero_coefficients_is_exact() {
    let out = tempfile::tempdir().unwrap();
    let o = avolt(&["validate"], &fixture("zero.json"), out.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let report = json(&out.path().join("validation.json"));
    for item in report["items"].as_array().unwrap() {
        let name = item["name"].as_str().unwrap();
        if name == "dual_y_order" {
            assert!(item["detail"].as_str().unwrap().ends_with("(exact)"));
        } else if name != "riccati_residual" {
            assert_eq!(item["measured"].as_f64().unwrap(), 0.0, "{item}");
        }
    }
}

#[test]
fn validate_generic_model_passes() {
    let out = tempfile::tempdir().unwrap();
    let o = avolt(&["validate"], &fixture("generic.json"), out.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn errors_are_reported_as_json() {
    let out = tempfile::tempdir().unwrap();
    let bad = out.path().join("bad.json");
    let text = std::fs::read_to_string(fixture("rough.json")).unwrap().replace("\"seed\"", "\"sede\"");
    std::fs::write(&bad, text).unwrap();
    let o = avolt(&["validate"], &bad, out.path());
    assert_eq!(o.status.code(), Some(2));
    let err = json(&out.path().join("error.json"));
    assert_eq!(err["kind"], "config");
    let report = json(&out.path().join("validation.json"));
    assert_eq!(report["passed"], false);
    assert!(report["error"].as_str().unwrap().contains("sede"));

    let o = avolt(&["price"], &fixture("generic.json"), out.path());
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(json(&out.path().join("error.json"))["kind"], "unsupported");
}

#[test]
fn json_logs_are_one_object_per_line() {
    let out = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_avolt"))
        .args(["charfn", "--log", "json", "--config"])
        .arg(fixture("rough.json"))
        .arg("--out")
        .arg(out.path())
        .env("RUST_LOG", "info")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    let stderr = String::from_utf8(o.stderr).unwrap();
    assert!(!stderr.is_empty());
    for line in stderr.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["level"].is_string() && v["message"].is_string());
    }
}
