//! Configuration handling, determinism and traceability of the comparison
//! reports.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use conelab_core::harness::{self, brp_prefactor, edgeworth_cdf, Command, RunConfig, TIMESTAMP_PREFIX};
use conelab_core::spectral::{SolverOptions, SpectralContext};
use conelab_core::{Error, FiniteEnsemble, ScalarReference};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

const GENERIC: &str = r#""dim": 2, "atoms": [[2, 0.5, 1, 1.5], [0.6, 1.1, 0.9, 0.4]], "probs": [0.5, 0.5]"#;

fn config(extra: &str) -> RunConfig {
    RunConfig::parse(&format!("{{{GENERIC}, {extra}}}")).unwrap()
}

/// Non-comment lines of a CSV file, split on commas, keyed by header name.
fn read_csv(path: &Path) -> Vec<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let header: Vec<String> = lines.next().unwrap().split(',').map(String::from).collect();
    lines
        .map(|l| header.iter().cloned().zip(l.split(',').map(String::from)).collect())
        .collect()
}

fn num(row: &BTreeMap<String, String>, key: &str) -> f64 {
    row[key].parse().unwrap()
}

#[test]
fn config_round_trip_and_schema_errors() {
    let cfg = config(r#""n_list": [10, 20], "s_targets": [0.5], "phi": "coord_1", "seed": 7"#);
    assert_eq!(RunConfig::parse(&cfg.to_json()).unwrap(), cfg);

    match RunConfig::parse(r#"{"dim": 2, "atoms": [[1, 2, 3, 4]]}"#).and_then(|c| c.ensemble_doc()) {
        Err(Error::SchemaViolation { path, .. }) => assert_eq!(path, "probs"),
        other => panic!("unexpected {other:?}"),
    }
    match RunConfig::parse(&format!(r#"{{{GENERIC}, "count": "many"}}"#)) {
        Err(Error::SchemaViolation { path, .. }) => assert_eq!(path, "count"),
        other => panic!("unexpected {other:?}"),
    }
    // unknown keys survive parsing and are only warned about
    let cfg = config(r#""colour": "blue""#);
    assert!(cfg.extra.contains_key("colour"));
    assert!(RunConfig::parse(&format!(r#"{{{GENERIC}, "n_list": [20, 10]}}"#)).is_err());
}

#[test]
fn ensemble_path_resolves_relative_to_the_config() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("ens.json"), format!("{{{GENERIC}}}")).unwrap();
    std::fs::write(dir.path().join("run.json"), r#"{"ensemble_path": "ens.json"}"#).unwrap();
    let cfg = RunConfig::load(&dir.path().join("run.json")).unwrap();
    assert_eq!(cfg.ensemble().unwrap().ensemble.len(), 2);
}

fn strip_timestamp(text: &str) -> String {
    text.lines()
        .filter(|l| !l.starts_with(TIMESTAMP_PREFIX))
        .collect::<Vec<_>>()
        .join("\n")
}

const LDP: &str = r#""n_list": [20, 40], "count": 4000, "s_targets": [0.5], "resolution": 128,
    "s_samples": 21, "f": [0.3, 0.7], "v": [0.4, 0.6], "seed": 3,
    "observables": ["coefficient", "vector_norm", "matrix_norm", "spectral_radius"]"#;

#[test]
fn reruns_are_byte_identical_apart_from_the_timestamp() {
    let cfg = config(LDP);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    harness::run(Command::Ldp, &cfg, a.path()).unwrap();
    harness::run(Command::Ldp, &cfg, b.path()).unwrap();
    for name in ["ldp.csv", "ldp_tilts.csv", "spectral_s0.csv"] {
        let x = std::fs::read_to_string(a.path().join(name)).unwrap();
        let y = std::fs::read_to_string(b.path().join(name)).unwrap();
        assert_eq!(strip_timestamp(&x), strip_timestamp(&y), "{name}");
    }
    let report = std::fs::read_to_string(a.path().join("ldp.csv")).unwrap();
    assert!(report.lines().any(|l| l.starts_with(TIMESTAMP_PREFIX)));
    assert!(report.lines().any(|l| l == harness::REPORT_COLUMNS));
}

#[test]
fn ldp_predictions_are_traceable_to_the_emitted_eigendata() {
    let cfg = config(LDP);
    let dir = tempfile::tempdir().unwrap();
    harness::run(Command::Ldp, &cfg, dir.path()).unwrap();
    let tilt = &read_csv(&dir.path().join("ldp_tilts.csv"))[0];
    let (s, rate, sigma_s, nu_r_file) = (num(tilt, "s"), num(tilt, "rate"), num(tilt, "sigma_s"), num(tilt, "nu_r"));

    let mut nodes: Vec<(f64, f64, f64, f64)> = read_csv(&dir.path().join("spectral_s0.csv"))
        .iter()
        .map(|r| (num(r, "v_1"), num(r, "v_2"), num(r, "r_s"), num(r, "nu_s")))
        .collect();
    nodes.sort_by(|a, b| a.0.total_cmp(&b.0));
    let nu_r: f64 = nodes.iter().map(|n| n.2 * n.3).sum();
    assert!((nu_r - nu_r_file).abs() <= 1e-12 * nu_r);

    // r_s(v) = |v|^s r_s(v/|v|), piecewise linear in between nodes
    let r_at = |v: &[f64]| {
        let norm: f64 = v.iter().sum();
        let t = v[0] / norm;
        let k = nodes.partition_point(|n| n.0 <= t).clamp(1, nodes.len() - 1);
        let (lo, hi) = (nodes[k - 1], nodes[k]);
        let a = (t - lo.0) / (hi.0 - lo.0);
        norm.powf(s) * ((1.0 - a) * lo.2 + a * hi.2)
    };
    let nu_f = |f: &[f64]| -> f64 {
        nodes
            .iter()
            .filter(|n| n.3 > 0.0)
            .map(|n| n.3 * (f[0] * n.0 + f[1] * n.1).powf(s))
            .sum()
    };
    let rows = read_csv(&dir.path().join("ldp.csv"));
    let mut seen = 0;
    for row in &rows {
        let n = num(row, "n");
        let factor = (-n * rate).exp() / (s.abs() * sigma_s * (2.0 * PI * n).sqrt());
        let (v, f): (&[f64], &[f64]) = match row["formula"].as_str() {
            "brp-coefficient" => (&[0.4, 0.6], &[0.3, 0.7]),
            "brp-vector-norm" => (&[0.4, 0.6], &[1.0, 1.0]),
            "brp-matrix-norm" => (&[1.0, 1.0], &[1.0, 1.0]),
            "brp-entry11" => (&[1.0, 0.0], &[1.0, 0.0]),
            _ => continue,
        };
        let want = r_at(v) * nu_f(f) / nu_r * factor;
        let got = num(row, "predicted");
        assert!((got - want).abs() <= 1e-12 * want, "{}: {got} vs {want}", row["formula"]);
        seen += 1;
    }
    assert_eq!(seen, 8);
}

#[test]
fn matrix_norm_prefactor_is_the_inverse_pairing() {
    let ens = FiniteEnsemble::from_raw(2, vec![vec![2.0, 0.5, 1.0, 1.5], vec![0.6, 1.1, 0.9, 0.4]], vec![0.5, 0.5]).unwrap();
    let ctx = SpectralContext::build(&ens, 256).unwrap();
    for s in [-0.5, 0.5, 1.0] {
        let sol = ctx.solve(s, &SolverOptions::default()).unwrap();
        let ones = [1.0, 1.0];
        let c = brp_prefactor(&sol, &ones, &ones, |_| 1.0);
        assert!((c * sol.nu_r() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn berry_esseen_distances_stay_in_the_clt_band() {
    let cfg = config(r#""n_list": [64, 256], "count": 20000, "resolution": 256, "seed": 5"#);
    let dir = tempfile::tempdir().unwrap();
    let out = harness::run(Command::BerryEsseen, &cfg, dir.path()).unwrap();
    let sups: Vec<_> = out.report.rows.iter().filter(|r| r.formula == "berry-esseen-sup").collect();
    assert!(!sups.is_empty());
    for r in sups {
        // sqrt(n) * KS stays O(1); the Monte Carlo floor adds about 1.6 / sqrt(count)
        assert!(r.empirical * (r.n as f64).sqrt() < 3.0, "{r:?}");
    }
}

#[test]
fn edgeworth_reduces_to_the_gaussian_on_the_symmetric_reference() {
    let normal = Normal::new(0.0, 1.0).unwrap();
    for y in [-2.0, -0.3, 0.0, 1.7] {
        assert!((edgeworth_cdf(y, 100, 0.8, 0.0, 0.0) - normal.cdf(y)).abs() < 1e-15);
    }
    // p = 1/2 makes the third cumulant vanish; [[2,1],[1,2]] has Perron
    // vector 1, so the drift from v = 1 is zero up to its Monte Carlo estimate
    let doc = ScalarReference::standard().to_doc();
    let mut cfg = RunConfig::from_ensemble(&doc);
    cfg.n_list = vec![50];
    cfg.count = 2000;
    cfg.n_tail = 40;
    cfg.resolution = Some(256);
    let out = harness::cmd_edgeworth(&cfg).unwrap();
    let edge: Vec<_> = out.report.rows_for("edgeworth", "vector_norm").collect();
    let gauss: Vec<_> = out.report.rows_for("gaussian-cdf", "vector_norm").collect();
    let param = |k: &str| -> f64 {
        out.report.params.iter().find(|(key, _)| key == k).unwrap().1.parse().unwrap()
    };
    let (m3, b, sigma) = (param("m3"), param("b_v"), param("sigma"));
    assert!(m3.abs() < 1e-6, "m3 = {m3}");
    assert_eq!(edge.len(), gauss.len());
    for (e, g) in edge.iter().zip(&gauss) {
        let drift_term = -b / (sigma * 50f64.sqrt()) * normal.pdf(e.x);
        assert!((e.predicted - g.predicted - drift_term).abs() < 1e-8, "y = {}", e.x);
    }
}
