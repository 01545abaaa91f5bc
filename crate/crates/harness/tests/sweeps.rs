use std::path::Path;

use qni_lab::{Axis, Command, ExperimentConfig};

fn module_sweep(target_k: f64, grid: &[usize]) -> serde_json::Value {
    let dir = tempfile::tempdir().unwrap();
    let scenario = dir.path().join("s.json");
    let body = format!(r#"{{"modules": {{"target_k": {target_k}, "n_mc": 400}}}}"#);
    std::fs::write(&scenario, body).unwrap();
    let cfg = ExperimentConfig {
        command: Command::Sweep,
        scenario,
        seeds: vec![0, 1, 2],
        out_dir: dir.path().to_path_buf(),
        parallelism: 2,
        axis: Some(Axis::TModules),
        grid: Some(grid.to_vec()),
    };
    qni_lab::run(&cfg).unwrap();
    serde_json::from_slice(&std::fs::read(dir.path().join("sweep_T_modules_summary.json")).unwrap()).unwrap()
}

fn ys(s: &serde_json::Value) -> Vec<f64> {
    s["points"].as_array().unwrap().iter().map(|p| p["y"].as_f64().unwrap()).collect()
}

/// A quadratic module with Lipschitz constant `K` on the unit ball maps
/// radius `r` to at most `K r^2 / 2`, so compositions collapse towards zero.
#[test]
fn quadratic_compositions_contract_with_depth() {
    let s = module_sweep(1.0, &[1, 2, 3, 4]);
    let y = ys(&s);
    assert!(y.windows(2).all(|w| w[1] < w[0]), "{y:?}");
    assert!(s["slope"].as_f64().unwrap() < 0.0);
}

#[test]
#[ignore = "quadratic modules with K = 1 contract doubly exponentially, so the mean gap falls with T instead of growing linearly"]
fn unit_lipschitz_gap_grows_linearly_in_t() {
    let s = module_sweep(1.0, &[2, 4, 8, 16]);
    let slope = s["slope"].as_f64().unwrap_or(f64::NAN);
    assert!((slope - 1.0).abs() <= 0.3, "{slope}");
}

#[test]
fn sweep_files_land_in_out_dir() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        command: Command::Sweep,
        scenario: Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/default.json"),
        seeds: vec![3, 4],
        out_dir: dir.path().to_path_buf(),
        parallelism: 2,
        axis: Some(Axis::NG),
        grid: Some(vec![50, 100, 200]),
    };
    let out = qni_lab::run(&cfg).unwrap();
    assert!(out.success());
    let table = std::fs::read_to_string(dir.path().join("sweep_n_g.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 3 * 2);
    assert!(table.starts_with("n_g,seed,"));
    let s: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("sweep_n_g_summary.json")).unwrap()).unwrap();
    assert!(s["extra"]["eps_g_fit"]["slope"].as_f64().unwrap() < 0.0);
}
