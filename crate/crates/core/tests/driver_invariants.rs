use std::path::PathBuf;

use viscofrac_core::constitutive::SymTensor;
use viscofrac_core::field_ops::sym_gradient;
use viscofrac_core::sim_driver::{run, run_with, validate, write_outputs, RunOptions, SimConfig};

fn config(body: &str) -> SimConfig {
    SimConfig::from_toml_str(body).unwrap()
}

fn kernel_config(dt: f64) -> SimConfig {
    config(&format!(
        r#"
[model]
section = "two"
law = {{ kind = "p_growth", p = 3.0 }}
alpha = 2.0
eta = 1e-3
eps_pf = 0.5
[grid]
cells = [2, 2]
dirichlet = ["left"]
[time]
dt = {dt}
t_final = 1.0
[initial]
u1 = ["0.5 * x", "0.2 * x"]
[boundary]
traction = ["0.3 * t", "0.1 * t"]
"#
    ))
}

/// `max_{m,cell} |ε(u_m) − E_m|`, with `E` the exact solution of
/// `E' + αE = F(T)` for `F(T)` constant on each step.
fn memory_kernel_error(dt: f64) -> f64 {
    let cfg = kernel_config(dt);
    let alpha = cfg.model.alpha;
    let out = run_with(&cfg, RunOptions { keep_trajectory: true }).unwrap();
    let strain = |m: usize| sym_gradient(&out.grid, &out.trajectory[m].u).unwrap().values;
    let decay = (-alpha * dt).exp();
    let mut exact = strain(0);
    let mut worst = 0.0f64;
    for m in 1..out.trajectory.len() {
        let (e, e_prev) = (strain(m), strain(m - 1));
        for c in 0..e.len() {
            let forcing: SymTensor = e[c].sub(&e_prev[c]).scale(1.0 / dt).add(&e[c].scale(alpha));
            exact[c] = exact[c].scale(decay).add(&forcing.scale((1.0 - decay) / alpha));
            worst = worst.max(e[c].sub(&exact[c]).norm());
        }
    }
    worst
}

#[test]
fn memory_kernel_holds_to_first_order() {
    let errors: Vec<f64> = [0.02, 0.01, 0.005].iter().map(|&dt| memory_kernel_error(dt)).collect();
    assert!(errors[0] > 0.0);
    for w in errors.windows(2) {
        let ratio = w[1] / w[0];
        assert!((0.35..=0.75).contains(&ratio), "errors {errors:?}");
    }
}

/// Initial velocity supported inside `[1/4, 3/4]²`, so that zero traction is compatible.
const BUMP: &str = "if(x > 0.25 && x < 0.75 && y > 0.25 && y < 0.75, 1e4 * ((x - 0.25) * (0.75 - x) * (y - 0.25) * (0.75 - y))^2, 0)";

#[test]
fn free_energy_does_not_increase_without_load() {
    for (section, law) in [
        ("two", r#"{ kind = "p_growth", p = 2.0 }"#),
        ("three", r#"{ kind = "regularized_strain_limiting", a = 1.0, n = 50 }"#),
    ] {
        let cfg = config(&format!(
            r#"
[model]
section = "{section}"
law = {law}
alpha = 1.0
eta = 1e-3
eps_pf = 0.2
[grid]
cells = [8, 8]
dirichlet = ["bottom"]
[time]
dt = 0.01
t_final = 0.3
[initial]
u1 = ["{BUMP}", "0.5 * {BUMP}"]
"#
        ));
        let out = run(&cfg).unwrap();
        let rows = out.ledger.rows();
        assert!(rows[0].kinetic > 0.0);
        for w in rows.windows(2) {
            assert!(w[1].total <= w[0].total + 1e-12 * (1.0 + w[0].total.abs()), "{section}: {w:?}");
        }
    }
}

#[test]
fn notched_specimen_develops_a_localized_band() {
    let cfg = config(
        r#"
[model]
section = "two"
law = { kind = "p_growth", p = 2.0 }
alpha = 1.0
eta = 1e-3
eps_pf = 0.05
[grid]
cells = [24, 24]
dirichlet = ["bottom"]
[time]
dt = 0.01
t_final = 1.0
[initial]
v0 = "if(x < 0.3 && y > 0.47 && y < 0.53, 0.0, 1.0)"
[boundary]
traction = ["0", "2.0 * t"]
"#,
    );
    let out = run_with(&cfg, RunOptions { keep_trajectory: true }).unwrap();
    let damaged = |v: &[f64]| v.iter().filter(|&&x| x < 0.5).count();
    let counts: Vec<usize> = out.trajectory.iter().map(|s| damaged(&s.v.values)).collect();
    assert!(counts.windows(2).all(|w| w[1] >= w[0]));
    let last = *counts.last().unwrap();
    assert!(last > counts[0], "no crack growth: {counts:?}");
    assert!(last < out.grid.n_nodes() / 4, "damage is not localized: {last}");
    for s in &out.trajectory {
        assert!(s.v.values.iter().all(|x| (0.0..=1.0).contains(x)));
    }
    for row in out.ledger.rows() {
        assert!(row.within_budget());
    }
}

#[test]
fn shipped_configs_validate_and_write_outputs() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().and_then(|e| e.to_str()) != Some("toml") {
            continue;
        }
        seen += 1;
        let cfg = SimConfig::from_file(&path).unwrap();
        assert!(validate(&cfg).unwrap().passed(), "{}", path.display());
    }
    assert!(seen >= 2);

    let mut cfg = SimConfig::from_file(&dir.join("strain_limiting.toml")).unwrap();
    cfg.time.t_final = 0.05;
    cfg.output.cadence = 2;
    let out = run(&cfg).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let written = write_outputs(&out, tmp.path(), true).unwrap();
    assert_eq!(written.len(), 1 + 3 + 1);
    let csv = std::fs::read_to_string(tmp.path().join("ledger.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 6);
    let vtk = std::fs::read_to_string(tmp.path().join("snapshot_000004.vtk")).unwrap();
    assert!(vtk.starts_with("# vtk DataFile Version 3.0"));
    assert!(vtk.contains("POINT_DATA 289"));
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("metadata.json")).unwrap()).unwrap();
    assert_eq!(meta["steps"], 5);
}
