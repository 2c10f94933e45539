//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits with a
//! failure status if any criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use viscofrac_core::constitutive::{
    conjugate_potential, inverse_response, potential, response, response_jacobian, ConstitutiveLaw, Section,
    SymTensor,
};
use viscofrac_core::field_ops::{Face, Grid, QuadratureField, ScalarField, VectorField};
use viscofrac_core::oracle::{brute_phasefield, fd_jacobian, linear_kv_step, numeric_inverse, OracleConfig};
use viscofrac_core::phasefield_solver::{kkt_residual, phasefield_step, PhaseStepInput};
use viscofrac_core::sim_driver::{
    assembled_load, run_with, validate, FindingKind, RunOptions, SimConfig, SimOutput, State,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn timed(limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> Outcome {
    let start = Instant::now();
    let mut o = f();
    let took = start.elapsed();
    match limit {
        Some(l) => {
            o.detail = format!("{}; {:.1} s (limit {} s)", o.detail, took.as_secs_f64(), l.as_secs());
            o.pass &= took <= l;
        }
        None => o.detail = format!("{}; {:.1} s", o.detail, took.as_secs_f64()),
    }
    o
}

fn secs(s: u64) -> Option<Duration> {
    Some(Duration::from_secs(s))
}

// Scenarios ------------------------------------------------------------------

const NOTCH: &str = "if(x < 0.3 && y > 0.45 && y < 0.55, 0.0, 1.0)";

fn pgrowth_config(p: f64, cells: usize, dt: f64, t_final: f64, pull: f64) -> SimConfig {
    SimConfig::from_toml_str(&format!(
        r#"
[model]
section = "two"
law = {{ kind = "p_growth", p = {p} }}
alpha = 1.0
eta = 1e-3
eps_pf = 0.1
[grid]
cells = [{cells}, {cells}]
dirichlet = ["bottom"]
[time]
dt = {dt}
t_final = {t_final}
[initial]
v0 = "{NOTCH}"
[boundary]
traction = ["0", "{pull} * t"]
[output]
vtk = false
"#
    ))
    .expect("scenario config")
}

fn limiting_config(a: f64, n: u32, cells: usize, dt: f64, t_final: f64, shear: f64) -> SimConfig {
    SimConfig::from_toml_str(&format!(
        r#"
[model]
section = "three"
law = {{ kind = "regularized_strain_limiting", a = {a}, n = {n} }}
alpha = 1.0
eta = 1e-3
eps_pf = 0.1
[grid]
cells = [{cells}, {cells}]
dirichlet = ["bottom"]
[time]
dt = {dt}
t_final = {t_final}
[initial]
v0 = "{NOTCH}"
[boundary]
traction = ["{shear} * t", "0"]
[output]
vtk = false
"#
    ))
    .expect("scenario config")
}

fn trajectory_run(cfg: &SimConfig) -> Result<SimOutput, String> {
    run_with(cfg, RunOptions { keep_trajectory: true }).map_err(|e| e.to_string())
}

fn run_all(cfgs: Vec<(String, SimConfig)>) -> Vec<(String, Result<SimOutput, String>)> {
    std::thread::scope(|s| {
        let handles: Vec<_> =
            cfgs.into_iter().map(|(name, cfg)| s.spawn(move || (name, trajectory_run(&cfg)))).collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    })
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

fn random_tensor(rng: &mut ChaCha8Rng, log_min: f64, log_max: f64) -> SymTensor {
    let d = rng.gen_range(2..=3);
    let c: Vec<f64> = (0..d * (d + 1) / 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let t = SymTensor::from_voigt(d, &c);
    let target = 10f64.powf(rng.gen_range(log_min..log_max));
    t.scale(target / t.norm().max(1e-300))
}

fn random_rotation(rng: &mut ChaCha8Rng, d: usize) -> [[f64; 3]; 3] {
    // Gram-Schmidt on a random matrix, then fix the orientation.
    let mut q = [[0.0; 3]; 3];
    let mut cols: Vec<[f64; 3]> = Vec::new();
    while cols.len() < d {
        let mut v = [0.0; 3];
        for x in v.iter_mut().take(d) {
            *x = rng.gen_range(-1.0..1.0);
        }
        for c in &cols {
            let p: f64 = (0..3).map(|i| v[i] * c[i]).sum();
            for i in 0..3 {
                v[i] -= p * c[i];
            }
        }
        let n = (0..3).map(|i| v[i] * v[i]).sum::<f64>().sqrt();
        if n > 1e-3 {
            cols.push([v[0] / n, v[1] / n, v[2] / n]);
        }
    }
    for (j, c) in cols.iter().enumerate() {
        for i in 0..3 {
            q[i][j] = c[i];
        }
    }
    let det = if d == 2 {
        q[0][0] * q[1][1] - q[0][1] * q[1][0]
    } else {
        q[0][0] * (q[1][1] * q[2][2] - q[1][2] * q[2][1]) - q[0][1] * (q[1][0] * q[2][2] - q[1][2] * q[2][0])
            + q[0][2] * (q[1][0] * q[2][1] - q[1][1] * q[2][0])
    };
    if det < 0.0 {
        for row in q.iter_mut() {
            row[0] = -row[0];
        }
    }
    q
}

fn laws() -> Vec<ConstitutiveLaw> {
    vec![
        ConstitutiveLaw::PGrowth { p: 1.5 },
        ConstitutiveLaw::PGrowth { p: 2.0 },
        ConstitutiveLaw::PGrowth { p: 3.0 },
        ConstitutiveLaw::StrainLimiting { a: 0.5 },
        ConstitutiveLaw::StrainLimiting { a: 1.0 },
        ConstitutiveLaw::StrainLimiting { a: 2.0 },
        ConstitutiveLaw::RegularizedStrainLimiting { a: 0.5, n: 10 },
        ConstitutiveLaw::RegularizedStrainLimiting { a: 1.0, n: 100 },
        ConstitutiveLaw::RegularizedStrainLimiting { a: 2.0, n: 1000 },
    ]
}

// Criteria -------------------------------------------------------------------

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut failures = Vec::new();
    let (mut worst_fenchel, mut worst_trip, mut worst_iso, mut worst_mono) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for law in laws() {
        let mut fail = |what: &str| failures.push(format!("{what} for {law:?}"));
        let limiting = law.is_strain_limiting();
        let n = match law {
            ConstitutiveLaw::RegularizedStrainLimiting { n, .. } => n as f64,
            _ => f64::INFINITY,
        };
        for _ in 0..1000 {
            let t = random_tensor(&mut rng, -3.0, 3.0);
            let s = {
                let mut s = random_tensor(&mut rng, -3.0, 3.0);
                while s.dim() != t.dim() {
                    s = random_tensor(&mut rng, -3.0, 3.0);
                }
                s
            };
            let ft = response(&law, &t).unwrap();
            let fs = response(&law, &s).unwrap();
            let mono = ft.sub(&fs).ddot(&t.sub(&s));
            worst_mono = worst_mono.min(mono);
            if mono < -1e-12 {
                fail("monotonicity");
            }
            let gap = (t.ddot(&ft) - potential(&law, &t).unwrap() - conjugate_potential(&law, &ft).unwrap()).abs();
            let rel = gap / (1.0 + t.norm().powi(2));
            worst_fenchel = worst_fenchel.max(rel);
            if rel > 1e-8 {
                fail("Fenchel identity");
            }
            let back = inverse_response(&law, &ft, 1e-12).unwrap();
            let trip = back.sub(&t).norm() / (1.0 + t.norm());
            worst_trip = worst_trip.max(trip);
            if trip > 1e-8 {
                fail("inverse round trip");
            }
            let q = random_rotation(&mut rng, t.dim());
            let iso = response(&law, &t.rotate(&q)).unwrap().sub(&ft.rotate(&q)).norm() / (1.0 + ft.norm());
            worst_iso = worst_iso.max(iso);
            if iso > 1e-12 {
                fail("isotropy");
            }
            if limiting {
                if ft.norm() > 1.0 + t.norm() / n + 1e-12 {
                    fail("boundedness");
                }
                if ft.ddot(&t) < 0.5 * t.norm() - 1.0 {
                    fail("coercivity");
                }
            }
        }
    }
    for a in [0.05, 0.5, 1.0, 2.0, 10.0] {
        let c = 2f64.powf(-1.0 + 1.0 / a);
        for i in 0..1000 {
            let y = if i == 0 { 0.0 } else { 10f64.powf(-8.0 + 14.0 * i as f64 / 999.0) };
            let mid = (1.0 + y.powf(a)).powf(1.0 / a);
            if c.min(1.0) * (1.0 + y) > mid * (1.0 + 1e-12) || mid > c.max(1.0) * (1.0 + y) * (1.0 + 1e-12) {
                failures.push(format!("bounds lemma at a={a}, y={y}"));
            }
        }
    }
    failures.dedup();
    outcome(
        failures.is_empty(),
        format!(
            "9 laws x 1000 samples; worst Fenchel gap {worst_fenchel:.1e}, round trip {worst_trip:.1e}, \
             isotropy {worst_iso:.1e}, min monotonicity pairing {worst_mono:.1e}{}",
            if failures.is_empty() { String::new() } else { format!("; failures: {}", failures.join(", ")) }
        ),
    )
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for law in laws() {
        for _ in 0..100 {
            let t = random_tensor(&mut rng, -1.0, 1.0);
            let exact = response_jacobian(&law, &t).unwrap().to_mandel();
            let fd = fd_jacobian(&law, &t, 1e-6 * (1.0 + t.norm())).unwrap().to_mandel();
            let scale = exact.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            worst = worst.max((&exact - &fd).iter().fold(0.0f64, |m, x| m.max(x.abs())) / scale);
        }
    }
    let mut largest_entry = 0.0f64;
    for law in laws().into_iter().filter(|l| matches!(l, ConstitutiveLaw::RegularizedStrainLimiting { .. })) {
        for _ in 0..1000 {
            let t = random_tensor(&mut rng, -4.0, 3.0);
            largest_entry = largest_entry.max(response_jacobian(&law, &t).unwrap().max_abs_entry());
        }
    }
    outcome(
        worst <= 1e-5 && largest_entry <= 3.0,
        format!("max relative deviation from finite differences {worst:.1e} (tol 1e-5); largest regularized entry {largest_entry:.4} (bound 3)"),
    )
}

fn criterion_3() -> (Outcome, Vec<Vec<State>>) {
    let cfg = pgrowth_config(2.0, 16, 0.01, 0.5, 2.0);
    let out = match trajectory_run(&cfg) {
        Ok(o) => o,
        Err(e) => return (outcome(false, format!("driver failed: {e}")), vec![]),
    };
    let grid = out.grid.clone();
    let (dt, alpha, eta) = (cfg.time.dt, cfg.model.alpha, cfg.model.eta);
    let traj = &out.trajectory;
    let u1 = VectorField::zeros(&grid);
    let mut prev2 = traj[0].u.linear_combination(1.0, &u1, -dt);
    let mut prev = traj[0].u.clone();
    let mut worst = 0.0f64;
    for m in 1..traj.len() {
        let load = assembled_load(&cfg, m as f64 * dt).unwrap();
        let u = linear_kv_step(&grid, &prev, &prev2, &traj[m - 1].v, eta, dt, alpha, &load).unwrap();
        worst = worst.max(max_abs_diff(&u.data, &traj[m].u.data));
        prev2 = std::mem::replace(&mut prev, u);
    }
    let damaged = traj.last().unwrap().v.values.iter().fold(1.0f64, |m, &x| m.min(x));
    (
        outcome(
            worst <= 1e-8 && traj.len() == 51,
            format!("50 steps on 16x16, max nodal difference {worst:.1e} (tol 1e-8), min v at end {damaged:.3}"),
        ),
        vec![out.trajectory],
    )
}

fn criterion_4() -> Outcome {
    let grid = Grid::unit(2, 6, &[Face::Left, Face::Bottom]).unwrap();
    let (mut worst, mut worst_kkt_ratio) = (0.0f64, 0.0f64);
    let mut box_ok = true;
    for section in [Section::Two, Section::Three] {
        let mut rng = ChaCha8Rng::seed_from_u64(40 + section as u64);
        for _ in 0..20 {
            let density = QuadratureField {
                values: (0..grid.n_cells())
                    .map(|_| rng.gen_range(0.0..20.0f64).powi(2) * rng.gen_range(0.0..1.0))
                    .collect(),
            };
            let on_d = grid.dirichlet_nodes();
            let v_prev = ScalarField {
                values: (0..grid.n_nodes()).map(|n| if on_d[n] { 1.0 } else { rng.gen_range(0.3..1.0) }).collect(),
            };
            let input = PhaseStepInput {
                grid: &grid,
                elastic_density: &density,
                v_prev: &v_prev,
                eps_pf: 0.2,
                dt: 0.05,
                section,
                k: 3,
                eta: 1e-3,
                alpha: 1.0,
                rate_term: section == Section::Three,
            };
            let v = phasefield_step(&input).unwrap();
            let brute = brute_phasefield(&input, &OracleConfig::default()).unwrap();
            worst = worst.max(max_abs_diff(&v.values, &brute.values));
            let kkt = kkt_residual(&input, &v).unwrap();
            let residual = (-kkt.min_directional_derivative).max(kkt.rate_pairing_residual.abs());
            worst_kkt_ratio = worst_kkt_ratio.max(residual / kkt.tolerance());
            if section == Section::Two {
                box_ok &= v.values.iter().all(|x| (0.0..=1.0).contains(x));
            }
        }
    }
    outcome(
        worst <= 1e-6 && worst_kkt_ratio <= 1.0 && box_ok,
        format!(
            "40 instances on 6x6, max difference to coordinate descent {worst:.1e} (tol 1e-6), \
             worst KKT residual / tolerance {worst_kkt_ratio:.2}, box bound {}",
            if box_ok { "held" } else { "violated" }
        ),
    )
}

fn criterion_5(trajectories: &[Vec<State>]) -> Outcome {
    let mut steps = 0;
    let mut violations = 0;
    for traj in trajectories {
        for w in traj.windows(2) {
            steps += 1;
            violations += w[1].v.values.iter().zip(&w[0].v.values).filter(|(a, b)| a > b).count();
        }
    }
    outcome(
        violations == 0 && steps > 0,
        format!("{} runs, {steps} steps checked, {violations} nodal increases", trajectories.len()),
    )
}

fn criterion_6() -> (Outcome, Vec<Vec<State>>) {
    let mut cfgs = Vec::new();
    for p in [1.5, 2.0, 3.0] {
        cfgs.push((format!("p={p}"), pgrowth_config(p, 16, 0.01, 1.0, 2.0)));
    }
    for a in [0.5, 1.0] {
        for n in [10, 100] {
            cfgs.push((format!("a={a},n={n}"), limiting_config(a, n, 16, 0.01, 1.0, 1.5)));
        }
    }
    let mut pass = true;
    let mut parts = Vec::new();
    let mut trajs = Vec::new();
    for (name, res) in run_all(cfgs) {
        match res {
            Ok(out) => {
                let rows = out.ledger.rows();
                let bad = rows.iter().skip(1).filter(|r| !r.within_budget()).count();
                let worst = rows.iter().skip(1).map(|r| r.inequality_residual / r.budget).fold(f64::MIN, f64::max);
                pass &= bad == 0 && rows.len() == 101;
                parts.push(format!("{name}: {bad} violations, max residual/budget {worst:.2}"));
                trajs.push(out.trajectory);
            }
            Err(e) => {
                pass = false;
                parts.push(format!("{name}: {e}"));
            }
        }
    }
    (outcome(pass, format!("16x16, 100 steps; {}", parts.join("; "))), trajs)
}

fn criterion_7() -> (Outcome, Vec<Vec<State>>) {
    let ns = [10u32, 100, 1000];
    let cfgs = ns.iter().map(|&n| (format!("n={n}"), limiting_config(1.0, n, 16, 0.01, 0.5, 3.0))).collect();
    let mut pass = true;
    let mut parts = Vec::new();
    let mut allowances = Vec::new();
    let mut trajs = Vec::new();
    for ((name, res), &n) in run_all(cfgs).into_iter().zip(&ns) {
        let out = match res {
            Ok(o) => o,
            Err(e) => {
                pass = false;
                parts.push(format!("{name}: {e}"));
                continue;
            }
        };
        let mut bound_ok = true;
        let mut allowance = 0.0f64;
        let mut excess = f64::NEG_INFINITY;
        for (s, t) in out.max_strain.iter().zip(&out.max_stress) {
            let limit = 1.0 + t / n as f64;
            bound_ok &= *s <= limit + 1e-10;
            allowance = allowance.max(t / n as f64);
            excess = excess.max(s - 1.0);
        }
        pass &= bound_ok;
        allowances.push(allowance);
        parts.push(format!(
            "{name}: bound {} , max|T|/n {allowance:.2e}, max strain - 1 = {excess:.2e}",
            if bound_ok { "held" } else { "violated" }
        ));
        trajs.push(out.trajectory);
    }
    let shrinking = allowances.len() == ns.len() && allowances.windows(2).all(|w| w[1] < w[0]);
    pass &= shrinking;
    (
        outcome(pass, format!("{}; allowance above 1 shrinks monotonically: {shrinking}", parts.join("; "))),
        trajs,
    )
}

fn criterion_8() -> Outcome {
    const BASE: &str = r#"
[model]
section = "three"
law = { kind = "regularized_strain_limiting", a = 1.0, n = 50 }
alpha = 1.0
eta = 1e-3
eps_pf = 0.1
[grid]
cells = [8, 8]
dirichlet = ["left"]
[time]
dt = 0.01
t_final = 0.1
"#;
    let with = |extra: &str| SimConfig::from_toml_str(&format!("{BASE}{extra}")).unwrap();
    let mut checks = Vec::new();

    let trivial = validate(&with("")).unwrap();
    checks.push(("zero data passes", trivial.passed() && trivial.safety_strain == 0.0));

    let unsafe_strain = validate(&with("[initial]\nu0 = [\"1.2 * x\", \"0\"]\n")).unwrap();
    checks.push(("safety strain 1.2 rejected", unsafe_strain.has(FindingKind::SafetyStrain)));

    let incompatible = validate(&with("[initial]\nu1 = [\"0.3 * x\", \"0\"]\n")).unwrap();
    checks.push(("incompatible traction rejected", incompatible.has(FindingKind::Compatibility)));

    // Compatible data: g(0) = b(v0) F^{-1}(e(u1 + alpha u0)) n on the right face.
    // Corner nodes are shared with the traction-free top and bottom faces, so
    // they carry half of the face value under nodal lumping.
    let law = ConstitutiveLaw::RegularizedStrainLimiting { a: 1.0, n: 50 };
    let stress = numeric_inverse(&law, &SymTensor::from_voigt(2, &[0.3, 0.0, 0.0])).unwrap();
    let traction = (1.0 + 1e-3) * stress.get(0, 0);
    let compatible = validate(&with(&format!(
        "[initial]\nu1 = [\"0.3 * x\", \"0\"]\n[boundary]\nramp = true\ntraction = [\"if(x > 0.999999, if(y < 0.000001 || y > 0.999999, {:.17e}, {:.17e}), 0.0)\", \"0\"]\n",
        0.5 * traction,
        traction
    )))
    .unwrap();
    checks.push(("constructed compatible data passes", compatible.passed()));

    let pass = checks.iter().all(|c| c.1);
    outcome(
        pass,
        checks.iter().map(|(n, ok)| format!("{n}: {}", if *ok { "yes" } else { "no" })).collect::<Vec<_>>().join("; "),
    )
}

fn criterion_9() -> (Outcome, Vec<Vec<State>>) {
    let delta = 0.0025;
    let t_final = 0.2;
    let cfgs = [4.0, 2.0, 1.0]
        .iter()
        .map(|k| (format!("dt={}", k * delta), pgrowth_config(2.0, 16, k * delta, t_final, 2.0)))
        .collect();
    let runs: Vec<_> = run_all(cfgs);
    let mut outs = Vec::new();
    for (name, r) in runs {
        match r {
            Ok(o) => outs.push(o),
            Err(e) => return (outcome(false, format!("{name}: {e}")), vec![]),
        }
    }
    // Compare on the coarse time levels.
    let diff = |fine: &SimOutput, coarse: &SimOutput, stride: usize| {
        let (mut du, mut dv) = (0.0f64, 0.0f64);
        for (m, c) in coarse.trajectory.iter().enumerate() {
            let f = &fine.trajectory[m * stride];
            du = du.max(max_abs_diff(&f.u.data, &c.u.data));
            dv = dv.max(max_abs_diff(&f.v.values, &c.v.values));
        }
        (du, dv)
    };
    let (du1, dv1) = diff(&outs[1], &outs[0], 2);
    let (du2, dv2) = diff(&outs[2], &outs[1], 2);
    let ratio_u = du2 / du1;
    let ratio_v = if dv1 > 0.0 { dv2 / dv1 } else { 0.0 };
    (
        outcome(
            ratio_u <= 0.75 && ratio_v <= 0.75,
            format!(
                "dt = 4d, 2d, d with d = {delta}: sup differences u {du1:.2e} -> {du2:.2e} (ratio {ratio_u:.3}), \
                 v {dv1:.2e} -> {dv2:.2e} (ratio {ratio_v:.3}), limit 0.75"
            ),
        ),
        outs.into_iter().map(|o| o.trajectory).collect(),
    )
}

fn criterion_10() -> Outcome {
    let csv = |cfg: &SimConfig| {
        let out = run_with(cfg, RunOptions::default()).expect("run");
        let mut bytes = Vec::new();
        out.ledger.write_csv(&mut bytes).expect("csv");
        bytes
    };
    let mut identical = true;
    for cfg in [pgrowth_config(3.0, 12, 0.01, 0.3, 2.0), limiting_config(1.0, 100, 12, 0.01, 0.3, 1.5)] {
        let first = csv(&cfg);
        let second = csv(&cfg);
        let threaded = std::thread::scope(|s| s.spawn(|| csv(&cfg)).join().unwrap());
        identical &= first == second && first == threaded && !first.is_empty();
    }
    outcome(identical, "two models, each run three times (one on a worker thread); ledgers byte-identical: ".to_string() + if identical { "yes" } else { "no" })
}

fn main() -> ExitCode {
    let start = Instant::now();
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut trajectories = Vec::new();

    results.push((1, "constitutive identities", timed(secs(5), criterion_1)));
    results.push((2, "Jacobian suite", timed(secs(5), criterion_2)));
    let t = Instant::now();
    let (mut o, tr) = criterion_3();
    let took = t.elapsed();
    o.detail = format!("{}; {:.1} s (limit 30 s)", o.detail, took.as_secs_f64());
    o.pass &= took <= Duration::from_secs(30);
    results.push((3, "linear cross-check", o));
    trajectories.extend(tr);
    results.push((4, "phase-field oracle equivalence", timed(secs(60), criterion_4)));

    let mut traj6 = Vec::new();
    results.push((6, "discrete energy inequality", timed(secs(300), || {
        let (o, tr) = criterion_6();
        traj6 = tr;
        o
    })));
    trajectories.extend(traj6);
    let mut traj7 = Vec::new();
    results.push((7, "strain-limiting property", timed(secs(300), || {
        let (o, tr) = criterion_7();
        traj7 = tr;
        o
    })));
    trajectories.extend(traj7);
    results.push((8, "validation gates", timed(None, criterion_8)));
    let mut traj9 = Vec::new();
    results.push((9, "self-convergence", timed(secs(120), || {
        let (o, tr) = criterion_9();
        traj9 = tr;
        o
    })));
    trajectories.extend(traj9);
    results.push((5, "irreversibility", timed(None, || criterion_5(&trajectories))));
    results.push((10, "determinism", timed(None, criterion_10)));

    results.sort_by_key(|r| r.0);
    let mut failed = 0;
    for (id, name, o) in &results {
        println!("criterion {id:>2} {} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    println!(
        "acceptance: {} of {} criteria passed in {:.1} s",
        results.len() - failed,
        results.len(),
        start.elapsed().as_secs_f64()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
