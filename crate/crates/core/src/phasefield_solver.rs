//! Constrained phase-field minimization for one staggered step.
//!
//! Given the elastic density `φ*(ε(αu_m))` per cell, the step minimizes
//!
//! ```text
//! J(v) = Σ_cells vol · b̄(v)/α · φ*  +  1/(4ε) Σ_n ω_n (1 − v_n)²  +  ε ∫|∇v|²
//!        [ + 1/(2 dt) (v − v_prev)ᵀ G_k (v − v_prev) ]
//! ```
//!
//! over nodal `v` with `v ≤ v_prev` and `v = 1` on Γ_D. Here `b̄` is the
//! cell mean of the nodal `b(v_n)`, `ω_n` are the lumped nodal weights and
//! `G_k` the discrete `H^k` Gram matrix (rate term, strain-limiting model
//! only). `J` is convex and piecewise quadratic; the minimizer is unique.

use thiserror::Error;

use crate::constitutive::{DegradationSpec, Section};
use crate::field_ops::{hk_gram, laplacian_stiffness, FieldError, Grid, QuadratureField, ScalarField};
use crate::linalg::{BandedCholesky, CsrMatrix, LinalgError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PhaseError {
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error("linear solve failed: {0}")]
    Linear(#[from] LinalgError),
    #[error("invalid phase-field input: {0}")]
    InvalidInput(String),
    #[error("phase-field solver did not reach KKT tolerance: {report:?}")]
    NotConverged { report: KktReport },
}

pub type Result<T> = std::result::Result<T, PhaseError>;

/// Data of one phase-field step.
#[derive(Debug, Clone)]
pub struct PhaseStepInput<'a> {
    pub grid: &'a Grid,
    /// `φ*(ε(αu_m))` per cell.
    pub elastic_density: &'a QuadratureField<f64>,
    pub v_prev: &'a ScalarField,
    pub eps_pf: f64,
    pub dt: f64,
    pub section: Section,
    /// Order of the rate penalty (strain-limiting model only).
    pub k: usize,
    pub eta: f64,
    pub alpha: f64,
    /// Include the rate penalty `1/(2dt) G_k`. On for every strain-limiting
    /// step, off for the p-growth model and its initial minimization.
    pub rate_term: bool,
}

impl PhaseStepInput<'_> {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PhaseError::InvalidInput(m.into()));
        if !(self.eps_pf > 0.0) {
            return bad("eps_pf must be positive");
        }
        if !(self.eta > 0.0) || !(self.alpha > 0.0) {
            return bad("eta and alpha must be positive");
        }
        if self.rate_term && !(self.dt > 0.0) {
            return bad("dt must be positive");
        }
        if self.elastic_density.len() != self.grid.n_cells() || self.v_prev.len() != self.grid.n_nodes() {
            return bad("fields do not match the grid");
        }
        if self.elastic_density.values.iter().any(|&e| !(e >= 0.0) || !e.is_finite()) {
            return bad("elastic density must be finite and nonnegative");
        }
        Ok(())
    }

    pub fn degradation(&self) -> DegradationSpec {
        DegradationSpec::new(self.section, self.eta)
    }
}

/// Diagnostics of the first-order optimality conditions at `v_m`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktReport {
    /// Smallest directional derivative `J'(v_m)(χ)` over the nodal feasible
    /// directions: `χ = −e_n` at every free node, `χ = +e_n` at inactive ones.
    pub min_directional_derivative: f64,
    /// `J'(v_m)((v_m − v_prev)/dt)`; vanishes at the minimizer.
    pub rate_pairing_residual: f64,
    /// `max_n (v_m − v_prev)` over free nodes.
    pub max_constraint_violation: f64,
    pub active_set_size: usize,
    /// `J(v_m)`, for scale-aware tolerances.
    pub objective: f64,
    /// `max_n Σ_m |∂²J/∂v_n∂v_m| |v_m|` plus the magnitudes of the remaining
    /// gradient terms. Storing `v` rounds it by `ε_mach |v|`, so this bounds
    /// how precisely `J'(v_m)` can be known at all.
    pub gradient_scale: f64,
}

impl KktReport {
    /// Acceptance tolerance `1e-8 (1 + |J|) + 4 ε_mach · gradient_scale`.
    pub fn tolerance(&self) -> f64 {
        1e-8 * (1.0 + self.objective.abs()) + 4.0 * f64::EPSILON * self.gradient_scale
    }

    pub fn is_optimal(&self) -> bool {
        let tol = self.tolerance();
        self.min_directional_derivative >= -tol
            && self.rate_pairing_residual.abs() <= tol
            && self.max_constraint_violation <= 0.0
    }
}

/// Grid-dependent operators, built once and reused across steps.
#[derive(Debug, Clone)]
pub struct PhaseOperators {
    grid: Grid,
    weights: Vec<f64>,
    laplacian: CsrMatrix,
    gram: Option<(usize, CsrMatrix)>,
    free: Vec<bool>,
}

impl PhaseOperators {
    pub fn new(grid: &Grid, rate_order: Option<usize>) -> Result<Self> {
        let gram = match rate_order {
            Some(k) => Some((k, hk_gram(grid, k)?)),
            None => None,
        };
        Ok(PhaseOperators {
            grid: grid.clone(),
            weights: grid.nodal_weights(),
            laplacian: laplacian_stiffness(grid),
            gram,
            free: grid.dirichlet_nodes().iter().map(|d| !d).collect(),
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn free_nodes(&self) -> &[bool] {
        &self.free
    }

    /// `H(v) = 1/(4ε) Σ ω_n (1 − v_n)² + ε vᵀ L v`.
    pub fn surface_energy(&self, eps_pf: f64, v: &ScalarField) -> f64 {
        let bulk: f64 = self.weights.iter().zip(&v.values).map(|(w, x)| w * (1.0 - x) * (1.0 - x)).sum();
        bulk / (4.0 * eps_pf) + eps_pf * self.laplacian.zero_sum_form(&v.values)
    }

    /// `(v, w)_{k,2}` through the cached Gram matrix.
    pub fn rate_inner(&self, v: &[f64], w: &[f64]) -> Option<f64> {
        self.gram.as_ref().map(|(_, g)| g.bilinear(v, w))
    }

    fn gram_for(&self, k: usize) -> Result<&CsrMatrix> {
        match &self.gram {
            Some((order, g)) if *order == k => Ok(g),
            _ => Err(PhaseError::InvalidInput(format!("operators were built without an order-{k} rate term"))),
        }
    }
}

/// The objective `J`, stored in deviation form so that values and gradients
/// near `v ≡ 1` and `v ≈ v_prev` do not suffer cancellation.
#[derive(Debug, Clone)]
pub struct PhaseObjective {
    /// `ω_n / (4ε)`.
    bulk: Vec<f64>,
    /// `ε L`.
    gradient_term: CsrMatrix,
    /// `G_k / (2 dt)`.
    rate: Option<CsrMatrix>,
    /// `c_n = Σ_{cells ∋ n} vol φ*_c / (α · nodes per cell)`.
    coupling: Vec<f64>,
    degradation: DegradationSpec,
    upper: Vec<f64>,
    free: Vec<bool>,
}

impl PhaseObjective {
    pub fn new(ops: &PhaseOperators, input: &PhaseStepInput) -> Result<Self> {
        input.validate()?;
        let grid = input.grid;
        if grid != &ops.grid {
            return Err(PhaseError::InvalidInput("operators were built for a different grid".into()));
        }
        let eps = input.eps_pf;
        let mut coupling = vec![0.0; grid.n_nodes()];
        let vol = grid.cell_volume();
        for (c, phi) in input.elastic_density.values.iter().enumerate() {
            let nodes = grid.cell_nodes(c);
            let share = vol * phi / (input.alpha * nodes.len() as f64);
            for m in nodes {
                coupling[m] += share;
            }
        }
        let rate = if input.rate_term {
            Some(ops.gram_for(input.k)?.scaled(0.5 / input.dt))
        } else {
            None
        };
        Ok(PhaseObjective {
            bulk: ops.weights.iter().map(|w| w / (4.0 * eps)).collect(),
            gradient_term: ops.laplacian.scaled(eps),
            rate,
            coupling,
            degradation: input.degradation(),
            upper: input.v_prev.values.clone(),
            free: ops.free.clone(),
        })
    }

    /// Multiplies the whole objective by `s > 0`.
    pub fn scaled(&self, s: f64) -> PhaseObjective {
        let mut out = self.clone();
        out.bulk.iter_mut().for_each(|x| *x *= s);
        out.gradient_term = out.gradient_term.scaled(s);
        out.rate = out.rate.map(|r| r.scaled(s));
        out.coupling.iter_mut().for_each(|x| *x *= s);
        out
    }

    fn increment(&self, v: &[f64]) -> Vec<f64> {
        v.iter().zip(&self.upper).map(|(a, b)| a - b).collect()
    }

    pub fn value(&self, v: &[f64]) -> f64 {
        let b: f64 = self.coupling.iter().zip(v).map(|(c, &x)| c * self.degradation.eval(x).0).sum();
        let bulk: f64 = self.bulk.iter().zip(v).map(|(w, x)| w * (1.0 - x) * (1.0 - x)).sum();
        let mut j = b + bulk + self.gradient_term.bilinear(v, v);
        if let Some(r) = &self.rate {
            let dv = self.increment(v);
            j += r.bilinear(&dv, &dv);
        }
        j
    }

    /// Gradient of the quadratic model whose curvature set is taken from `pattern`.
    fn model_gradient(&self, v: &[f64], pattern: &[f64]) -> Vec<f64> {
        let mut g = self.gradient_term.mul_vec(v);
        if let Some(r) = &self.rate {
            let rv = r.mul_vec(&self.increment(v));
            g.iter_mut().zip(&rv).for_each(|(a, b)| *a += b);
        }
        for i in 0..g.len() {
            g[i] *= 2.0;
            g[i] -= 2.0 * self.bulk[i] * (1.0 - v[i]);
            if self.degradation.is_curved(pattern[i]) {
                g[i] += 2.0 * self.coupling[i] * v[i];
            }
        }
        g
    }

    pub fn gradient(&self, v: &[f64]) -> Vec<f64> {
        let mut g = self.model_gradient(v, v);
        for i in 0..g.len() {
            if !self.degradation.is_curved(v[i]) {
                g[i] += self.coupling[i] * self.degradation.eval(v[i]).1;
            }
        }
        g
    }

    fn hessian(&self, v: &[f64]) -> CsrMatrix {
        let d: Vec<f64> = (0..v.len())
            .map(|i| 2.0 * self.bulk[i] + if self.degradation.is_curved(v[i]) { 2.0 * self.coupling[i] } else { 0.0 })
            .collect();
        let mut h = self.gradient_term.scaled(2.0).add_diagonal(&d);
        if let Some(r) = &self.rate {
            h = h.add_scaled(r, 2.0);
        }
        h
    }

    pub fn upper_bound(&self) -> &[f64] {
        &self.upper
    }

    pub fn free_nodes(&self) -> &[bool] {
        &self.free
    }

    fn feasible_start(&self) -> Vec<f64> {
        self.upper.clone()
    }

    /// Minimizes the quadratic model with the curvature pattern of `pattern`
    /// subject to `v = v_fixed` on `fixed`. Works on increments with a few
    /// rounds of iterative refinement to keep the reduced gradient at roundoff.
    fn solve_reduced(&self, pattern: &[f64], fixed: &[bool], v_fixed: &[f64]) -> Result<Vec<f64>> {
        let h = self.hessian(pattern);
        let mask: Vec<bool> = (0..v_fixed.len()).map(|i| self.free[i] && !fixed[i]).collect();
        let chol = BandedCholesky::factor(&h, &mask)?;
        let mut x: Vec<f64> = (0..v_fixed.len()).map(|i| if mask[i] { pattern[i] } else { v_fixed[i] }).collect();
        for _ in 0..3 {
            let rhs: Vec<f64> = self.model_gradient(&x, pattern).iter().map(|g| -g).collect();
            let d = chol.solve(&rhs);
            let mut change = 0.0f64;
            for i in (0..x.len()).filter(|&i| mask[i]) {
                x[i] += d[i];
                change = change.max(d[i].abs());
            }
            if change <= 1e-15 * (1.0 + crate::linalg::norm_inf(&x)) {
                break;
            }
        }
        Ok(x)
    }

    fn gradient_scale(&self, v: &[f64]) -> f64 {
        let abs_row = |m: &CsrMatrix, x: &[f64], i: usize| m.row(i).map(|(j, a)| (a * x[j]).abs()).sum::<f64>();
        (0..v.len())
            .filter(|&i| self.free[i])
            .map(|i| {
                let (b, db) = self.degradation.eval(v[i]);
                let rate = self.rate.as_ref().map_or(0.0, |r| abs_row(r, v, i));
                2.0 * (abs_row(&self.gradient_term, v, i) + rate + self.bulk[i] * (1.0 - v[i]).abs())
                    + self.coupling[i] * db.abs().max(b)
            })
            .fold(0.0, f64::max)
    }

    /// KKT diagnostics of a feasible point.
    pub fn kkt(&self, v: &[f64], dt: f64) -> KktReport {
        let g = self.gradient(v);
        let mut min_dd = f64::INFINITY;
        let mut pairing = 0.0;
        let mut violation = f64::NEG_INFINITY;
        let mut active = 0;
        for i in (0..v.len()).filter(|&i| self.free[i]) {
            min_dd = min_dd.min(-g[i]);
            let slack = self.upper[i] - v[i];
            if slack <= 4.0 * f64::EPSILON * self.upper[i].abs().max(1.0) {
                active += 1;
            } else {
                min_dd = min_dd.min(g[i]);
            }
            pairing += g[i] * (v[i] - self.upper[i]) / dt;
            violation = violation.max(v[i] - self.upper[i]);
        }
        if !min_dd.is_finite() {
            min_dd = 0.0;
        }
        let gradient_scale = self.gradient_scale(v);
        KktReport {
            gradient_scale,
            min_directional_derivative: min_dd,
            rate_pairing_residual: pairing,
            max_constraint_violation: if violation.is_finite() { violation } else { 0.0 },
            active_set_size: active,
            objective: self.value(v),
        }
    }
}

/// Solver outcome with diagnostics.
#[derive(Debug, Clone)]
pub struct PhaseSolution {
    pub v: ScalarField,
    pub kkt: KktReport,
    pub iterations: usize,
    pub used_fallback: bool,
}

const PDAS_MAX_ITERS: usize = 60;

/// Primal-dual active set on the constraint `v ≤ ψ` combined with the
/// curvature set `{v > 0}` of the strain-limiting degradation.
fn primal_dual_active_set(obj: &PhaseObjective, start: Vec<f64>) -> Result<Option<(Vec<f64>, usize)>> {
    let n = start.len();
    let mut v = start;
    let mut prev_sets: Option<(Vec<bool>, Vec<bool>)> = None;
    for it in 1..=PDAS_MAX_ITERS {
        let g = obj.gradient(&v);
        // The complementarity constant is the Hessian diagonal, so that the
        // multiplier and the slack are compared in the same units.
        let c = obj.hessian(&v).diagonal();
        let active: Vec<bool> = (0..n)
            .map(|i| {
                if !obj.free[i] {
                    return false;
                }
                let lambda = -g[i];
                let slack = v[i] - obj.upper[i];
                // Ties within a few ulps of the bound stay active when the multiplier is nonnegative.
                lambda + c[i] * slack > 0.0 || (slack.abs() <= 4.0 * f64::EPSILON * obj.upper[i].abs().max(1.0) && lambda >= 0.0)
            })
            .collect();
        let curved: Vec<bool> = v.iter().map(|&x| obj.degradation.is_curved(x)).collect();
        if prev_sets.as_ref() == Some(&(active.clone(), curved.clone())) {
            return Ok(Some((v, it)));
        }
        let fixed_values: Vec<f64> = (0..n)
            .map(|i| if !obj.free[i] { v[i] } else if active[i] { obj.upper[i] } else { 0.0 })
            .collect();
        let fixed: Vec<bool> = (0..n).map(|i| !obj.free[i] || active[i]).collect();
        v = obj.solve_reduced(&v, &fixed, &fixed_values)?;
        prev_sets = Some((active, curved));
    }
    Ok(None)
}

/// Projected Newton (Bertsekas) with an Armijo rule along the projection arc.
fn projected_newton(obj: &PhaseObjective, start: Vec<f64>, tol: f64) -> Result<(Vec<f64>, usize)> {
    let n = start.len();
    let project = |x: &mut [f64]| {
        for i in 0..n {
            if obj.free[i] && x[i] > obj.upper[i] {
                x[i] = obj.upper[i];
            }
        }
    };
    let mut v = start;
    project(&mut v);
    let mut iters = 0;
    for _ in 0..500 {
        iters += 1;
        let g = obj.gradient(&v);
        let h = obj.hessian(&v);
        let diag = h.diagonal();
        // Diagonally scaled projected step, measured in units of v.
        let pg: f64 = (0..n)
            .filter(|&i| obj.free[i])
            .map(|i| (v[i] - (v[i] - g[i] / diag[i]).min(obj.upper[i])).abs())
            .fold(0.0, f64::max);
        let pg_raw: f64 = (0..n)
            .filter(|&i| obj.free[i])
            .map(|i| if obj.upper[i] - v[i] > 0.0 { g[i].abs() } else { (-g[i]).max(0.0) })
            .fold(0.0, f64::max);
        if pg_raw <= tol {
            break;
        }
        let eps_k = pg.min(1e-3);
        let binding: Vec<bool> = (0..n)
            .map(|i| !obj.free[i] || (obj.upper[i] - v[i] <= eps_k && g[i] < 0.0))
            .collect();
        let mask: Vec<bool> = binding.iter().map(|b| !b).collect();
        let rhs: Vec<f64> = g.iter().map(|x| -x).collect();
        let mut d = BandedCholesky::factor(&h, &mask)?.solve(&rhs);
        for i in 0..n {
            if obj.free[i] && binding[i] {
                d[i] = -g[i] / diag[i];
            }
        }
        let j0 = obj.value(&v);
        let mut t = 1.0;
        let mut next = v.clone();
        for _ in 0..60 {
            next = (0..n).map(|i| if obj.free[i] { v[i] + t * d[i] } else { v[i] }).collect();
            project(&mut next);
            let decrease: f64 = (0..n)
                .filter(|&i| obj.free[i])
                .map(|i| if binding[i] { g[i] * (v[i] - next[i]) } else { -t * g[i] * d[i] })
                .sum();
            if j0 - obj.value(&next) >= 1e-4 * decrease {
                break;
            }
            t *= 0.5;
        }
        v = next;
    }
    Ok((v, iters))
}

/// Minimizes `obj` subject to the bound; returns the clamped minimizer.
pub fn solve_objective(obj: &PhaseObjective, dt: f64) -> Result<PhaseSolution> {
    let start = obj.feasible_start();
    let finish = |mut v: Vec<f64>, iterations: usize, used_fallback: bool| {
        for i in 0..v.len() {
            if obj.free[i] && v[i] > obj.upper[i] {
                v[i] = obj.upper[i];
            }
        }
        let kkt = obj.kkt(&v, dt);
        (PhaseSolution { v: ScalarField { values: v }, kkt, iterations, used_fallback }, kkt.is_optimal())
    };
    if let Some((v, it)) = primal_dual_active_set(obj, start.clone())? {
        let (sol, ok) = finish(v, it, false);
        if ok {
            return Ok(sol);
        }
    }
    let scale = 1.0 + obj.value(&start).abs();
    let (v, it) = projected_newton(obj, start, 1e-14 * scale)?;
    // Polish on the identified sets.
    let (v, extra) = match primal_dual_active_set(obj, v.clone())? {
        Some((w, k)) => (w, k),
        None => (v, 0),
    };
    let (sol, ok) = finish(v, it + extra, true);
    if ok {
        Ok(sol)
    } else {
        Err(PhaseError::NotConverged { report: sol.kkt })
    }
}

/// Solves one phase-field step with cached operators.
pub fn phasefield_step_with(ops: &PhaseOperators, input: &PhaseStepInput) -> Result<PhaseSolution> {
    let obj = PhaseObjective::new(ops, input)?;
    solve_objective(&obj, input.dt)
}

/// Solves one phase-field step.
pub fn phasefield_step(input: &PhaseStepInput) -> Result<ScalarField> {
    let ops = PhaseOperators::new(input.grid, input.rate_term.then_some(input.k))?;
    Ok(phasefield_step_with(&ops, input)?.v)
}

/// Optimality diagnostics of `v_m` for the step described by `input`.
pub fn kkt_residual(input: &PhaseStepInput, v_m: &ScalarField) -> Result<KktReport> {
    let ops = PhaseOperators::new(input.grid, input.rate_term.then_some(input.k))?;
    let obj = PhaseObjective::new(&ops, input)?;
    Ok(obj.kkt(&v_m.values, if input.rate_term { input.dt } else { input.dt.max(f64::MIN_POSITIVE) }))
}
