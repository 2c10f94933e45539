//! One implicit step of the nonlinear elastodynamic equation
//!
//! ```text
//! M δ²u_m + Σ_cells vol · b(v_{m-1}) F⁻¹(ε(δu_m + αu_m)) : ε(w) = ⟨l_m, w⟩
//! ```
//!
//! solved for `u_m` by Newton's method. The step equation is the stationarity
//! condition of a convex potential `Π`, and `R(u)·d` is the directional
//! derivative of `Π`. Globalization is either halving on `‖R‖₂` or a
//! bracketing search for a root of `R(u + t d)·d` along the Newton direction.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constitutive::{
    inverse_response, response_jacobian_mollified, sym_len, ConstitutiveError, ConstitutiveLaw,
    DegradationSpec, SymTensor,
};
use crate::field_ops::{
    cell_degradation, cell_dofs, internal_force, mandel_strain_matrix, sym_gradient, FieldError, Grid,
    QuadratureField, ScalarField, VectorField,
};
use crate::linalg::{norm2, solve_spd, CsrMatrix, LinalgError, LinearSolver};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MomentumError {
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error("cell {cell}: {source}")]
    Constitutive { cell: usize, source: ConstitutiveError },
    #[error("strain bound violated in cell {cell}: |ε(δu+αu)| = {norm}")]
    StrainBound { cell: usize, norm: f64 },
    #[error("linear solve failed: {0}")]
    Linear(#[from] LinalgError),
    #[error("Newton did not converge in {iters} iterations (best residual {best_residual:e})")]
    Diverged {
        iters: usize,
        best_residual: f64,
        best: Box<VectorField>,
        history: Vec<f64>,
    },
    #[error("invalid step input: {0}")]
    InvalidInput(String),
}

pub type Result<T> = std::result::Result<T, MomentumError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LineSearch {
    None,
    /// Halving on `‖R‖₂`, at most 20 cuts.
    #[default]
    Backtracking,
    /// Bracketing search for `R(u + t d)·d = 0` with expansion beyond `t = 1`.
    Directional,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NewtonConfig {
    pub max_iters: usize,
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub line_search: LineSearch,
    pub linear_solver: LinearSolver,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        NewtonConfig {
            max_iters: 50,
            abs_tol: 1e-10,
            rel_tol: 1e-10,
            line_search: LineSearch::Backtracking,
            linear_solver: LinearSolver::Direct,
        }
    }
}

/// Data of one momentum step.
#[derive(Debug, Clone)]
pub struct MomentumStepInput<'a> {
    pub grid: &'a Grid,
    pub u_prev: &'a VectorField,
    pub u_prev2: &'a VectorField,
    pub v_prev: &'a ScalarField,
    pub degradation: DegradationSpec,
    pub dt: f64,
    pub law: ConstitutiveLaw,
    pub alpha: f64,
    /// Body force plus Neumann traction at `t_m`, already lumped.
    pub load: &'a VectorField,
}

impl MomentumStepInput<'_> {
    fn validate(&self) -> Result<()> {
        let n = self.grid.n_dofs();
        if !(self.dt > 0.0) || !(self.alpha > 0.0) {
            return Err(MomentumError::InvalidInput("dt and alpha must be positive".into()));
        }
        for (name, len) in [
            ("u_prev", self.u_prev.len()),
            ("u_prev2", self.u_prev2.len()),
            ("load", self.load.len()),
        ] {
            if len != n {
                return Err(MomentumError::InvalidInput(format!("{name} has {len} entries, expected {n}")));
            }
        }
        if self.v_prev.len() != self.grid.n_nodes() {
            return Err(MomentumError::InvalidInput("v_prev does not match the grid".into()));
        }
        Ok(())
    }

    /// `ε(δu + αu)` per cell for a trial `u`.
    pub fn driving_strain(&self, u: &VectorField) -> Result<QuadratureField<SymTensor>> {
        let c = 1.0 / self.dt + self.alpha;
        let w = u.linear_combination(c, self.u_prev, -1.0 / self.dt);
        Ok(sym_gradient(self.grid, &w)?)
    }
}

/// Result of a converged step.
#[derive(Debug, Clone)]
pub struct MomentumStep {
    pub u: VectorField,
    /// `T = F⁻¹(ε(δu + αu))` per cell.
    pub stress: QuadratureField<SymTensor>,
    pub iters: usize,
    pub final_residual_norm: f64,
    pub residual_history: Vec<f64>,
    /// `max_cells |ε(δu + αu)|`.
    pub max_strain_norm: f64,
}

struct Evaluation {
    residual: Vec<f64>,
    stress: Vec<SymTensor>,
    strain: Vec<SymTensor>,
}

fn evaluate(input: &MomentumStepInput, b_cells: &[f64], u: &VectorField) -> Result<Evaluation> {
    let grid = input.grid;
    let strain = input.driving_strain(u)?.values;
    let mut stress = Vec::with_capacity(strain.len());
    let mut weighted = Vec::with_capacity(strain.len());
    for (cell, e) in strain.iter().enumerate() {
        let t = inverse_response(&input.law, e, 1e-12).map_err(|source| match source {
            ConstitutiveError::StrainBoundViolated { norm } => MomentumError::StrainBound { cell, norm },
            source => MomentumError::Constitutive { cell, source },
        })?;
        weighted.push(t.scale(b_cells[cell]));
        stress.push(t);
    }
    let force = internal_force(grid, &QuadratureField { values: weighted })?;
    let mass = grid.nodal_weights();
    let d = grid.dim();
    let free = grid.free_dofs();
    let inv_dt2 = 1.0 / (input.dt * input.dt);
    let residual = (0..grid.n_dofs())
        .map(|k| {
            if !free[k] {
                return 0.0;
            }
            let accel = (u.data[k] - 2.0 * input.u_prev.data[k] + input.u_prev2.data[k]) * inv_dt2;
            mass[k / d] * accel + force.data[k] - input.load.data[k]
        })
        .collect();
    Ok(Evaluation { residual, stress, strain })
}

/// `R(u)`; Γ_D rows are zero.
pub fn momentum_residual(input: &MomentumStepInput, u: &VectorField) -> Result<VectorField> {
    input.validate()?;
    let b = cell_degradation(input.grid, &input.degradation, input.v_prev);
    let eval = evaluate(input, &b, u)?;
    Ok(VectorField::from_vec(input.grid, eval.residual)?)
}

/// Tangent `∂R/∂u`; the constitutive part uses the mollified Jacobian.
fn tangent(input: &MomentumStepInput, b_cells: &[f64], stress: &[SymTensor]) -> Result<CsrMatrix> {
    let grid = input.grid;
    let d = grid.dim();
    let m = sym_len(d);
    let bmat = mandel_strain_matrix(grid);
    let n_local = bmat[0].len();
    let vol = grid.cell_volume();
    let c = 1.0 / input.dt + input.alpha;
    let scale = stress.iter().fold(1.0_f64, |s, t| s.max(t.norm()));
    let mu = 1e-8 * scale;
    let mut trip = Vec::with_capacity(grid.n_cells() * n_local * n_local + grid.n_dofs());
    for (cell, t) in stress.iter().enumerate() {
        let jac = response_jacobian_mollified(&input.law, t, mu)
            .map_err(|source| MomentumError::Constitutive { cell, source })?
            .to_mandel();
        let compliance_inv: DMatrix<f64> = jac
            .try_inverse()
            .ok_or(MomentumError::Constitutive { cell, source: ConstitutiveError::SingularJacobian { p: f64::NAN } })?;
        let w = vol * b_cells[cell] * c;
        let dofs = cell_dofs(grid, cell);
        // K_e = w · Bᵀ C B
        let mut cb = vec![vec![0.0; n_local]; m];
        for i in 0..m {
            for q in 0..n_local {
                cb[i][q] = (0..m).map(|j| compliance_inv[(i, j)] * bmat[j][q]).sum();
            }
        }
        for p in 0..n_local {
            for q in 0..n_local {
                let v: f64 = (0..m).map(|i| bmat[i][p] * cb[i][q]).sum();
                trip.push((dofs[p], dofs[q], w * v));
            }
        }
    }
    let mass = grid.nodal_weights();
    let inv_dt2 = 1.0 / (input.dt * input.dt);
    for k in 0..grid.n_dofs() {
        trip.push((k, k, mass[k / d] * inv_dt2));
    }
    Ok(CsrMatrix::from_triplets(grid.n_dofs(), &trip))
}

type Trial = (VectorField, Evaluation, f64);

fn trial_point(grid: &Grid, u: &VectorField, step: &[f64], t: f64) -> Result<VectorField> {
    Ok(VectorField::from_vec(grid, u.data.iter().zip(step).map(|(a, s)| a + t * s).collect())?)
}

fn backtracking_search(
    input: &MomentumStepInput,
    b_cells: &[f64],
    u: &VectorField,
    step: &[f64],
    rnorm: f64,
    mode: LineSearch,
) -> Result<Trial> {
    let max_cuts = if mode == LineSearch::Backtracking { 20 } else { 0 };
    let mut t = 1.0;
    for cut in 0..=max_cuts {
        let trial = trial_point(input.grid, u, step, t)?;
        match evaluate(input, b_cells, &trial) {
            Ok(e) => {
                let n = norm2(&e.residual);
                if n < rnorm || cut == max_cuts {
                    return Ok((trial, e, n));
                }
            }
            Err(MomentumError::StrainBound { .. }) if cut < max_cuts => {}
            Err(e) => return Err(e),
        }
        t *= 0.5;
    }
    unreachable!("the last cut is always accepted")
}

/// Finds `t` with `|R(u + t d)·d| ≤ ½ |R(u)·d|`. Along the line the
/// directional derivative is nondecreasing, so bracketing is safe; trials
/// outside the strain bound count as overshoot.
fn directional_search(
    input: &MomentumStepInput,
    b_cells: &[f64],
    u: &VectorField,
    step: &[f64],
    residual: &[f64],
) -> Result<Trial> {
    let slope0 = crate::linalg::dot(residual, step);
    let target = 0.5 * slope0.abs();
    let probe = |t: f64| -> Result<Option<(Trial, f64)>> {
        let trial = trial_point(input.grid, u, step, t)?;
        match evaluate(input, b_cells, &trial) {
            Ok(e) => {
                let slope = crate::linalg::dot(&e.residual, step);
                let n = norm2(&e.residual);
                Ok(Some(((trial, e, n), slope)))
            }
            Err(MomentumError::StrainBound { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    };
    if !(slope0 < 0.0) {
        // Not a descent direction (roundoff at convergence): take the full step.
        if let Some((trial, _)) = probe(1.0)? {
            return Ok(trial);
        }
    }
    let (mut lo, mut lo_slope) = (0.0, slope0);
    let mut hi: Option<(f64, f64)> = None;
    let mut t = 1.0;
    let mut best: Option<(Trial, f64)> = None;
    for _ in 0..60 {
        match probe(t)? {
            Some((trial, slope)) => {
                if slope.abs() <= target {
                    return Ok(trial);
                }
                if slope < 0.0 {
                    lo = t;
                    lo_slope = slope;
                    best = Some((trial, slope));
                } else {
                    hi = Some((t, slope));
                }
            }
            None => hi = Some((t, f64::INFINITY)),
        }
        t = match hi {
            None => t * 4.0,
            Some((h, hs)) if hs.is_finite() => {
                // Secant step, kept inside the middle of the bracket.
                let s = lo + (h - lo) * (-lo_slope) / (hs - lo_slope);
                s.clamp(lo + 0.1 * (h - lo), h - 0.1 * (h - lo))
            }
            Some((h, _)) => 0.5 * (lo + h),
        };
    }
    match best {
        Some((trial, _)) => Ok(trial),
        None => Err(MomentumError::InvalidInput("line search found no admissible step".into())),
    }
}

/// Solves the step from the predictor `u_prev + dt·δu_prev`.
pub fn momentum_step(input: &MomentumStepInput, cfg: &NewtonConfig) -> Result<MomentumStep> {
    let guess = input.u_prev.linear_combination(2.0, input.u_prev2, -1.0);
    momentum_step_from(input, cfg, guess)
}

/// Solves the step from an explicit initial guess.
pub fn momentum_step_from(
    input: &MomentumStepInput,
    cfg: &NewtonConfig,
    initial: VectorField,
) -> Result<MomentumStep> {
    input.validate()?;
    let grid = input.grid;
    let free = grid.free_dofs();
    let b_cells = cell_degradation(grid, &input.degradation, input.v_prev);
    let tol = cfg.abs_tol + cfg.rel_tol * norm2(&input.load.data);

    let mut u = initial;
    u.zero_dirichlet(grid);
    let mut eval = match evaluate(input, &b_cells, &u) {
        Ok(e) => e,
        // An infeasible predictor for the unregularized law: restart from u_prev.
        Err(MomentumError::StrainBound { .. }) => {
            u = input.u_prev.clone();
            evaluate(input, &b_cells, &u)?
        }
        Err(e) => return Err(e),
    };
    let mut rnorm = norm2(&eval.residual);
    let mut history = vec![rnorm];
    let mut best = (rnorm, u.clone());

    let mut iters = 0;
    while rnorm > tol {
        if iters == cfg.max_iters {
            return Err(MomentumError::Diverged {
                iters,
                best_residual: best.0,
                best: Box::new(best.1),
                history,
            });
        }
        iters += 1;
        let jac = tangent(input, &b_cells, &eval.stress)?;
        let rhs: Vec<f64> = eval.residual.iter().map(|r| -r).collect();
        let step = solve_spd(cfg.linear_solver, &jac, &free, &rhs)?;

        let accepted = match cfg.line_search {
            LineSearch::Directional => directional_search(input, &b_cells, &u, &step, &eval.residual)?,
            _ => backtracking_search(input, &b_cells, &u, &step, rnorm, cfg.line_search)?,
        };
        let (next, next_eval, next_norm) = accepted;
        u = next;
        eval = next_eval;
        rnorm = next_norm;
        history.push(rnorm);
        if rnorm < best.0 {
            best = (rnorm, u.clone());
        }
        if !rnorm.is_finite() {
            return Err(MomentumError::Diverged { iters, best_residual: best.0, best: Box::new(best.1), history });
        }
    }

    let max_strain_norm = eval.strain.iter().fold(0.0_f64, |m, e| m.max(e.norm()));
    Ok(MomentumStep {
        u,
        stress: QuadratureField { values: eval.stress },
        iters,
        final_residual_norm: rnorm,
        residual_history: history,
        max_strain_norm,
    })
}
