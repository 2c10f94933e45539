//! Energies and the discrete energy-dissipation inequality.
//!
//! With `F(t_m) = K(δu_m) + E(u_m, v_m) + H(v_m) − ⟨l_m, u_m⟩` the staggered
//! scheme satisfies, step by step,
//!
//! ```text
//! F(t_m) + h⟨δl_m, u_{m−1}⟩ + D_m [+ h‖δv_m‖²_{k,2}] ≤ F(t_{m−1}),
//! D_m = h Σ_cells vol b(v_{m−1}) [F⁻¹(ε(δu_m + αu_m)) − F⁻¹(ε(αu_m))] : ε(δu_m).
//! ```
//!
//! The ledger sums these into the residual
//! `F(t_m) + Σ h⟨δl_j, u_{j−1}⟩ + Σ D_j [+ Σ h‖δv_j‖²] − F(0)`, which must
//! stay below a tolerance that also accounts for inexact Newton solves.
//! The variant pairing `δl_j` with `u_j` is tracked alongside.

use std::io::Write;

use serde::Serialize;
use thiserror::Error;

use crate::constitutive::{
    conjugate_potential, inverse_response, ConstitutiveError, ConstitutiveLaw, DegradationSpec, SymTensor,
};
use crate::field_ops::{
    cell_degradation, hk_gram, laplacian_stiffness, sym_gradient, FieldError, Grid, QuadratureField, ScalarField,
    VectorField,
};
use crate::linalg::{dot, norm2, CsrMatrix};

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("safety strain violated in cell {cell}: |ε(αu)| = {norm}")]
    SafetyStrain { cell: usize, norm: f64 },
    #[error("cell {cell}: {source}")]
    Constitutive { cell: usize, source: ConstitutiveError },
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error("ledger misuse: {0}")]
    Usage(String),
    #[error("failed to write ledger: {0}")]
    Io(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, LedgerError>;

/// One ledger row. Accumulated quantities run from step 1 to `step`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Default)]
pub struct EnergyReport {
    pub step: usize,
    pub time: f64,
    /// `½ Σ ω_n |δu_n|²`.
    pub kinetic: f64,
    /// `Σ vol b̄/α φ*(ε(αu))`.
    pub elastic: f64,
    /// `1/(4ε) Σ ω_n (1 − v_n)² + ε vᵀLv`.
    pub surface: f64,
    /// `Σ h‖δv_j‖²_{k,2}` (strain-limiting model; zero otherwise).
    pub rate_penalty: f64,
    /// `Σ h⟨δl_j, u_{j−1}⟩`.
    pub external: f64,
    /// `Σ D_j`.
    pub dissipation: f64,
    /// `F(t_m)`.
    pub total: f64,
    pub inequality_residual: f64,
    pub newton_iters: usize,
    pub max_strain_norm: f64,
    /// `⟨l_m, u_m⟩`.
    pub load_pairing: f64,
    /// `Σ h⟨δl_j, u_j⟩`.
    pub external_statement: f64,
    /// Residual with `external_statement` in place of `external`.
    pub inequality_residual_statement: f64,
    /// Allowed residual: `1e-8 (1 + |F(0)|) + Σ ‖R_j‖ ‖δu_j‖`.
    pub budget: f64,
    pub newton_residual: f64,
}

impl EnergyReport {
    pub fn within_budget(&self) -> bool {
        self.inequality_residual <= self.budget
    }
}

fn cell_error(cell: usize, source: ConstitutiveError) -> LedgerError {
    match source {
        ConstitutiveError::StrainBoundViolated { norm } => LedgerError::SafetyStrain { cell, norm },
        source => LedgerError::Constitutive { cell, source },
    }
}

/// `φ*(ε(αu))` per cell.
pub fn elastic_density(grid: &Grid, law: &ConstitutiveLaw, alpha: f64, u: &VectorField) -> Result<QuadratureField<f64>> {
    let strain = sym_gradient(grid, u)?;
    let values = strain
        .values
        .iter()
        .enumerate()
        .map(|(cell, e)| {
            let phi = conjugate_potential(law, &e.scale(alpha)).map_err(|s| cell_error(cell, s))?;
            if phi.is_finite() {
                Ok(phi)
            } else {
                Err(LedgerError::SafetyStrain { cell, norm: alpha * e.norm() })
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(QuadratureField { values })
}

/// `E = Σ vol b̄(v)/α φ*` from a precomputed density.
pub fn elastic_energy(
    grid: &Grid,
    degradation: &DegradationSpec,
    alpha: f64,
    density: &QuadratureField<f64>,
    v: &ScalarField,
) -> f64 {
    let b = cell_degradation(grid, degradation, v);
    let vol = grid.cell_volume();
    b.iter().zip(&density.values).map(|(b, phi)| vol * b * phi / alpha).sum()
}

pub fn kinetic_energy(grid: &Grid, du: &VectorField) -> f64 {
    let d = grid.dim();
    let w = grid.nodal_weights();
    0.5 * du.data.iter().enumerate().map(|(k, x)| w[k / d] * x * x).sum::<f64>()
}

fn surface_with(weights: &[f64], laplacian: &CsrMatrix, eps_pf: f64, v: &ScalarField) -> f64 {
    let bulk: f64 = weights.iter().zip(&v.values).map(|(w, x)| w * (1.0 - x) * (1.0 - x)).sum();
    bulk / (4.0 * eps_pf) + eps_pf * laplacian.zero_sum_form(&v.values)
}

pub fn surface_energy(grid: &Grid, eps_pf: f64, v: &ScalarField) -> f64 {
    surface_with(&grid.nodal_weights(), &laplacian_stiffness(grid), eps_pf, v)
}

/// Instantaneous energies of a state; accumulated fields are left at zero.
#[allow(clippy::too_many_arguments)]
pub fn energies(
    grid: &Grid,
    law: &ConstitutiveLaw,
    degradation: &DegradationSpec,
    alpha: f64,
    eps_pf: f64,
    u: &VectorField,
    du: &VectorField,
    v: &ScalarField,
    load: &VectorField,
) -> Result<EnergyReport> {
    let density = elastic_density(grid, law, alpha, u)?;
    let kinetic = kinetic_energy(grid, du);
    let elastic = elastic_energy(grid, degradation, alpha, &density, v);
    let surface = surface_energy(grid, eps_pf, v);
    let load_pairing = dot(&load.data, &u.data);
    Ok(EnergyReport {
        kinetic,
        elastic,
        surface,
        load_pairing,
        total: kinetic + elastic + surface - load_pairing,
        ..Default::default()
    })
}

/// `dt Σ vol b_prev [F⁻¹(ε(δu) + ε(αu)) − F⁻¹(ε(αu))] : ε(δu)`, with
/// `strain_rate = ε(δu)` and `strain = ε(u)` per cell.
pub fn dissipation_increment(
    law: &ConstitutiveLaw,
    alpha: f64,
    cell_volume: f64,
    b_prev: &[f64],
    strain_rate: &[SymTensor],
    strain: &[SymTensor],
    dt: f64,
) -> Result<f64> {
    if b_prev.len() != strain_rate.len() || strain.len() != strain_rate.len() {
        return Err(LedgerError::Usage("cell fields differ in length".into()));
    }
    let mut total = 0.0;
    for cell in 0..strain.len() {
        let viscous = strain[cell].scale(alpha);
        let driven = strain_rate[cell].add(&viscous);
        let t1 = inverse_response(law, &driven, 1e-12).map_err(|s| cell_error(cell, s))?;
        let t0 = inverse_response(law, &viscous, 1e-12).map_err(|s| cell_error(cell, s))?;
        total += cell_volume * b_prev[cell] * t1.sub(&t0).ddot(&strain_rate[cell]);
    }
    Ok(dt * total)
}

/// Model constants the ledger needs.
#[derive(Debug, Clone, Copy)]
pub struct LedgerSetup {
    pub law: ConstitutiveLaw,
    pub degradation: DegradationSpec,
    pub alpha: f64,
    pub eps_pf: f64,
    pub dt: f64,
    /// Order of the rate penalty, strain-limiting model only.
    pub rate_order: Option<usize>,
}

/// Data of one completed step.
#[derive(Debug, Clone, Copy)]
pub struct StepRecord<'a> {
    pub time: f64,
    pub u: &'a VectorField,
    pub v: &'a ScalarField,
    pub v_prev: &'a ScalarField,
    pub load: &'a VectorField,
    /// `φ*(ε(αu_m))` per cell, as fed to the phase-field step.
    pub density: &'a QuadratureField<f64>,
    pub newton_iters: usize,
    pub newton_residual: f64,
    pub max_strain_norm: f64,
}

#[derive(Debug, Clone)]
struct Previous {
    u: VectorField,
    load: VectorField,
}

/// Append-only energy history of one simulation.
#[derive(Debug, Clone)]
pub struct EnergyLedger {
    grid: Grid,
    setup: LedgerSetup,
    weights: Vec<f64>,
    laplacian: CsrMatrix,
    gram: Option<CsrMatrix>,
    rows: Vec<EnergyReport>,
    previous: Option<Previous>,
    f0: f64,
    inexactness: f64,
}

impl EnergyLedger {
    pub fn new(grid: &Grid, setup: LedgerSetup) -> Result<Self> {
        let gram = match setup.rate_order {
            Some(k) => Some(hk_gram(grid, k)?),
            None => None,
        };
        Ok(EnergyLedger {
            grid: grid.clone(),
            setup,
            weights: grid.nodal_weights(),
            laplacian: laplacian_stiffness(grid),
            gram,
            rows: Vec::new(),
            previous: None,
            f0: 0.0,
            inexactness: 0.0,
        })
    }

    pub fn rows(&self) -> &[EnergyReport] {
        &self.rows
    }

    pub fn latest(&self) -> Option<&EnergyReport> {
        self.rows.last()
    }

    pub fn initial_energy(&self) -> f64 {
        self.f0
    }

    /// Largest `inequality_residual − budget` over the recorded steps.
    pub fn worst_excess(&self) -> f64 {
        self.rows.iter().skip(1).map(|r| r.inequality_residual - r.budget).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Records `F(0)` from `u_0`, `δu_0 = u_1`, the initial phase field and `l_0`.
    pub fn record_initial(
        &mut self,
        u0: &VectorField,
        u1: &VectorField,
        v0: &ScalarField,
        load0: &VectorField,
    ) -> Result<EnergyReport> {
        if !self.rows.is_empty() {
            return Err(LedgerError::Usage("initial state already recorded".into()));
        }
        let s = &self.setup;
        let density = elastic_density(&self.grid, &s.law, s.alpha, u0)?;
        let kinetic = kinetic_energy(&self.grid, u1);
        let elastic = elastic_energy(&self.grid, &s.degradation, s.alpha, &density, v0);
        let surface = surface_with(&self.weights, &self.laplacian, s.eps_pf, v0);
        let load_pairing = dot(&load0.data, &u0.data);
        let total = kinetic + elastic + surface - load_pairing;
        self.f0 = total;
        let row = EnergyReport {
            kinetic,
            elastic,
            surface,
            total,
            load_pairing,
            budget: 1e-8 * (1.0 + total.abs()),
            ..Default::default()
        };
        self.rows.push(row);
        self.previous = Some(Previous { u: u0.clone(), load: load0.clone() });
        Ok(row)
    }

    /// Appends step `m` and returns its row.
    pub fn record_step(&mut self, rec: &StepRecord) -> Result<EnergyReport> {
        let prev = self
            .previous
            .take()
            .ok_or_else(|| LedgerError::Usage("record_initial must come first".into()))?;
        let s = self.setup;
        let last = *self.rows.last().unwrap();
        let h = s.dt;
        let du = rec.u.linear_combination(1.0 / h, &prev.u, -1.0 / h);
        let dl = rec.load.linear_combination(1.0 / h, &prev.load, -1.0 / h);

        let kinetic = kinetic_energy(&self.grid, &du);
        let elastic = elastic_energy(&self.grid, &s.degradation, s.alpha, rec.density, rec.v);
        let surface = surface_with(&self.weights, &self.laplacian, s.eps_pf, rec.v);
        let load_pairing = dot(&rec.load.data, &rec.u.data);
        let total = kinetic + elastic + surface - load_pairing;

        let b_prev = cell_degradation(&self.grid, &s.degradation, rec.v_prev);
        let strain_rate = sym_gradient(&self.grid, &du)?.values;
        let strain = sym_gradient(&self.grid, rec.u)?.values;
        let dissipation = last.dissipation
            + dissipation_increment(&s.law, s.alpha, self.grid.cell_volume(), &b_prev, &strain_rate, &strain, h)?;

        let rate_penalty = last.rate_penalty
            + match &self.gram {
                Some(g) => {
                    let dv: Vec<f64> = rec.v.values.iter().zip(&rec.v_prev.values).map(|(a, b)| (a - b) / h).collect();
                    h * g.bilinear(&dv, &dv)
                }
                None => 0.0,
            };
        let external = last.external + h * dot(&dl.data, &prev.u.data);
        let external_statement = last.external_statement + h * dot(&dl.data, &rec.u.data);

        self.inexactness += rec.newton_residual * norm2(&du.data);
        let budget = 1e-8 * (1.0 + self.f0.abs()) + self.inexactness;
        let base = total + dissipation + rate_penalty - self.f0;
        let row = EnergyReport {
            step: last.step + 1,
            time: rec.time,
            kinetic,
            elastic,
            surface,
            rate_penalty,
            external,
            dissipation,
            total,
            inequality_residual: base + external,
            newton_iters: rec.newton_iters,
            max_strain_norm: rec.max_strain_norm,
            load_pairing,
            external_statement,
            inequality_residual_statement: base + external_statement,
            budget,
            newton_residual: rec.newton_residual,
        };
        self.rows.push(row);
        self.previous = Some(Previous { u: rec.u.clone(), load: rec.load.clone() });
        Ok(row)
    }

    /// Writes the history as CSV with a header row.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}
