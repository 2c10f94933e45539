//! Structured-grid phase-field fracture for nonlinear Kelvin-Voigt solids.
//!
//! A staggered time loop alternates an implicit momentum step (Newton on the
//! inverse constitutive law) with a bound-constrained phase-field
//! minimization, and records a per-step energy ledger.

// Index loops mirror the component formulas in the numerical kernels, and
// `!(x > 0.0)` checks are used on purpose so that NaN is rejected.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod constitutive;
pub mod energy_ledger;
pub mod field_ops;
pub mod linalg;
pub mod momentum_solver;
pub mod oracle;
pub mod phasefield_solver;
pub mod sim_driver;
