//! Configuration, validation, the staggered time loop and output writers.

use std::cell::RefCell;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use evalexpr::{build_operator_tree, ContextWithMutableVariables, HashMapContext, Node, Value};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constitutive::{inverse_response, ConstitutiveLaw, DegradationSpec, Section};
use crate::energy_ledger::{elastic_density, EnergyLedger, EnergyReport, LedgerError, LedgerSetup, StepRecord};
use crate::field_ops::{
    body_load, boundary_load, cell_degradation, default_hk_order, edge_traction_load, sym_gradient, Face, FieldError,
    Grid, ScalarField, VectorField,
};
use crate::momentum_solver::{momentum_step, MomentumStepInput, NewtonConfig};
use crate::phasefield_solver::{phasefield_step_with, KktReport, PhaseOperators, PhaseStepInput};

#[derive(Debug, Error)]
pub enum DriverError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("expression `{expr}`: {message}")]
    Expression { expr: String, message: String },
    #[error("validation failed: {}", summarize(.0))]
    Validation(Vec<Finding>),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error("step {step} failed: {message}")]
    Step {
        step: usize,
        message: String,
        last_good: Box<State>,
        history: Vec<EnergyReport>,
    },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

fn summarize(findings: &[Finding]) -> String {
    findings
        .iter()
        .filter(|f| f.severity == Severity::Error)
        .map(|f| f.message.clone())
        .collect::<Vec<_>>()
        .join("; ")
}

pub type Result<T> = std::result::Result<T, DriverError>;

fn zeros_expr() -> Vec<String> {
    vec!["0".into(), "0".into()]
}

fn one_expr() -> String {
    "1".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub section: Section,
    pub law: ConstitutiveLaw,
    pub alpha: f64,
    pub eta: f64,
    pub eps_pf: f64,
    /// Order of the rate penalty; defaults to the smallest admissible one.
    #[serde(default)]
    pub k: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default = "default_dim")]
    pub dim: usize,
    pub cells: Vec<usize>,
    /// Domain lengths; unit by default.
    #[serde(default)]
    pub size: Option<Vec<f64>>,
    pub dirichlet: Vec<Face>,
}

fn default_dim() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeConfig {
    pub dt: f64,
    pub t_final: f64,
}

/// Initial data as expressions in `x`, `y` (and `pi`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialConfig {
    #[serde(default = "zeros_expr")]
    pub u0: Vec<String>,
    #[serde(default = "zeros_expr")]
    pub u1: Vec<String>,
    #[serde(default = "one_expr")]
    pub v0: String,
}

impl Default for InitialConfig {
    fn default() -> Self {
        InitialConfig { u0: zeros_expr(), u1: zeros_expr(), v0: one_expr() }
    }
}

/// Loads as expressions in `t`, `x`, `y`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundaryConfig {
    #[serde(default = "zeros_expr")]
    pub traction: Vec<String>,
    #[serde(default = "zeros_expr")]
    pub body_force: Vec<String>,
    /// Blend the traction from the compatible initial value into `g` over
    /// `t ∈ [1/(2n), 1/n]`. Defaults to on for the regularized law.
    #[serde(default)]
    pub ramp: Option<bool>,
}

impl Default for BoundaryConfig {
    fn default() -> Self {
        BoundaryConfig { traction: zeros_expr(), body_force: zeros_expr(), ramp: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(default)]
    pub newton: NewtonConfig,
    /// Recorded in the metadata; the solvers themselves are deterministic.
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Units {
    pub length: String,
    pub time: String,
    pub stress: String,
}

impl Default for Units {
    fn default() -> Self {
        Units { length: "1".into(), time: "1".into(), stress: "1".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default)]
    pub dir: Option<PathBuf>,
    #[serde(default = "default_cadence")]
    pub cadence: usize,
    #[serde(default = "default_true")]
    pub vtk: bool,
    #[serde(default)]
    pub units: Units,
}

fn default_cadence() -> usize {
    10
}

fn default_true() -> bool {
    true
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: None, cadence: default_cadence(), vtk: true, units: Units::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub model: ModelConfig,
    pub grid: GridConfig,
    pub time: TimeConfig,
    #[serde(default)]
    pub initial: InitialConfig,
    #[serde(default)]
    pub boundary: BoundaryConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

/// Short names accepted by [`SimConfig::set_param`].
const PARAM_ALIASES: &[(&str, &str)] = &[
    ("n", "model.law.n"),
    ("a", "model.law.a"),
    ("p", "model.law.p"),
    ("alpha", "model.alpha"),
    ("eta", "model.eta"),
    ("eps_pf", "model.eps_pf"),
    ("k", "model.k"),
    ("dt", "time.dt"),
    ("t_final", "time.t_final"),
];

fn parse_scalar(raw: &str) -> toml::Value {
    if let Ok(i) = raw.parse::<i64>() {
        toml::Value::Integer(i)
    } else if let Ok(x) = raw.parse::<f64>() {
        toml::Value::Float(x)
    } else if let Ok(b) = raw.parse::<bool>() {
        toml::Value::Boolean(b)
    } else {
        toml::Value::String(raw.to_string())
    }
}

impl SimConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| DriverError::Config(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| DriverError::Config(e.to_string()))
    }

    /// Overrides one entry, addressed by a dotted path or a short alias.
    pub fn set_param(&self, key: &str, raw: &str) -> Result<SimConfig> {
        let path = PARAM_ALIASES.iter().find(|(k, _)| *k == key).map(|(_, p)| *p).unwrap_or(key);
        let mut tree = toml::Value::try_from(self).map_err(|e| DriverError::Config(e.to_string()))?;
        let mut node = &mut tree;
        let parts: Vec<&str> = path.split('.').collect();
        for part in &parts[..parts.len() - 1] {
            node = node
                .get_mut(*part)
                .ok_or_else(|| DriverError::Config(format!("unknown parameter `{key}`")))?;
        }
        let table = node
            .as_table_mut()
            .ok_or_else(|| DriverError::Config(format!("unknown parameter `{key}`")))?;
        let mut value = parse_scalar(raw);
        // Keep float-typed entries float when the override is written as an integer.
        if let (Some(toml::Value::Float(_)), toml::Value::Integer(i)) = (table.get(parts[parts.len() - 1]), &value) {
            value = toml::Value::Float(*i as f64);
        }
        table.insert(parts[parts.len() - 1].to_string(), value);
        tree.try_into().map_err(|e: toml::de::Error| DriverError::Config(e.to_string()))
    }

    pub fn steps(&self) -> usize {
        (self.time.t_final / self.time.dt).round().max(0.0) as usize
    }

    pub fn rate_order(&self) -> usize {
        self.model.k.unwrap_or_else(|| default_hk_order(self.grid.dim))
    }

    pub fn build_grid(&self) -> Result<Grid> {
        let g = &self.grid;
        if g.cells.len() != g.dim {
            return Err(DriverError::Config(format!("grid.cells needs {} entries", g.dim)));
        }
        let size = g.size.clone().unwrap_or_else(|| vec![1.0; g.dim]);
        if size.len() != g.dim {
            return Err(DriverError::Config(format!("grid.size needs {} entries", g.dim)));
        }
        let spacing: Vec<f64> = size.iter().zip(&g.cells).map(|(l, &c)| l / c.max(1) as f64).collect();
        Ok(Grid::new(g.dim, &g.cells, &spacing, &g.dirichlet)?)
    }

    pub fn degradation(&self) -> DegradationSpec {
        DegradationSpec { section: self.model.section, eta: self.model.eta }
    }

    fn ramp_enabled(&self) -> bool {
        self.boundary
            .ramp
            .unwrap_or(matches!(self.model.law, ConstitutiveLaw::RegularizedStrainLimiting { .. }))
    }
}

/// A compiled scalar expression.
#[derive(Debug, Clone)]
pub struct Expr {
    source: String,
    tree: Node,
}

impl Expr {
    pub fn parse(source: &str) -> Result<Self> {
        let tree = build_operator_tree(source).map_err(|e| DriverError::Expression {
            expr: source.to_string(),
            message: e.to_string(),
        })?;
        Ok(Expr { source: source.to_string(), tree })
    }

    pub fn eval(&self, t: f64, x: [f64; 2]) -> Result<f64> {
        let err = |e: evalexpr::EvalexprError| DriverError::Expression { expr: self.source.clone(), message: e.to_string() };
        let mut ctx = HashMapContext::new();
        for (name, value) in [("t", t), ("x", x[0]), ("y", x[1]), ("pi", std::f64::consts::PI)] {
            ctx.set_value(name.into(), Value::Float(value)).map_err(err)?;
        }
        let v = self.tree.eval_number_with_context(&ctx).map_err(err)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(DriverError::Expression { expr: self.source.clone(), message: "non-finite value".into() })
        }
    }
}

/// A compiled vector expression (one entry per spatial component).
#[derive(Debug, Clone)]
pub struct VectorExpr(Vec<Expr>);

impl VectorExpr {
    pub fn parse(sources: &[String], dim: usize) -> Result<Self> {
        if sources.len() < dim {
            return Err(DriverError::Config(format!("vector expression needs {dim} components")));
        }
        Ok(VectorExpr(sources[..dim].iter().map(|s| Expr::parse(s)).collect::<Result<_>>()?))
    }

    pub fn eval(&self, t: f64, x: [f64; 2]) -> Result<[f64; 2]> {
        let mut out = [0.0; 2];
        for (o, e) in out.iter_mut().zip(&self.0) {
            *o = e.eval(t, x)?;
        }
        Ok(out)
    }

    /// Runs a field builder that takes an infallible closure, reporting the
    /// first evaluation error afterwards.
    fn with_fn<R>(&self, build: impl FnOnce(&dyn Fn(f64, [f64; 2]) -> [f64; 2]) -> R) -> Result<R> {
        let failure: RefCell<Option<DriverError>> = RefCell::new(None);
        let f = |t: f64, x: [f64; 2]| match self.eval(t, x) {
            Ok(v) => v,
            Err(e) => {
                failure.borrow_mut().get_or_insert(e);
                [f64::NAN; 2]
            }
        };
        let out = build(&f);
        match failure.into_inner() {
            Some(e) => Err(e),
            None => Ok(out),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
    Info,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FindingKind {
    Structure,
    SafetyStrain,
    Compatibility,
    PhaseFieldRange,
    RateOrder,
    LawMismatch,
    DirichletData,
    InitialMinimization,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Finding {
    pub kind: FindingKind,
    pub severity: Severity,
    pub message: String,
}

impl Finding {
    fn error(kind: FindingKind, message: impl Into<String>) -> Self {
        Finding { kind, severity: Severity::Error, message: message.into() }
    }

    fn warning(kind: FindingKind, message: impl Into<String>) -> Self {
        Finding { kind, severity: Severity::Warning, message: message.into() }
    }

    fn info(kind: FindingKind, message: impl Into<String>) -> Self {
        Finding { kind, severity: Severity::Info, message: message.into() }
    }
}

/// Safety margin below the strain limit.
pub const SAFETY_MARGIN: f64 = 1e-6;
/// Relative tolerance of the Neumann compatibility check.
pub const COMPATIBILITY_TOL: f64 = 1e-8;

/// Outcome of [`validate`].
#[derive(Debug, Clone)]
pub struct Validation {
    pub findings: Vec<Finding>,
    /// `max{‖ε(αu₀)‖_∞, ‖ε(u₁ + αu₀)‖_∞}` over cells.
    pub safety_strain: f64,
    /// Initial phase field after the p-growth initial minimization, or `v₀`.
    pub initial_phase: Option<ScalarField>,
}

impl Validation {
    pub fn passed(&self) -> bool {
        self.findings.iter().all(|f| f.severity != Severity::Error)
    }

    pub fn has(&self, kind: FindingKind) -> bool {
        self.findings.iter().any(|f| f.kind == kind && f.severity == Severity::Error)
    }
}

/// Blend weight `ψ(τ)`: 1 on `[0, ½]`, 0 on `[1, ∞)`, quintic smoothstep between.
pub fn ramp_weight(tau: f64) -> f64 {
    let s = (2.0 * tau - 1.0).clamp(0.0, 1.0);
    1.0 - s * s * s * (s * (6.0 * s - 15.0) + 10.0)
}

/// `F_n⁻¹(ε(u₁ + αu₀))·n ψ(nt) + g (1 − ψ(nt))` for one boundary segment.
pub fn neumann_ramp(g: [f64; 2], compatible: [f64; 2], n: u32, t: f64) -> [f64; 2] {
    let psi = ramp_weight(n as f64 * t);
    [compatible[0] * psi + g[0] * (1.0 - psi), compatible[1] * psi + g[1] * (1.0 - psi)]
}

/// Initial and load data evaluated on the grid.
struct Problem {
    cfg: SimConfig,
    grid: Grid,
    traction: VectorExpr,
    body: VectorExpr,
    u0: VectorField,
    u1: VectorField,
    v0: ScalarField,
    findings: Vec<Finding>,
}

fn traction_on_edges(grid: &Grid, stress: &[crate::constitutive::SymTensor], weights: Option<&[f64]>) -> Vec<[f64; 2]> {
    grid.neumann_edges()
        .iter()
        .map(|e| {
            let t = &stress[e.cell];
            let w = weights.map_or(1.0, |b| b[e.cell]);
            let mut out = [0.0; 2];
            for (i, o) in out.iter_mut().enumerate().take(grid.dim()) {
                *o = w * (0..grid.dim()).map(|j| t.get(i, j) * e.normal[j]).sum::<f64>();
            }
            out
        })
        .collect()
}

impl Problem {
    fn new(cfg: &SimConfig) -> Result<Self> {
        let grid = cfg.build_grid()?;
        let d = grid.dim();
        let mut findings = Vec::new();
        let u0e = VectorExpr::parse(&cfg.initial.u0, d)?;
        let u1e = VectorExpr::parse(&cfg.initial.u1, d)?;
        let v0e = Expr::parse(&cfg.initial.v0)?;
        let mut u0 = u0e.with_fn(|f| VectorField::from_fn(&grid, |x| f(0.0, x)))?;
        let mut u1 = u1e.with_fn(|f| VectorField::from_fn(&grid, |x| f(0.0, x)))?;
        let mut v0 = ScalarField {
            values: (0..grid.n_nodes()).map(|n| v0e.eval(0.0, grid.node_coords(n))).collect::<Result<_>>()?,
        };
        let on_d = grid.dirichlet_nodes();
        let nonzero_u = |u: &VectorField| (0..u.len()).any(|k| on_d[k / d] && u.data[k] != 0.0);
        if nonzero_u(&u0) || nonzero_u(&u1) {
            findings.push(Finding::warning(
                FindingKind::DirichletData,
                "initial displacement or velocity is nonzero on the Dirichlet boundary; it is set to zero",
            ));
            u0.zero_dirichlet(&grid);
            u1.zero_dirichlet(&grid);
        }
        if v0.values.iter().zip(&on_d).any(|(&v, &dn)| dn && v != 1.0) {
            findings.push(Finding::warning(
                FindingKind::DirichletData,
                "initial phase field differs from 1 on the Dirichlet boundary; it is set to 1",
            ));
            for (v, &dn) in v0.values.iter_mut().zip(&on_d) {
                if dn {
                    *v = 1.0;
                }
            }
        }
        Ok(Problem {
            cfg: cfg.clone(),
            traction: VectorExpr::parse(&cfg.boundary.traction, d)?,
            body: VectorExpr::parse(&cfg.boundary.body_force, d)?,
            grid,
            u0,
            u1,
            v0,
            findings,
        })
    }

    /// `F⁻¹(ε(u₁ + αu₀))` per cell.
    fn initial_stress(&self) -> Result<Vec<crate::constitutive::SymTensor>> {
        let w = self.u1.linear_combination(1.0, &self.u0, self.cfg.model.alpha);
        let strain = sym_gradient(&self.grid, &w)?;
        strain
            .values
            .iter()
            .map(|e| {
                inverse_response(&self.cfg.model.law, e, 1e-12)
                    .map_err(|err| DriverError::Config(format!("initial stress: {err}")))
            })
            .collect()
    }

    /// Lumped load `l(t)`, including the compatibility ramp when enabled.
    fn load(&self, t: f64, ramp: Option<&[[f64; 2]]>) -> Result<VectorField> {
        let grid = &self.grid;
        let mut load = self.body.with_fn(|f| body_load(grid, f, t))?;
        let traction = match (ramp, self.cfg.model.law) {
            (Some(compatible), ConstitutiveLaw::RegularizedStrainLimiting { n, .. }) => {
                let edges = grid.neumann_edges();
                let psi = ramp_weight(n as f64 * t);
                let g = self.traction.with_fn(|f| boundary_load(grid, f, t))?;
                let c = edge_traction_load(grid, &edges, compatible);
                c.linear_combination(psi, &g, 1.0 - psi)
            }
            _ => self.traction.with_fn(|f| boundary_load(grid, f, t))?,
        };
        for (l, g) in load.data.iter_mut().zip(&traction.data) {
            *l += g;
        }
        Ok(load)
    }
}

fn structural_checks(cfg: &SimConfig, findings: &mut Vec<Finding>) {
    let m = &cfg.model;
    if let Err(e) = m.law.validate() {
        findings.push(Finding::error(FindingKind::Structure, e.to_string()));
    }
    if !(cfg.time.dt > 0.0) || !(cfg.time.t_final >= 0.0) {
        findings.push(Finding::error(FindingKind::Structure, "dt must be positive and t_final nonnegative"));
    }
    if !(m.alpha > 0.0) || !(m.eta > 0.0) || !(m.eps_pf > 0.0) {
        findings.push(Finding::error(FindingKind::Structure, "alpha, eta and eps_pf must be positive"));
    }
    if cfg.output.cadence == 0 {
        findings.push(Finding::error(FindingKind::Structure, "output cadence must be at least 1"));
    }
    match m.section {
        Section::Two => {
            if !matches!(m.law, ConstitutiveLaw::PGrowth { .. }) {
                findings.push(Finding::error(FindingKind::LawMismatch, "the p-growth model needs a p_growth law"));
            }
        }
        Section::Three => {
            if !m.law.is_strain_limiting() {
                findings.push(Finding::error(
                    FindingKind::LawMismatch,
                    "the strain-limiting model needs a strain_limiting or regularized_strain_limiting law",
                ));
            }
            let k = cfg.rate_order();
            if 2 * k <= cfg.grid.dim + 2 {
                findings.push(Finding::error(
                    FindingKind::RateOrder,
                    format!("rate order k = {k} must exceed d/2 + 1 = {}", cfg.grid.dim as f64 / 2.0 + 1.0),
                ));
            }
        }
    }
}

/// Checks a configuration. For the p-growth model this also runs the
/// initial phase-field minimization and returns its result.
pub fn validate(cfg: &SimConfig) -> Result<Validation> {
    let mut findings = Vec::new();
    structural_checks(cfg, &mut findings);
    if !findings.is_empty() && findings.iter().any(|f| f.severity == Severity::Error) {
        return Ok(Validation { findings, safety_strain: f64::NAN, initial_phase: None });
    }
    let problem = Problem::new(cfg)?;
    findings.extend(problem.findings.iter().cloned());
    let grid = &problem.grid;
    let m = &cfg.model;

    let alpha_u0 = problem.u0.linear_combination(m.alpha, &problem.u0, 0.0);
    let driven = problem.u1.linear_combination(1.0, &problem.u0, m.alpha);
    let strain_max = |u: &VectorField| -> Result<f64> {
        Ok(sym_gradient(grid, u)?.values.iter().fold(0.0f64, |acc, e| acc.max(e.norm())))
    };
    let safety_strain = strain_max(&alpha_u0)?.max(strain_max(&driven)?);

    let mut initial_phase = None;
    match m.section {
        Section::Three => {
            if safety_strain >= 1.0 - SAFETY_MARGIN {
                findings.push(Finding::error(
                    FindingKind::SafetyStrain,
                    format!(
                        "safety strain violated: max{{‖ε(αu₀)‖, ‖ε(u₁+αu₀)‖}} = {safety_strain} must stay below 1 − {SAFETY_MARGIN}"
                    ),
                ));
            } else {
                let stress = problem.initial_stress()?;
                let b0 = cell_degradation(grid, &cfg.degradation(), &problem.v0);
                let edges = grid.neumann_edges();
                let expected = edge_traction_load(grid, &edges, &traction_on_edges(grid, &stress, Some(&b0)));
                let given = problem.traction.with_fn(|f| boundary_load(grid, f, 0.0))?;
                let scale = expected.data.iter().chain(&given.data).fold(0.0f64, |a, x| a.max(x.abs()));
                let diff = expected.data.iter().zip(&given.data).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
                if diff > COMPATIBILITY_TOL * scale {
                    findings.push(Finding::error(
                        FindingKind::Compatibility,
                        format!(
                            "Neumann compatibility violated: g(0) differs from b(v₀)F⁻¹(ε(u₁+αu₀))n by {diff:e} (scale {scale:e})"
                        ),
                    ));
                }
            }
            initial_phase = Some(problem.v0.clone());
        }
        Section::Two => {
            if problem.v0.values.iter().any(|v| !(0.0..=1.0).contains(v)) {
                findings.push(Finding::error(FindingKind::PhaseFieldRange, "initial phase field must lie in [0, 1]"));
            } else {
                match initial_minimization(&problem) {
                    Ok(v) => {
                        findings.push(Finding::info(
                            FindingKind::InitialMinimization,
                            "initial phase field replaced by the constrained minimizer of E(u₀, ·) + H",
                        ));
                        initial_phase = Some(v);
                    }
                    Err(e) => findings.push(Finding::error(FindingKind::InitialMinimization, e.to_string())),
                }
            }
        }
    }
    Ok(Validation { findings, safety_strain, initial_phase })
}

fn initial_minimization(problem: &Problem) -> Result<ScalarField> {
    let m = &problem.cfg.model;
    let density = elastic_density(&problem.grid, &m.law, m.alpha, &problem.u0)?;
    let ops = PhaseOperators::new(&problem.grid, None).map_err(|e| DriverError::Config(e.to_string()))?;
    let input = PhaseStepInput {
        grid: &problem.grid,
        elastic_density: &density,
        v_prev: &problem.v0,
        eps_pf: m.eps_pf,
        dt: problem.cfg.time.dt,
        section: m.section,
        k: 0,
        eta: m.eta,
        alpha: m.alpha,
        rate_term: false,
    };
    Ok(phasefield_step_with(&ops, &input).map_err(|e| DriverError::Config(e.to_string()))?.v)
}

/// Displacement and phase field at one time level.
#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub step: usize,
    pub time: f64,
    pub u: VectorField,
    pub v: ScalarField,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub step: usize,
    pub time: f64,
    pub u: VectorField,
    pub v: ScalarField,
    /// `|T|` per cell.
    pub stress_norm: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunMetadata {
    pub version: String,
    pub steps: usize,
    pub dt: f64,
    pub t_final: f64,
    pub nodes: usize,
    pub cells: usize,
    pub safety_strain: f64,
    pub max_strain_norm: f64,
    pub max_stress_norm: f64,
    pub worst_inequality_excess: f64,
    pub total_newton_iterations: usize,
    pub phase_solver_fallbacks: usize,
    pub findings: Vec<Finding>,
    pub units: Units,
    pub seed: u64,
    pub config: SimConfig,
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub grid: Grid,
    pub snapshots: Vec<Snapshot>,
    pub ledger: EnergyLedger,
    /// One report per step.
    pub kkt: Vec<KktReport>,
    /// `max_cells |ε(δu + αu)|` per step.
    pub max_strain: Vec<f64>,
    /// `max_cells |T|` per step.
    pub max_stress: Vec<f64>,
    /// States `u_m, v_m` for every step when requested, else empty.
    pub trajectory: Vec<State>,
    pub final_state: State,
    pub metadata: RunMetadata,
}

/// Options that do not belong in a configuration file.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Keep every state, not only snapshots.
    pub keep_trajectory: bool,
}

pub fn run(cfg: &SimConfig) -> Result<SimOutput> {
    run_with(cfg, RunOptions::default())
}

pub fn run_with(cfg: &SimConfig, opts: RunOptions) -> Result<SimOutput> {
    let validation = validate(cfg)?;
    if !validation.passed() {
        return Err(DriverError::Validation(validation.findings));
    }
    let problem = Problem::new(cfg)?;
    let grid = problem.grid.clone();
    let m = cfg.model.clone();
    let dt = cfg.time.dt;
    let steps = cfg.steps();
    let degradation = cfg.degradation();
    let rate_order = (m.section == Section::Three).then(|| cfg.rate_order());

    let ramp = if cfg.ramp_enabled() {
        Some(traction_on_edges(&grid, &problem.initial_stress()?, None))
    } else {
        None
    };
    let ops = PhaseOperators::new(&grid, rate_order).map_err(|e| DriverError::Config(e.to_string()))?;
    let mut ledger = EnergyLedger::new(
        &grid,
        LedgerSetup { law: m.law, degradation, alpha: m.alpha, eps_pf: m.eps_pf, dt, rate_order },
    )?;

    let v0 = validation.initial_phase.clone().unwrap_or_else(|| problem.v0.clone());
    let u0 = problem.u0.clone();
    let load0 = problem.load(0.0, ramp.as_deref())?;
    ledger.record_initial(&u0, &problem.u1, &v0, &load0)?;

    let mut u_prev2 = u0.linear_combination(1.0, &problem.u1, -dt);
    let mut u_prev = u0.clone();
    let mut v_prev = v0.clone();
    // |F⁻¹(ε(u₁ + αu₀))| for the first snapshot.
    let stress0: Vec<f64> = problem
        .initial_stress()
        .map(|s| s.iter().map(|t| t.norm()).collect())
        .unwrap_or_else(|_| vec![f64::NAN; grid.n_cells()]);
    let mut snapshots = vec![Snapshot { step: 0, time: 0.0, u: u0.clone(), v: v0.clone(), stress_norm: stress0 }];
    let mut trajectory = Vec::new();
    if opts.keep_trajectory {
        trajectory.push(State { step: 0, time: 0.0, u: u0.clone(), v: v0.clone() });
    }
    let (mut kkt, mut max_strain, mut max_stress) = (Vec::new(), Vec::new(), Vec::new());
    let mut newton_total = 0;
    let mut fallbacks = 0;

    for step in 1..=steps {
        let time = step as f64 * dt;
        let fail = |message: String, u: &VectorField, v: &ScalarField, ledger: &EnergyLedger| DriverError::Step {
            step,
            message,
            last_good: Box::new(State { step: step - 1, time: time - dt, u: u.clone(), v: v.clone() }),
            history: ledger.rows().to_vec(),
        };
        let load = problem.load(time, ramp.as_deref())?;
        let input = MomentumStepInput {
            grid: &grid,
            u_prev: &u_prev,
            u_prev2: &u_prev2,
            v_prev: &v_prev,
            degradation,
            dt,
            law: m.law,
            alpha: m.alpha,
            load: &load,
        };
        let mstep = momentum_step(&input, &cfg.solver.newton)
            .map_err(|e| fail(format!("momentum: {e}"), &u_prev, &v_prev, &ledger))?;
        newton_total += mstep.iters;

        let density = elastic_density(&grid, &m.law, m.alpha, &mstep.u)
            .map_err(|e| fail(format!("elastic density: {e}"), &u_prev, &v_prev, &ledger))?;
        let pin = PhaseStepInput {
            grid: &grid,
            elastic_density: &density,
            v_prev: &v_prev,
            eps_pf: m.eps_pf,
            dt,
            section: m.section,
            k: rate_order.unwrap_or(0),
            eta: m.eta,
            alpha: m.alpha,
            rate_term: rate_order.is_some(),
        };
        let psol = phasefield_step_with(&ops, &pin)
            .map_err(|e| fail(format!("phase field: {e}"), &u_prev, &v_prev, &ledger))?;
        if psol.used_fallback {
            fallbacks += 1;
        }
        if psol.v.values.iter().zip(&v_prev.values).any(|(a, b)| a > b) {
            return Err(fail("irreversibility violated".into(), &u_prev, &v_prev, &ledger));
        }

        ledger.record_step(&StepRecord {
            time,
            u: &mstep.u,
            v: &psol.v,
            v_prev: &v_prev,
            load: &load,
            density: &density,
            newton_iters: mstep.iters,
            newton_residual: mstep.final_residual_norm,
            max_strain_norm: mstep.max_strain_norm,
        })?;
        kkt.push(psol.kkt);
        max_strain.push(mstep.max_strain_norm);
        let stress_norm: Vec<f64> = mstep.stress.values.iter().map(|t| t.norm()).collect();
        max_stress.push(stress_norm.iter().fold(0.0f64, |a, &b| a.max(b)));
        if step % cfg.output.cadence.max(1) == 0 {
            snapshots.push(Snapshot { step, time, u: mstep.u.clone(), v: psol.v.clone(), stress_norm });
        }
        if opts.keep_trajectory {
            trajectory.push(State { step, time, u: mstep.u.clone(), v: psol.v.clone() });
        }
        u_prev2 = std::mem::replace(&mut u_prev, mstep.u);
        v_prev = psol.v;
    }

    let worst = ledger.worst_excess();
    let metadata = RunMetadata {
        version: env!("CARGO_PKG_VERSION").into(),
        steps,
        dt,
        t_final: cfg.time.t_final,
        nodes: grid.n_nodes(),
        cells: grid.n_cells(),
        safety_strain: validation.safety_strain,
        max_strain_norm: max_strain.iter().fold(0.0f64, |a, &b| a.max(b)),
        max_stress_norm: max_stress.iter().fold(0.0f64, |a, &b| a.max(b)),
        worst_inequality_excess: if worst.is_finite() { worst } else { 0.0 },
        total_newton_iterations: newton_total,
        phase_solver_fallbacks: fallbacks,
        findings: validation.findings,
        units: cfg.output.units.clone(),
        seed: cfg.solver.seed,
        config: cfg.clone(),
    };
    Ok(SimOutput {
        grid,
        snapshots,
        ledger,
        kkt,
        max_strain,
        max_stress,
        trajectory,
        final_state: State { step: steps, time: steps as f64 * dt, u: u_prev, v: v_prev },
        metadata,
    })
}

/// Legacy VTK (ASCII) structured-points file of one snapshot.
pub fn vtk_string(grid: &Grid, snap: &Snapshot) -> String {
    let [nx, ny] = grid.nodes_per_axis();
    let h = grid.spacing();
    let hy = if grid.dim() == 2 { h[1] } else { 1.0 };
    let d = grid.dim();
    let mut s = String::new();
    let _ = writeln!(s, "# vtk DataFile Version 3.0");
    let _ = writeln!(s, "viscofrac step {} t={:e}", snap.step, snap.time);
    let _ = writeln!(s, "ASCII\nDATASET STRUCTURED_POINTS");
    let _ = writeln!(s, "DIMENSIONS {} {} 1", nx, if d == 2 { ny } else { 1 });
    let _ = writeln!(s, "ORIGIN 0 0 0\nSPACING {:e} {:e} 1", h[0], hy);
    let _ = writeln!(s, "POINT_DATA {}", grid.n_nodes());
    let _ = writeln!(s, "VECTORS u double");
    for n in 0..grid.n_nodes() {
        let u = snap.u.node(n);
        let uy = if d == 2 { u[1] } else { 0.0 };
        let _ = writeln!(s, "{:e} {:e} 0", u[0], uy);
    }
    let _ = writeln!(s, "SCALARS v double 1\nLOOKUP_TABLE default");
    for v in &snap.v.values {
        let _ = writeln!(s, "{v:e}");
    }
    let _ = writeln!(s, "CELL_DATA {}", grid.n_cells());
    let _ = writeln!(s, "SCALARS stress_norm double 1\nLOOKUP_TABLE default");
    for t in &snap.stress_norm {
        let _ = writeln!(s, "{t:e}");
    }
    s
}

/// Writes `ledger.csv`, `metadata.json` and (optionally) VTK snapshots.
pub fn write_outputs(out: &SimOutput, dir: &Path, vtk: bool) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let csv_path = dir.join("ledger.csv");
    out.ledger.write_csv(fs::File::create(&csv_path)?)?;
    written.push(csv_path);
    if vtk {
        for snap in &out.snapshots {
            let p = dir.join(format!("snapshot_{:06}.vtk", snap.step));
            fs::write(&p, vtk_string(&out.grid, snap))?;
            written.push(p);
        }
    }
    let meta = dir.join("metadata.json");
    fs::write(&meta, serde_json::to_string_pretty(&out.metadata)?)?;
    written.push(meta);
    Ok(written)
}

/// Runs one simulation per value concurrently, one thread each.
pub fn sweep(cfg: &SimConfig, param: &str, values: &[String]) -> Vec<(String, Result<SimOutput>)> {
    std::thread::scope(|scope| {
        let handles: Vec<_> = values
            .iter()
            .map(|value| {
                let value = value.clone();
                scope.spawn(move || {
                    let out = cfg.set_param(param, &value).and_then(|c| run(&c));
                    (value, out)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("sweep worker panicked")).collect()
    })
}

/// The lumped load vector `l(t)` that [`run`] applies at time `t`.
pub fn assembled_load(cfg: &SimConfig, t: f64) -> Result<VectorField> {
    let problem = Problem::new(cfg)?;
    let ramp = if cfg.ramp_enabled() {
        Some(traction_on_edges(&problem.grid, &problem.initial_stress()?, None))
    } else {
        None
    };
    problem.load(t, ramp.as_deref())
}
