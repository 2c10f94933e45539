//! Pointwise constitutive algebra for the implicit Kelvin-Voigt relation
//! `ε(u_t + αu) = F(T)`.
//!
//! Every law implemented here is isotropic and radial: `F(T) = f(|T|) T / |T|`
//! for a scalar magnitude map `f`. Inverses, potentials and conjugates reduce
//! to one-dimensional problems on the magnitude, which is how they are
//! evaluated below.

use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors raised by constitutive evaluations.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConstitutiveError {
    #[error("non-finite tensor")]
    NonFinite,
    #[error("strain bound violated: |S| = {norm} >= 1")]
    StrainBoundViolated { norm: f64 },
    #[error("inverse magnitude did not converge (residual {residual:e})")]
    RootFind { residual: f64 },
    #[error("singular Jacobian at zero stress for p = {p} < 2")]
    SingularJacobian { p: f64 },
    #[error("invalid constitutive law: {0}")]
    InvalidLaw(String),
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
}

pub type Result<T> = std::result::Result<T, ConstitutiveError>;

/// Number of independent components of a symmetric `dim × dim` tensor.
pub const fn sym_len(dim: usize) -> usize {
    dim * (dim + 1) / 2
}

/// Index pairs of the packed storage, diagonal first.
fn voigt_pairs(dim: usize) -> &'static [(usize, usize)] {
    match dim {
        1 => &[(0, 0)],
        2 => &[(0, 0), (1, 1), (0, 1)],
        _ => &[(0, 0), (1, 1), (2, 2), (1, 2), (0, 2), (0, 1)],
    }
}

fn voigt_index(dim: usize, i: usize, j: usize) -> usize {
    let (i, j) = if i <= j { (i, j) } else { (j, i) };
    if i == j {
        return i;
    }
    match (dim, i, j) {
        (2, 0, 1) => 2,
        (3, 1, 2) => 3,
        (3, 0, 2) => 4,
        (3, 0, 1) => 5,
        _ => unreachable!("off-diagonal index ({i},{j}) for dim {dim}"),
    }
}

/// Symmetric `d × d` tensor with packed storage.
///
/// Components are stored in Voigt order (`xx, yy, zz, yz, xz, xy`, truncated
/// to the dimension). Only one copy of each off-diagonal entry is kept, so
/// the tensor is symmetric by construction.
#[derive(Clone, Copy, PartialEq)]
pub struct SymTensor {
    dim: usize,
    c: [f64; 6],
}

impl fmt::Debug for SymTensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SymTensor")
            .field("dim", &self.dim)
            .field("c", &self.components())
            .finish()
    }
}

impl SymTensor {
    pub fn zeros(dim: usize) -> Self {
        assert!((1..=3).contains(&dim), "tensor dimension must be 1, 2 or 3");
        SymTensor { dim, c: [0.0; 6] }
    }

    pub fn identity(dim: usize) -> Self {
        let mut t = Self::zeros(dim);
        for i in 0..dim {
            t.c[i] = 1.0;
        }
        t
    }

    /// A 1×1 tensor holding `value`.
    pub fn scalar(value: f64) -> Self {
        let mut t = Self::zeros(1);
        t.c[0] = value;
        t
    }

    /// Builds from packed Voigt components.
    pub fn from_voigt(dim: usize, components: &[f64]) -> Self {
        assert_eq!(components.len(), sym_len(dim));
        let mut t = Self::zeros(dim);
        t.c[..components.len()].copy_from_slice(components);
        t
    }

    /// Builds from a full matrix, averaging the off-diagonal pairs.
    pub fn from_matrix(dim: usize, m: &[[f64; 3]; 3]) -> Self {
        let mut t = Self::zeros(dim);
        for (idx, &(i, j)) in voigt_pairs(dim).iter().enumerate() {
            t.c[idx] = 0.5 * (m[i][j] + m[j][i]);
        }
        t
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[f64] {
        &self.c[..sym_len(self.dim)]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.c[voigt_index(self.dim, i, j)]
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        let idx = voigt_index(self.dim, i, j);
        self.c[idx] = value;
    }

    pub fn to_matrix(&self) -> [[f64; 3]; 3] {
        let mut m = [[0.0; 3]; 3];
        for i in 0..self.dim {
            for j in 0..self.dim {
                m[i][j] = self.get(i, j);
            }
        }
        m
    }

    /// Double contraction `A : B`.
    pub fn ddot(&self, other: &SymTensor) -> f64 {
        debug_assert_eq!(self.dim, other.dim);
        let n = sym_len(self.dim);
        let mut s = 0.0;
        for idx in 0..n {
            let w = if idx < self.dim { 1.0 } else { 2.0 };
            s += w * self.c[idx] * other.c[idx];
        }
        s
    }

    /// Frobenius norm.
    pub fn norm(&self) -> f64 {
        self.ddot(self).sqrt()
    }

    pub fn scale(&self, s: f64) -> SymTensor {
        let mut out = *self;
        out.c.iter_mut().for_each(|x| *x *= s);
        out
    }

    pub fn add(&self, other: &SymTensor) -> SymTensor {
        let mut out = *self;
        for (a, b) in out.c.iter_mut().zip(other.c.iter()) {
            *a += b;
        }
        out
    }

    pub fn sub(&self, other: &SymTensor) -> SymTensor {
        self.add(&other.scale(-1.0))
    }

    pub fn is_finite(&self) -> bool {
        self.components().iter().all(|x| x.is_finite())
    }

    /// Orthonormal coordinates (Mandel): off-diagonals scaled by √2 so the
    /// Euclidean norm equals the Frobenius norm.
    pub fn to_mandel(&self) -> Vec<f64> {
        self.components()
            .iter()
            .enumerate()
            .map(|(idx, &x)| if idx < self.dim { x } else { x * std::f64::consts::SQRT_2 })
            .collect()
    }

    pub fn from_mandel(dim: usize, x: &[f64]) -> SymTensor {
        let mut t = Self::zeros(dim);
        for (idx, &v) in x.iter().enumerate() {
            t.c[idx] = if idx < dim { v } else { v / std::f64::consts::SQRT_2 };
        }
        t
    }

    /// `Q T Qᵀ` for an orthogonal `Q`.
    pub fn rotate(&self, q: &[[f64; 3]; 3]) -> SymTensor {
        let t = self.to_matrix();
        let d = self.dim;
        let mut r = [[0.0; 3]; 3];
        for i in 0..d {
            for j in 0..d {
                let mut s = 0.0;
                for k in 0..d {
                    for l in 0..d {
                        s += q[i][k] * t[k][l] * q[j][l];
                    }
                }
                r[i][j] = s;
            }
        }
        SymTensor::from_matrix(d, &r)
    }
}

/// Fourth-order tensor `A_{ijkl}` stored densely.
#[derive(Debug, Clone, PartialEq)]
pub struct FourthOrderTensor {
    dim: usize,
    c: Vec<f64>,
}

impl FourthOrderTensor {
    pub fn zeros(dim: usize) -> Self {
        FourthOrderTensor { dim, c: vec![0.0; dim.pow(4)] }
    }

    /// `δ_ik δ_jl`.
    pub fn identity(dim: usize) -> Self {
        let mut a = Self::zeros(dim);
        for i in 0..dim {
            for j in 0..dim {
                a.set(i, j, i, j, 1.0);
            }
        }
        a
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    fn offset(&self, i: usize, j: usize, k: usize, l: usize) -> usize {
        let d = self.dim;
        ((i * d + j) * d + k) * d + l
    }

    pub fn get(&self, i: usize, j: usize, k: usize, l: usize) -> f64 {
        self.c[self.offset(i, j, k, l)]
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, l: usize, value: f64) {
        let o = self.offset(i, j, k, l);
        self.c[o] = value;
    }

    pub fn entries(&self) -> &[f64] {
        &self.c
    }

    pub fn max_abs_entry(&self) -> f64 {
        self.c.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
    }

    /// Bilinear form `(S, U)_A = Σ A_ijkl S_ij U_kl`.
    pub fn bilinear(&self, s: &SymTensor, u: &SymTensor) -> f64 {
        let d = self.dim;
        let mut acc = 0.0;
        for i in 0..d {
            for j in 0..d {
                for k in 0..d {
                    for l in 0..d {
                        acc += self.get(i, j, k, l) * s.get(i, j) * u.get(k, l);
                    }
                }
            }
        }
        acc
    }

    /// Restriction to symmetric tensors in Mandel coordinates.
    pub fn to_mandel(&self) -> DMatrix<f64> {
        let d = self.dim;
        let pairs = voigt_pairs(d);
        let m = pairs.len();
        let w = |idx: usize| if idx < d { 1.0 } else { std::f64::consts::SQRT_2 };
        DMatrix::from_fn(m, m, |a, b| {
            let (i, j) = pairs[a];
            let (k, l) = pairs[b];
            w(a) * w(b) * 0.5 * (self.get(i, j, k, l) + self.get(i, j, l, k))
        })
    }
}

/// The two model families: the p-growth setting (`b = v² + η`) and the
/// strain-limiting setting (`b = max{0,v}² + η`, rate-dependent phase field).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Section {
    Two,
    Three,
}

/// Response family with its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConstitutiveLaw {
    /// `F(T) = |T|^{p-2} T`.
    PGrowth { p: f64 },
    /// `F(T) = T / (1 + |T|^a)^{1/a}`.
    StrainLimiting { a: f64 },
    /// `F_n(T) = T / (1 + |T|^a)^{1/a} + T / n`.
    RegularizedStrainLimiting { a: f64, n: u32 },
}

const QUAD_TOL: f64 = 1e-10;

impl ConstitutiveLaw {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ConstitutiveLaw::PGrowth { p } if !(p.is_finite() && p > 1.0) => {
                Err(ConstitutiveError::InvalidLaw(format!("p must exceed 1, got {p}")))
            }
            ConstitutiveLaw::StrainLimiting { a } | ConstitutiveLaw::RegularizedStrainLimiting { a, .. }
                if !(a.is_finite() && a > 0.0) =>
            {
                Err(ConstitutiveError::InvalidLaw(format!("a must be positive, got {a}")))
            }
            ConstitutiveLaw::RegularizedStrainLimiting { n: 0, .. } => {
                Err(ConstitutiveError::InvalidLaw("n must be at least 1".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn is_strain_limiting(&self) -> bool {
        !matches!(self, ConstitutiveLaw::PGrowth { .. })
    }

    /// `1/n` for the regularized kind, zero otherwise.
    pub fn elliptic_weight(&self) -> f64 {
        match *self {
            ConstitutiveLaw::RegularizedStrainLimiting { n, .. } => 1.0 / n as f64,
            _ => 0.0,
        }
    }

    /// Magnitude map `f(r) = |F(T)|` for `|T| = r`.
    pub fn magnitude(&self, r: f64) -> f64 {
        match *self {
            ConstitutiveLaw::PGrowth { p } => {
                if r == 0.0 {
                    0.0
                } else {
                    r.powf(p - 1.0)
                }
            }
            ConstitutiveLaw::StrainLimiting { a } => limited(r, a),
            ConstitutiveLaw::RegularizedStrainLimiting { a, n } => limited(r, a) + r / n as f64,
        }
    }

    /// `f'(r)`; infinite at `r = 0` for p-growth with `p < 2`.
    pub fn magnitude_slope(&self, r: f64) -> f64 {
        match *self {
            ConstitutiveLaw::PGrowth { p } => {
                if r == 0.0 {
                    if p < 2.0 {
                        f64::INFINITY
                    } else if p == 2.0 {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    (p - 1.0) * r.powf(p - 2.0)
                }
            }
            ConstitutiveLaw::StrainLimiting { a } => limited_slope(r, a),
            ConstitutiveLaw::RegularizedStrainLimiting { a, n } => limited_slope(r, a) + 1.0 / n as f64,
        }
    }

    /// Solves `f(r) = s` for `r ≥ 0`.
    pub fn inverse_magnitude(&self, s: f64) -> Result<f64> {
        if !s.is_finite() || s < 0.0 {
            return Err(ConstitutiveError::NonFinite);
        }
        if s == 0.0 {
            return Ok(0.0);
        }
        match *self {
            ConstitutiveLaw::PGrowth { p } => Ok(s.powf(1.0 / (p - 1.0))),
            ConstitutiveLaw::StrainLimiting { a } => {
                if s >= 1.0 {
                    return Err(ConstitutiveError::StrainBoundViolated { norm: s });
                }
                Ok(s / (1.0 - s.powf(a)).powf(1.0 / a))
            }
            ConstitutiveLaw::RegularizedStrainLimiting { n, .. } => {
                let f = |r: f64| self.magnitude(r) - s;
                // f_n(r) ≥ r/n, so n·s brackets the root.
                let mut lo = 0.0;
                let mut hi = n as f64 * s + 1.0;
                while hi - lo > 1e-12 * hi {
                    let mid = 0.5 * (lo + hi);
                    if f(mid) > 0.0 {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                let mut r = 0.5 * (lo + hi);
                for _ in 0..2 {
                    let slope = self.magnitude_slope(r);
                    let next = r - f(r) / slope;
                    if next.is_finite() && next >= 0.0 {
                        r = next;
                    }
                }
                let residual = f(r).abs();
                if residual > 1e-10 * (1.0 + s) {
                    return Err(ConstitutiveError::RootFind { residual });
                }
                Ok(r)
            }
        }
    }

    /// Radial potential `φ(r) = ∫₀^r f(t) dt`.
    pub fn potential_radial(&self, r: f64) -> f64 {
        if r == 0.0 {
            return 0.0;
        }
        match *self {
            ConstitutiveLaw::PGrowth { p } => r.powf(p) / p,
            ConstitutiveLaw::StrainLimiting { a } => limited_integral(r, a),
            ConstitutiveLaw::RegularizedStrainLimiting { a, n } => limited_integral(r, a) + r * r / (2.0 * n as f64),
        }
    }

    /// Radial conjugate `φ*(s) = ∫₀^s f⁻¹(σ) dσ`; `+∞` for `s ≥ 1` in the
    /// unregularized strain-limiting case.
    ///
    /// Evaluated as `s r − φ(r)` with `r = f⁻¹(s)`, whose derivative in `s`
    /// is exactly `r`.
    pub fn conjugate_radial(&self, s: f64) -> f64 {
        if s == 0.0 {
            return 0.0;
        }
        match *self {
            ConstitutiveLaw::PGrowth { p } => {
                let q = p / (p - 1.0);
                s.powf(q) / q
            }
            _ => match self.inverse_magnitude(s) {
                Ok(r) => s * r - self.potential_radial(r),
                Err(_) => f64::INFINITY,
            },
        }
    }
}

/// `∫₀^r t (1 + t^a)^{-1/a} dt`, closed form for `a ∈ {1, 2}`.
fn limited_integral(r: f64, a: f64) -> f64 {
    if a == 1.0 {
        if r < 0.1 {
            // r − ln(1 + r) cancels for small r; use its alternating series.
            (2..24).rev().fold(0.0, |acc, k| acc + if k % 2 == 0 { 1.0 } else { -1.0 } * r.powi(k) / k as f64)
        } else {
            r - r.ln_1p()
        }
    } else if a == 2.0 {
        r * r / ((1.0 + r * r).sqrt() + 1.0)
    } else {
        adaptive_simpson(&|t| limited(t, a), 0.0, r, QUAD_TOL)
    }
}

fn limited(r: f64, a: f64) -> f64 {
    r / (1.0 + r.powf(a)).powf(1.0 / a)
}

fn limited_slope(r: f64, a: f64) -> f64 {
    (1.0 + r.powf(a)).powf(-1.0 - 1.0 / a)
}

/// Adaptive Simpson quadrature with absolute tolerance `tol`.
pub(crate) fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn recurse(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        recurse(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
            + recurse(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
    }
    if a == b {
        return 0.0;
    }
    let fa = f(a);
    let fb = f(b);
    let fm = f(0.5 * (a + b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    recurse(f, a, b, fa, fm, fb, whole, tol, 48)
}

fn check(t: &SymTensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(ConstitutiveError::NonFinite)
    }
}

/// `F(T)` (or `F_n(T)` for the regularized kind).
pub fn response(law: &ConstitutiveLaw, t: &SymTensor) -> Result<SymTensor> {
    check(t)?;
    let r = t.norm();
    if r == 0.0 {
        return Ok(SymTensor::zeros(t.dim()));
    }
    Ok(t.scale(law.magnitude(r) / r))
}

/// Inverse of [`response`]. The direction of the result is the direction of
/// `s`; only the magnitude is solved for.
pub fn inverse_response(law: &ConstitutiveLaw, s: &SymTensor, tol: f64) -> Result<SymTensor> {
    check(s)?;
    let mag = s.norm();
    if mag == 0.0 {
        return Ok(SymTensor::zeros(s.dim()));
    }
    let r = law.inverse_magnitude(mag)?;
    let t = s.scale(r / mag);
    let residual = (law.magnitude(r) - mag).abs();
    if residual > tol.max(1e-10) * (1.0 + mag) {
        return Err(ConstitutiveError::RootFind { residual });
    }
    Ok(t)
}

/// `φ(T)`.
pub fn potential(law: &ConstitutiveLaw, t: &SymTensor) -> Result<f64> {
    check(t)?;
    Ok(law.potential_radial(t.norm()))
}

/// `φ*(S)`; returns `+∞` outside the unit ball for the unregularized
/// strain-limiting law.
pub fn conjugate_potential(law: &ConstitutiveLaw, s: &SymTensor) -> Result<f64> {
    check(s)?;
    Ok(law.conjugate_radial(s.norm()))
}

/// Assembles `(f/r) δ_ik δ_jl + c T_ij T_kl` on the symmetric slice.
fn radial_tensor(t: &SymTensor, diag: f64, rank_one: f64) -> FourthOrderTensor {
    let d = t.dim();
    let mut a = FourthOrderTensor::zeros(d);
    for i in 0..d {
        for j in 0..d {
            for k in 0..d {
                for l in 0..d {
                    let id = if i == k && j == l { diag } else { 0.0 };
                    a.set(i, j, k, l, id + rank_one * t.get(i, j) * t.get(k, l));
                }
            }
        }
    }
    a
}

/// `∂F/∂T`.
///
/// For the strain-limiting kinds this is
/// `δ_ik δ_jl ((1+|T|^a)^{-1/a} + 1/n) − |T|^{a−2} T_ij T_kl / (1+|T|^a)^{1+1/a}`,
/// with the rank-one term taken as zero at `T = 0`.
pub fn response_jacobian(law: &ConstitutiveLaw, t: &SymTensor) -> Result<FourthOrderTensor> {
    check(t)?;
    let r = t.norm();
    match *law {
        ConstitutiveLaw::PGrowth { p } => {
            if r == 0.0 {
                if p < 2.0 {
                    return Err(ConstitutiveError::SingularJacobian { p });
                }
                let diag = if p == 2.0 { 1.0 } else { 0.0 };
                return Ok(radial_tensor(t, diag, 0.0));
            }
            let g = r.powf(p - 2.0);
            Ok(radial_tensor(t, g, (p - 2.0) * g / (r * r)))
        }
        ConstitutiveLaw::StrainLimiting { a } | ConstitutiveLaw::RegularizedStrainLimiting { a, .. } => {
            let w = law.elliptic_weight();
            let base = 1.0 + r.powf(a);
            let diag = base.powf(-1.0 / a) + w;
            let rank_one = if r == 0.0 {
                0.0
            } else {
                -r.powf(a - 2.0) / base.powf(1.0 + 1.0 / a)
            };
            Ok(radial_tensor(t, diag, rank_one))
        }
    }
}

/// Jacobian used inside Newton linearizations. For p-growth the factor
/// `|T|^{p−2}` is replaced by `(|T|² + μ²)^{(p−2)/2}`; other laws are exact.
pub fn response_jacobian_mollified(
    law: &ConstitutiveLaw,
    t: &SymTensor,
    mu: f64,
) -> Result<FourthOrderTensor> {
    match *law {
        ConstitutiveLaw::PGrowth { p } if p != 2.0 => {
            check(t)?;
            let r2 = t.ddot(t) + mu * mu;
            let g = r2.powf(0.5 * (p - 2.0));
            Ok(radial_tensor(t, g, (p - 2.0) * g / r2))
        }
        _ => response_jacobian(law, t),
    }
}

/// Damage-dependent stiffness weight `b(v)` and its derivative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub section: Section,
    pub eta: f64,
}

impl DegradationSpec {
    pub fn new(section: Section, eta: f64) -> Self {
        assert!(eta > 0.0, "stability parameter eta must be positive");
        DegradationSpec { section, eta }
    }

    /// Returns `(b(v), b'(v))`.
    pub fn eval(&self, v: f64) -> (f64, f64) {
        degradation(self, v)
    }

    /// Whether `b` has curvature at `v` (always for section two).
    pub fn is_curved(&self, v: f64) -> bool {
        match self.section {
            Section::Two => true,
            Section::Three => v > 0.0,
        }
    }
}

pub fn degradation(spec: &DegradationSpec, v: f64) -> (f64, f64) {
    let w = match spec.section {
        Section::Two => v,
        Section::Three => v.max(0.0),
    };
    (w * w + spec.eta, 2.0 * w)
}
