//! Structured-grid discretization.
//!
//! Displacements live on nodes and use bilinear (d = 2) or linear (d = 1)
//! shape functions with one-point quadrature at cell centers. Phase fields
//! are nodal scalars. Node `(i, j)` has index `j·(nx+1) + i`, cell `(i, j)`
//! has index `j·nx + i`, and vector dofs are interleaved (`node·d + comp`).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constitutive::{DegradationSpec, SymTensor};
use crate::linalg::CsrMatrix;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FieldError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("shape mismatch: expected {expected} values, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("H^k inner product supports k <= 3, got {0}")]
    UnsupportedOrder(usize),
    #[error("order {order} differences need at least {needed} nodes per axis, grid has {have}")]
    StencilTooWide { order: usize, needed: usize, have: usize },
}

pub type Result<T> = std::result::Result<T, FieldError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Face {
    Left,
    Right,
    Bottom,
    Top,
}

impl Face {
    pub const ALL: [Face; 4] = [Face::Left, Face::Right, Face::Bottom, Face::Top];

    fn slot(self) -> usize {
        match self {
            Face::Left => 0,
            Face::Right => 1,
            Face::Bottom => 2,
            Face::Top => 3,
        }
    }

    fn exists_in(self, dim: usize) -> bool {
        dim == 2 || matches!(self, Face::Left | Face::Right)
    }
}

/// Uniform tensor-product grid on `[0, Lx] (× [0, Ly])`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    dim: usize,
    extents: [usize; 2],
    spacing: [f64; 2],
    dirichlet: [bool; 4],
}

impl Grid {
    pub fn new(dim: usize, extents: &[usize], spacing: &[f64], dirichlet: &[Face]) -> Result<Self> {
        if !(1..=2).contains(&dim) {
            return Err(FieldError::InvalidGrid(format!("dimension must be 1 or 2, got {dim}")));
        }
        if extents.len() != dim || spacing.len() != dim {
            return Err(FieldError::InvalidGrid("extents/spacing length differs from dimension".into()));
        }
        if extents.iter().any(|&e| e < 2) {
            return Err(FieldError::InvalidGrid("at least 2 cells per axis required".into()));
        }
        if spacing.iter().any(|&h| !(h.is_finite() && h > 0.0)) {
            return Err(FieldError::InvalidGrid("spacing must be positive".into()));
        }
        let mut mask = [false; 4];
        for &f in dirichlet {
            if !f.exists_in(dim) {
                return Err(FieldError::InvalidGrid(format!("face {f:?} does not exist in 1D")));
            }
            mask[f.slot()] = true;
        }
        if !mask.iter().any(|&m| m) {
            return Err(FieldError::InvalidGrid("the Dirichlet boundary must be non-empty".into()));
        }
        let mut e = [extents[0], 0];
        let mut h = [spacing[0], 1.0];
        if dim == 2 {
            e[1] = extents[1];
            h[1] = spacing[1];
        }
        Ok(Grid { dim, extents: e, spacing: h, dirichlet: mask })
    }

    /// Square grid of `cells × cells` on the unit square (or unit interval).
    pub fn unit(dim: usize, cells: usize, dirichlet: &[Face]) -> Result<Self> {
        let h = 1.0 / cells as f64;
        Grid::new(dim, &vec![cells; dim], &vec![h; dim], dirichlet)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn extents(&self) -> &[usize] {
        &self.extents[..self.dim]
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing[..self.dim]
    }

    pub fn nodes_per_axis(&self) -> [usize; 2] {
        [self.extents[0] + 1, if self.dim == 2 { self.extents[1] + 1 } else { 1 }]
    }

    pub fn n_nodes(&self) -> usize {
        let [a, b] = self.nodes_per_axis();
        a * b
    }

    pub fn n_cells(&self) -> usize {
        if self.dim == 2 {
            self.extents[0] * self.extents[1]
        } else {
            self.extents[0]
        }
    }

    pub fn n_dofs(&self) -> usize {
        self.n_nodes() * self.dim
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing[..self.dim].iter().product()
    }

    pub fn measure(&self) -> f64 {
        self.cell_volume() * self.n_cells() as f64
    }

    pub fn node_index(&self, i: usize, j: usize) -> usize {
        j * (self.extents[0] + 1) + i
    }

    pub fn node_ij(&self, node: usize) -> (usize, usize) {
        let nx = self.extents[0] + 1;
        (node % nx, node / nx)
    }

    pub fn node_coords(&self, node: usize) -> [f64; 2] {
        let (i, j) = self.node_ij(node);
        [i as f64 * self.spacing[0], j as f64 * self.spacing[1] * (self.dim - 1) as f64]
    }

    pub fn cell_center(&self, cell: usize) -> [f64; 2] {
        let nx = self.extents[0];
        let (i, j) = (cell % nx, cell / nx);
        let y = if self.dim == 2 { (j as f64 + 0.5) * self.spacing[1] } else { 0.0 };
        [(i as f64 + 0.5) * self.spacing[0], y]
    }

    /// Cell nodes counter-clockwise from the lower-left corner.
    pub fn cell_nodes(&self, cell: usize) -> Vec<usize> {
        let nx = self.extents[0];
        let (i, j) = (cell % nx, cell / nx);
        if self.dim == 1 {
            vec![i, i + 1]
        } else {
            vec![
                self.node_index(i, j),
                self.node_index(i + 1, j),
                self.node_index(i + 1, j + 1),
                self.node_index(i, j + 1),
            ]
        }
    }

    /// Shape-function gradients at the cell center, in `cell_nodes` order.
    pub fn center_gradients(&self) -> Vec<[f64; 2]> {
        let [hx, hy] = self.spacing;
        if self.dim == 1 {
            vec![[-1.0 / hx, 0.0], [1.0 / hx, 0.0]]
        } else {
            let (ax, ay) = (0.5 / hx, 0.5 / hy);
            vec![[-ax, -ay], [ax, -ay], [ax, ay], [-ax, ay]]
        }
    }

    pub fn is_dirichlet_face(&self, face: Face) -> bool {
        self.dirichlet[face.slot()]
    }

    pub fn dirichlet_faces(&self) -> Vec<Face> {
        Face::ALL.into_iter().filter(|f| f.exists_in(self.dim) && self.is_dirichlet_face(*f)).collect()
    }

    pub fn neumann_faces(&self) -> Vec<Face> {
        Face::ALL.into_iter().filter(|f| f.exists_in(self.dim) && !self.is_dirichlet_face(*f)).collect()
    }

    /// Nodes on a face, in increasing coordinate order.
    pub fn face_nodes(&self, face: Face) -> Vec<usize> {
        let [nx, ny] = [self.extents[0], self.extents[1]];
        match (self.dim, face) {
            (1, Face::Left) => vec![0],
            (1, Face::Right) => vec![nx],
            (2, Face::Left) => (0..=ny).map(|j| self.node_index(0, j)).collect(),
            (2, Face::Right) => (0..=ny).map(|j| self.node_index(nx, j)).collect(),
            (2, Face::Bottom) => (0..=nx).map(|i| self.node_index(i, 0)).collect(),
            (2, Face::Top) => (0..=nx).map(|i| self.node_index(i, ny)).collect(),
            _ => Vec::new(),
        }
    }

    /// Per-node flag: node lies on Γ_D.
    pub fn dirichlet_nodes(&self) -> Vec<bool> {
        let mut mask = vec![false; self.n_nodes()];
        for face in self.dirichlet_faces() {
            for n in self.face_nodes(face) {
                mask[n] = true;
            }
        }
        mask
    }

    /// Per-dof flag: dof is unconstrained.
    pub fn free_dofs(&self) -> Vec<bool> {
        let d = self.dim;
        let nodes = self.dirichlet_nodes();
        (0..self.n_dofs()).map(|k| !nodes[k / d]).collect()
    }

    /// Trapezoidal nodal weights; also the row-sum lumped mass for unit density.
    pub fn nodal_weights(&self) -> Vec<f64> {
        let axis = |n_cells: usize, h: f64| -> Vec<f64> {
            (0..=n_cells)
                .map(|i| if i == 0 || i == n_cells { 0.5 * h } else { h })
                .collect()
        };
        let wx = axis(self.extents[0], self.spacing[0]);
        if self.dim == 1 {
            return wx;
        }
        let wy = axis(self.extents[1], self.spacing[1]);
        let mut w = Vec::with_capacity(self.n_nodes());
        for wyj in &wy {
            for wxi in &wx {
                w.push(wxi * wyj);
            }
        }
        w
    }

    /// Boundary segments of Γ_N with their outward normal and adjacent cell.
    pub fn neumann_edges(&self) -> Vec<BoundaryEdge> {
        let [nx, ny] = [self.extents[0], self.extents[1]];
        let [hx, hy] = self.spacing;
        let mut edges = Vec::new();
        for face in self.neumann_faces() {
            if self.dim == 1 {
                let (node, cell, normal) = match face {
                    Face::Left => (0, 0, -1.0),
                    _ => (nx, nx - 1, 1.0),
                };
                edges.push(BoundaryEdge { face, nodes: [node, node], length: 1.0, normal: [normal, 0.0], cell });
                continue;
            }
            match face {
                Face::Left | Face::Right => {
                    let (i, ci, nrm) = if face == Face::Left { (0, 0, -1.0) } else { (nx, nx - 1, 1.0) };
                    for j in 0..ny {
                        edges.push(BoundaryEdge {
                            face,
                            nodes: [self.node_index(i, j), self.node_index(i, j + 1)],
                            length: hy,
                            normal: [nrm, 0.0],
                            cell: j * nx + ci,
                        });
                    }
                }
                Face::Bottom | Face::Top => {
                    let (j, cj, nrm) = if face == Face::Bottom { (0, 0, -1.0) } else { (ny, ny - 1, 1.0) };
                    for i in 0..nx {
                        edges.push(BoundaryEdge {
                            face,
                            nodes: [self.node_index(i, j), self.node_index(i + 1, j)],
                            length: hx,
                            normal: [0.0, nrm],
                            cell: cj * nx + i,
                        });
                    }
                }
            }
        }
        edges
    }
}

/// One boundary segment (a single point in 1D, with unit measure).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryEdge {
    pub face: Face,
    pub nodes: [usize; 2],
    pub length: f64,
    pub normal: [f64; 2],
    pub cell: usize,
}

/// Nodal vector field with interleaved components.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    dim: usize,
    pub data: Vec<f64>,
}

impl VectorField {
    pub fn zeros(grid: &Grid) -> Self {
        VectorField { dim: grid.dim(), data: vec![0.0; grid.n_dofs()] }
    }

    pub fn from_vec(grid: &Grid, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.n_dofs() {
            return Err(FieldError::ShapeMismatch { expected: grid.n_dofs(), got: data.len() });
        }
        Ok(VectorField { dim: grid.dim(), data })
    }

    /// Samples `f(x)` at every node.
    pub fn from_fn(grid: &Grid, f: impl Fn([f64; 2]) -> [f64; 2]) -> Self {
        let d = grid.dim();
        let mut data = Vec::with_capacity(grid.n_dofs());
        for n in 0..grid.n_nodes() {
            let v = f(grid.node_coords(n));
            data.extend_from_slice(&v[..d]);
        }
        VectorField { dim: d, data }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn node(&self, n: usize) -> &[f64] {
        &self.data[n * self.dim..(n + 1) * self.dim]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Zeroes the entries on Γ_D nodes.
    pub fn zero_dirichlet(&mut self, grid: &Grid) {
        for (x, free) in self.data.iter_mut().zip(grid.free_dofs()) {
            if !free {
                *x = 0.0;
            }
        }
    }

    pub fn linear_combination(&self, a: f64, other: &VectorField, b: f64) -> VectorField {
        VectorField {
            dim: self.dim,
            data: self.data.iter().zip(&other.data).map(|(x, y)| a * x + b * y).collect(),
        }
    }
}

/// Nodal scalar field.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    pub values: Vec<f64>,
}

impl ScalarField {
    pub fn constant(grid: &Grid, value: f64) -> Self {
        ScalarField { values: vec![value; grid.n_nodes()] }
    }

    pub fn from_fn(grid: &Grid, f: impl Fn([f64; 2]) -> f64) -> Self {
        ScalarField { values: (0..grid.n_nodes()).map(|n| f(grid.node_coords(n))).collect() }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// One value per cell (one-point quadrature).
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureField<T> {
    pub values: Vec<T>,
}

impl<T> QuadratureField<T> {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

fn expect_len(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(FieldError::ShapeMismatch { expected, got })
    }
}

/// Strain of one cell from its nodal displacements.
pub(crate) fn cell_strain(grid: &Grid, grads: &[[f64; 2]], u: &[f64], cell: usize) -> SymTensor {
    let d = grid.dim();
    let nodes = grid.cell_nodes(cell);
    if d == 1 {
        let e = grads[0][0] * u[nodes[0]] + grads[1][0] * u[nodes[1]];
        return SymTensor::scalar(e);
    }
    let (mut exx, mut eyy, mut exy) = (0.0, 0.0, 0.0);
    for (a, &n) in nodes.iter().enumerate() {
        let (ux, uy) = (u[2 * n], u[2 * n + 1]);
        exx += grads[a][0] * ux;
        eyy += grads[a][1] * uy;
        exy += 0.5 * (grads[a][1] * ux + grads[a][0] * uy);
    }
    SymTensor::from_voigt(2, &[exx, eyy, exy])
}

/// Cell-center symmetric gradient `ε(u) = ½(∇u + ∇uᵀ)`.
pub fn sym_gradient(grid: &Grid, u: &VectorField) -> Result<QuadratureField<SymTensor>> {
    expect_len(grid.n_dofs(), u.len())?;
    let grads = grid.center_gradients();
    Ok(QuadratureField {
        values: (0..grid.n_cells()).map(|c| cell_strain(grid, &grads, &u.data, c)).collect(),
    })
}

/// Nodal forces `r` with `r·w = Σ_cells vol · σ : ε(w)`; Γ_D rows are zeroed.
pub fn internal_force(grid: &Grid, stress: &QuadratureField<SymTensor>) -> Result<VectorField> {
    expect_len(grid.n_cells(), stress.len())?;
    let d = grid.dim();
    let vol = grid.cell_volume();
    let grads = grid.center_gradients();
    let mut r = VectorField::zeros(grid);
    for (c, s) in stress.values.iter().enumerate() {
        for (a, &n) in grid.cell_nodes(c).iter().enumerate() {
            if d == 1 {
                r.data[n] += vol * s.get(0, 0) * grads[a][0];
            } else {
                let [gx, gy] = grads[a];
                r.data[2 * n] += vol * (s.get(0, 0) * gx + s.get(0, 1) * gy);
                r.data[2 * n + 1] += vol * (s.get(0, 1) * gx + s.get(1, 1) * gy);
            }
        }
    }
    r.zero_dirichlet(grid);
    Ok(r)
}

/// Strain-displacement matrix of a cell in Mandel coordinates, identical for
/// every cell of a uniform grid. Row `I` maps the cell dofs to Mandel
/// component `I`.
pub fn mandel_strain_matrix(grid: &Grid) -> Vec<Vec<f64>> {
    let grads = grid.center_gradients();
    if grid.dim() == 1 {
        return vec![vec![grads[0][0], grads[1][0]]];
    }
    let r2 = std::f64::consts::FRAC_1_SQRT_2;
    let mut b = vec![vec![0.0; 8]; 3];
    for (a, [gx, gy]) in grads.iter().enumerate() {
        b[0][2 * a] = *gx;
        b[1][2 * a + 1] = *gy;
        b[2][2 * a] = r2 * gy;
        b[2][2 * a + 1] = r2 * gx;
    }
    b
}

/// Global dof indices of a cell, matching the columns of [`mandel_strain_matrix`].
pub fn cell_dofs(grid: &Grid, cell: usize) -> Vec<usize> {
    let d = grid.dim();
    grid.cell_nodes(cell).iter().flat_map(|&n| (0..d).map(move |c| n * d + c)).collect()
}

/// Exact bilinear/linear stiffness `∫ ∇φ_i · ∇φ_j` on the nodal space.
pub fn laplacian_stiffness(grid: &Grid) -> CsrMatrix {
    let [hx, hy] = grid.spacing;
    let k1 = |h: f64, a: usize, b: usize| if a == b { 1.0 / h } else { -1.0 / h };
    let m1 = |h: f64, a: usize, b: usize| if a == b { h / 3.0 } else { h / 6.0 };
    let local: &[(usize, usize)] = if grid.dim() == 1 {
        &[(0, 0), (1, 0)]
    } else {
        &[(0, 0), (1, 0), (1, 1), (0, 1)]
    };
    let mut trip = Vec::new();
    for c in 0..grid.n_cells() {
        let nodes = grid.cell_nodes(c);
        for (a, &(ia, ja)) in local.iter().enumerate() {
            for (b, &(ib, jb)) in local.iter().enumerate() {
                let v = if grid.dim() == 1 {
                    k1(hx, ia, ib)
                } else {
                    k1(hx, ia, ib) * m1(hy, ja, jb) + m1(hx, ia, ib) * k1(hy, ja, jb)
                };
                trip.push((nodes[a], nodes[b], v));
            }
        }
    }
    CsrMatrix::from_triplets(grid.n_nodes(), &trip)
}

/// Smallest `k` with `k > d/2 + 1`.
pub fn default_hk_order(dim: usize) -> usize {
    dim / 2 + 2
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Forward difference of `order` along one axis at index `i`, shifted inward
/// when the stencil would leave the grid.
fn axis_stencil(last: usize, i: usize, order: usize, h: f64) -> Vec<(usize, f64)> {
    if order == 0 {
        return vec![(i, 1.0)];
    }
    let start = i.min(last - order);
    let scale = h.powi(order as i32);
    (0..=order)
        .map(|r| {
            let sign = if (order - r).is_multiple_of(2) { 1.0 } else { -1.0 };
            (start + r, sign * binomial(order, r) / scale)
        })
        .collect()
}

fn multi_indices(dim: usize, k: usize) -> Vec<[usize; 2]> {
    let mut out = Vec::new();
    for total in 0..=k {
        if dim == 1 {
            out.push([total, 0]);
        } else {
            for a in 0..=total {
                out.push([total - a, a]);
            }
        }
    }
    out
}

/// Stencil of `D^α` at every node.
fn difference_operator(grid: &Grid, alpha: [usize; 2]) -> Vec<Vec<(usize, f64)>> {
    let [npx, npy] = grid.nodes_per_axis();
    let [hx, hy] = grid.spacing;
    (0..grid.n_nodes())
        .map(|n| {
            let (i, j) = grid.node_ij(n);
            let sx = axis_stencil(npx - 1, i, alpha[0], hx);
            let sy = if grid.dim() == 2 { axis_stencil(npy - 1, j, alpha[1], hy) } else { vec![(0, 1.0)] };
            let mut row = Vec::with_capacity(sx.len() * sy.len());
            for &(jj, wy) in &sy {
                for &(ii, wx) in &sx {
                    row.push((grid.node_index(ii, jj), wx * wy));
                }
            }
            row
        })
        .collect()
}

fn check_order(grid: &Grid, k: usize) -> Result<()> {
    if k > 3 {
        return Err(FieldError::UnsupportedOrder(k));
    }
    let have = grid.nodes_per_axis()[..grid.dim()].iter().copied().min().unwrap();
    if have < k + 1 {
        return Err(FieldError::StencilTooWide { order: k, needed: k + 1, have });
    }
    Ok(())
}

/// Discrete `(v, w)_{k,2} = Σ_{|α|≤k} Σ_nodes ω_n D^α v D^α w` with
/// trapezoidal weights `ω_n` and inward-shifted forward differences.
pub fn hk_inner(grid: &Grid, k: usize, v: &ScalarField, w: &ScalarField) -> Result<f64> {
    check_order(grid, k)?;
    expect_len(grid.n_nodes(), v.len())?;
    expect_len(grid.n_nodes(), w.len())?;
    let weights = grid.nodal_weights();
    let mut total = 0.0;
    for alpha in multi_indices(grid.dim(), k) {
        let op = difference_operator(grid, alpha);
        for (n, row) in op.iter().enumerate() {
            let dv: f64 = row.iter().map(|&(m, c)| c * v.values[m]).sum();
            let dw: f64 = row.iter().map(|&(m, c)| c * w.values[m]).sum();
            total += weights[n] * dv * dw;
        }
    }
    Ok(total)
}

/// Gram matrix of [`hk_inner`].
pub fn hk_gram(grid: &Grid, k: usize) -> Result<CsrMatrix> {
    check_order(grid, k)?;
    let weights = grid.nodal_weights();
    let mut trip = Vec::new();
    for alpha in multi_indices(grid.dim(), k) {
        for (n, row) in difference_operator(grid, alpha).iter().enumerate() {
            for &(a, ca) in row {
                for &(b, cb) in row {
                    trip.push((a, b, weights[n] * ca * cb));
                }
            }
        }
    }
    Ok(CsrMatrix::from_triplets(grid.n_nodes(), &trip))
}

/// Face-lumped traction load: each Γ_N segment hands `g(t, x_node)·|edge|/2`
/// to its two end nodes. Γ_D rows are zero.
pub fn boundary_load(grid: &Grid, g: &dyn Fn(f64, [f64; 2]) -> [f64; 2], t: f64) -> VectorField {
    let d = grid.dim();
    let mut load = VectorField::zeros(grid);
    for edge in grid.neumann_edges() {
        let share = if d == 1 { 1.0 } else { 0.5 * edge.length };
        let nodes: &[usize] = if d == 1 { &edge.nodes[..1] } else { &edge.nodes };
        for &n in nodes {
            let gv = g(t, grid.node_coords(n));
            for c in 0..d {
                load.data[n * d + c] += share * gv[c];
            }
        }
    }
    load.zero_dirichlet(grid);
    load
}

/// Lumped load of a traction that is constant on each Γ_N segment, in the
/// order returned by [`Grid::neumann_edges`].
pub fn edge_traction_load(grid: &Grid, edges: &[BoundaryEdge], tractions: &[[f64; 2]]) -> VectorField {
    let d = grid.dim();
    let mut load = VectorField::zeros(grid);
    for (edge, tr) in edges.iter().zip(tractions) {
        let share = if d == 1 { 1.0 } else { 0.5 * edge.length };
        let nodes: &[usize] = if d == 1 { &edge.nodes[..1] } else { &edge.nodes };
        for &n in nodes {
            for c in 0..d {
                load.data[n * d + c] += share * tr[c];
            }
        }
    }
    load.zero_dirichlet(grid);
    load
}

/// Lumped body-force load `ω_n f(t, x_n)`.
pub fn body_load(grid: &Grid, f: &dyn Fn(f64, [f64; 2]) -> [f64; 2], t: f64) -> VectorField {
    let d = grid.dim();
    let weights = grid.nodal_weights();
    let mut load = VectorField::zeros(grid);
    for (n, w) in weights.iter().enumerate() {
        let fv = f(t, grid.node_coords(n));
        for c in 0..d {
            load.data[n * d + c] = w * fv[c];
        }
    }
    load.zero_dirichlet(grid);
    load
}

/// Per-cell degradation weight: the mean of `b(v)` over the cell nodes.
pub fn cell_degradation(grid: &Grid, spec: &DegradationSpec, v: &ScalarField) -> Vec<f64> {
    (0..grid.n_cells())
        .map(|c| {
            let nodes = grid.cell_nodes(c);
            nodes.iter().map(|&n| spec.eval(v.values[n]).0).sum::<f64>() / nodes.len() as f64
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid2(n: usize) -> Grid {
        Grid::unit(2, n, &[Face::Left]).unwrap()
    }

    #[test]
    fn grid_validation() {
        assert!(Grid::new(2, &[1, 4], &[0.1, 0.1], &[Face::Left]).is_err());
        assert!(Grid::new(2, &[4, 4], &[0.1, 0.1], &[]).is_err());
        assert!(Grid::new(1, &[4], &[0.1], &[Face::Top]).is_err());
        assert!(Grid::new(2, &[4, 4], &[0.1, -0.1], &[Face::Left]).is_err());
        let g = grid2(4);
        assert_eq!(g.n_nodes(), 25);
        assert_eq!(g.n_cells(), 16);
        assert_eq!(g.dirichlet_nodes().iter().filter(|&&d| d).count(), 5);
    }

    #[test]
    fn translation_has_zero_strain() {
        let g = grid2(5);
        let u = VectorField::from_fn(&g, |_| [0.3, -1.2]);
        for e in sym_gradient(&g, &u).unwrap().values {
            assert!(e.norm() < 1e-14);
        }
    }

    #[test]
    fn affine_fields_give_exact_strain() {
        let g = Grid::new(2, &[4, 3], &[0.25, 0.4], &[Face::Left]).unwrap();
        let u = VectorField::from_fn(&g, |[x, _]| [x, 0.0]);
        for e in sym_gradient(&g, &u).unwrap().values {
            assert!(e.sub(&SymTensor::from_voigt(2, &[1.0, 0.0, 0.0])).norm() < 1e-13);
        }
        let u = VectorField::from_fn(&g, |[x, y]| [0.5 * y, 0.5 * x]);
        for e in sym_gradient(&g, &u).unwrap().values {
            assert!(e.sub(&SymTensor::from_voigt(2, &[0.0, 0.0, 0.5])).norm() < 1e-13);
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let g = grid2(3);
        let bad = VectorField { dim: 2, data: vec![0.0; 3] };
        assert!(matches!(sym_gradient(&g, &bad), Err(FieldError::ShapeMismatch { .. })));
        let stress = QuadratureField { values: vec![SymTensor::zeros(2); 2] };
        assert!(internal_force(&g, &stress).is_err());
    }

    #[test]
    fn internal_force_is_adjoint_of_sym_gradient() {
        let g = Grid::new(2, &[5, 4], &[0.2, 0.3], &[Face::Left, Face::Bottom]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let vol = g.cell_volume();
        for _ in 0..100 {
            let stress = QuadratureField {
                values: (0..g.n_cells())
                    .map(|_| SymTensor::from_voigt(2, &[rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]))
                    .collect(),
            };
            let mut w = VectorField::from_vec(&g, (0..g.n_dofs()).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            w.zero_dirichlet(&g);
            let r = internal_force(&g, &stress).unwrap();
            let lhs: f64 = r.data.iter().zip(&w.data).map(|(a, b)| a * b).sum();
            let eps = sym_gradient(&g, &w).unwrap();
            let rhs: f64 = stress.values.iter().zip(&eps.values).map(|(s, e)| vol * s.ddot(e)).sum();
            assert!((lhs - rhs).abs() <= 1e-12 * rhs.abs().max(1.0));
        }
        let zero = QuadratureField { values: vec![SymTensor::zeros(2); g.n_cells()] };
        assert!(internal_force(&g, &zero).unwrap().data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn constant_stress_has_no_interior_resultant() {
        let g = grid2(6);
        let s = SymTensor::from_voigt(2, &[1.3, -0.4, 0.7]);
        let stress = QuadratureField { values: vec![s; g.n_cells()] };
        let r = internal_force(&g, &stress).unwrap();
        // Interior nodes are shared by four cells whose contributions cancel.
        for n in 0..g.n_nodes() {
            let (i, j) = g.node_ij(n);
            if i > 0 && j > 0 && i < 6 && j < 6 {
                assert!(r.node(n).iter().all(|x| x.abs() < 1e-13));
            }
        }
    }

    #[test]
    fn hk_inner_of_constants_is_area() {
        let g = Grid::new(2, &[8, 8], &[0.125, 0.125], &[Face::Left]).unwrap();
        let one = ScalarField::constant(&g, 1.0);
        assert!((hk_inner(&g, 0, &one, &one).unwrap() - 1.0).abs() < 1e-12);
        let c = ScalarField::constant(&g, 2.5);
        for k in 0..=3 {
            assert!((hk_inner(&g, k, &c, &c).unwrap() - 6.25).abs() < 1e-12);
        }
        assert!(matches!(hk_inner(&g, 4, &c, &c), Err(FieldError::UnsupportedOrder(4))));
    }

    #[test]
    fn hk1_of_linear_function_converges() {
        // ∫₀¹ x² + 1 dx = 4/3; trapezoid error is h²/6.
        let mut errs = Vec::new();
        for n in [16, 32, 64] {
            let g = Grid::unit(1, n, &[Face::Left]).unwrap();
            let x = ScalarField::from_fn(&g, |p| p[0]);
            errs.push((hk_inner(&g, 1, &x, &x).unwrap() - 4.0 / 3.0).abs());
        }
        assert!(errs[2] < 1e-4);
        assert!(errs[0] / errs[1] > 3.5 && errs[1] / errs[2] > 3.5, "{errs:?}");
    }

    #[test]
    fn gram_matches_inner_product_and_orders_are_nested() {
        let g = Grid::new(2, &[6, 5], &[0.2, 0.25], &[Face::Left]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = ScalarField { values: (0..g.n_nodes()).map(|_| rng.gen_range(-1.0..1.0)).collect() };
        let w = ScalarField { values: (0..g.n_nodes()).map(|_| rng.gen_range(-1.0..1.0)).collect() };
        let mut prev = 0.0;
        for k in 0..=3 {
            let gram = hk_gram(&g, k).unwrap();
            let a = hk_inner(&g, k, &v, &w).unwrap();
            let b = gram.bilinear(&v.values, &w.values);
            assert!((a - b).abs() < 1e-9 * a.abs().max(1.0));
            assert!((hk_inner(&g, k, &v, &w).unwrap() - hk_inner(&g, k, &w, &v).unwrap()).abs() < 1e-9);
            let vv = hk_inner(&g, k, &v, &v).unwrap();
            assert!(vv >= prev && vv > 0.0);
            prev = vv;
        }
    }

    #[test]
    fn boundary_load_totals() {
        let g = Grid::new(2, &[4, 5], &[0.25, 0.2], &[Face::Left]).unwrap();
        let zero = boundary_load(&g, &|_, _| [0.0, 0.0], 0.0);
        assert!(zero.data.iter().all(|&x| x == 0.0));

        // Constant traction on the whole Neumann boundary: right face (L = 1) and
        // top/bottom faces (L = 1 each).
        let load = boundary_load(&g, &|_, _| [2.0, 0.0], 0.0);
        let total: f64 = (0..g.n_nodes()).map(|n| load.node(n)[0]).sum();
        let edges = g.neumann_edges();
        let free_len: f64 = edges
            .iter()
            .map(|e| e.nodes.iter().filter(|&&n| !g.dirichlet_nodes()[n]).count() as f64 * 0.5 * e.length)
            .sum();
        assert!((total - 2.0 * free_len).abs() < 1e-12);

        // Linear traction on the right face only: trapezoid of g = 1 + 3y.
        let g1 = Grid::new(2, &[4, 5], &[0.25, 0.2], &[Face::Left, Face::Top, Face::Bottom]).unwrap();
        let load = boundary_load(&g1, &|_, x| [1.0 + 3.0 * x[1], 0.0], 0.0);
        let total: f64 = (0..g1.n_nodes()).map(|n| load.node(n)[0]).sum();
        // Direct summation: interior face nodes get h·g, corners are Dirichlet.
        let h = 0.2;
        let expected: f64 = (1..5).map(|j| h * (1.0 + 3.0 * j as f64 * h)).sum();
        assert!((total - expected).abs() < 1e-12);
    }

    #[test]
    fn discrete_korn_constant_is_finite() {
        let g = Grid::unit(2, 16, &[Face::Left]).unwrap();
        // Inverse power iteration on K = Σ vol BᵀB restricted to free dofs gives
        // λ_min and C_h = λ_min^{-1/2}.
        let b = mandel_strain_matrix(&g);
        let vol = g.cell_volume();
        let mut trip = Vec::new();
        for c in 0..g.n_cells() {
            let dofs = cell_dofs(&g, c);
            for (p, &gp) in dofs.iter().enumerate() {
                for (q, &gq) in dofs.iter().enumerate() {
                    let v: f64 = (0..b.len()).map(|i| b[i][p] * b[i][q]).sum();
                    trip.push((gp, gq, vol * v));
                }
            }
        }
        let k = CsrMatrix::from_triplets(g.n_dofs(), &trip);
        let free = g.free_dofs();
        let chol = crate::linalg::BandedCholesky::factor(&k, &free).expect("no kernel on free dofs");
        let mut x: Vec<f64> = free.iter().map(|&f| if f { 1.0 } else { 0.0 }).collect();
        let mut lambda = 0.0;
        for _ in 0..200 {
            let y = chol.solve(&x);
            let ny = crate::linalg::norm2(&y);
            lambda = crate::linalg::norm2(&x) / ny;
            x = y.iter().map(|v| v / ny).collect();
        }
        let c_h = 1.0 / lambda.sqrt();
        assert!(c_h.is_finite() && c_h > 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let mut u = VectorField::from_vec(&g, (0..g.n_dofs()).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            u.zero_dirichlet(&g);
            let eps = sym_gradient(&g, &u).unwrap();
            let e2: f64 = eps.values.iter().map(|e| vol * e.ddot(e)).sum();
            assert!(crate::linalg::norm2(&u.data) <= c_h * e2.sqrt() * (1.0 + 1e-9));
        }
    }

    #[test]
    fn default_order_exceeds_half_dimension_plus_one() {
        assert_eq!(default_hk_order(1), 2);
        assert_eq!(default_hk_order(2), 3);
    }
}
