//! Sparse symmetric storage and the two linear solvers used by the step
//! solvers: a banded Cholesky factorization and Jacobi-preconditioned CG.
//!
//! Both operate on the sub-system selected by a `free` mask; rows and
//! columns outside the mask are treated as eliminated.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("matrix is not positive definite (pivot {pivot:e} at row {row})")]
    NotPositiveDefinite { row: usize, pivot: f64 },
    #[error("conjugate gradients stalled after {iters} iterations (relative residual {residual:e})")]
    CgNotConverged { iters: usize, residual: f64 },
}

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl CsrMatrix {
    /// Builds an `n × n` matrix from `(row, col, value)` triplets, summing
    /// duplicates. Column order within a row is ascending.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut sorted: Vec<(usize, usize, f64)> = triplets.to_vec();
        sorted.sort_by_key(|t| (t.0, t.1));
        let mut row_ptr = vec![0; n + 1];
        let mut cols = Vec::with_capacity(sorted.len());
        let mut vals: Vec<f64> = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in sorted {
            if last == Some((r, c)) {
                *vals.last_mut().unwrap() += v;
            } else {
                cols.push(c);
                vals.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        CsrMatrix { n, row_ptr, cols, vals }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[range.clone()].iter().copied().zip(self.vals[range].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.cols[range.clone()].binary_search(&j) {
            Ok(pos) => self.vals[range.start + pos],
            Err(_) => 0.0,
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.mul_vec_into(x, &mut y);
        y
    }

    pub fn mul_vec_into(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            *yi = self.row(i).map(|(j, v)| v * x[j]).sum();
        }
    }

    /// `xᵀ A y`.
    pub fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        (0..self.n).map(|i| x[i] * self.row(i).map(|(j, v)| v * y[j]).sum::<f64>()).sum()
    }

    /// `self + s·other` on the union pattern.
    /// `xᵀAx` for a symmetric matrix with zero row sums, evaluated as
    /// `−½ Σ_{i≠j} a_ij (x_i − x_j)²`; exactly zero on constants.
    pub fn zero_sum_form(&self, x: &[f64]) -> f64 {
        let mut total = 0.0;
        for i in 0..self.dim() {
            for (j, a) in self.row(i) {
                if j != i {
                    total -= 0.5 * a * (x[i] - x[j]).powi(2);
                }
            }
        }
        total
    }

    pub fn add_scaled(&self, other: &CsrMatrix, s: f64) -> CsrMatrix {
        assert_eq!(self.n, other.n);
        let mut trip = Vec::with_capacity(self.nnz() + other.nnz());
        for i in 0..self.n {
            trip.extend(self.row(i).map(|(j, v)| (i, j, v)));
            trip.extend(other.row(i).map(|(j, v)| (i, j, s * v)));
        }
        CsrMatrix::from_triplets(self.n, &trip)
    }

    /// Adds `d` to the diagonal.
    pub fn add_diagonal(&self, d: &[f64]) -> CsrMatrix {
        let mut trip: Vec<(usize, usize, f64)> = Vec::with_capacity(self.nnz() + self.n);
        for i in 0..self.n {
            trip.extend(self.row(i).map(|(j, v)| (i, j, v)));
            trip.push((i, i, d[i]));
        }
        CsrMatrix::from_triplets(self.n, &trip)
    }

    pub fn scaled(&self, s: f64) -> CsrMatrix {
        let mut out = self.clone();
        out.vals.iter_mut().for_each(|v| *v *= s);
        out
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut m = vec![vec![0.0; self.n]; self.n];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, v) in self.row(i) {
                row[j] = v;
            }
        }
        m
    }
}

/// Cholesky factor of the masked sub-matrix in band storage.
#[derive(Debug, Clone)]
pub struct BandedCholesky {
    /// Global index of each reduced unknown.
    free: Vec<usize>,
    band: usize,
    /// Row `i` holds `L[i][i-band..=i]`.
    lower: Vec<f64>,
}

impl BandedCholesky {
    pub fn factor(a: &CsrMatrix, free_mask: &[bool]) -> Result<Self, LinalgError> {
        let n = a.dim();
        let mut reduced = vec![usize::MAX; n];
        let mut free = Vec::new();
        for i in 0..n {
            if free_mask[i] {
                reduced[i] = free.len();
                free.push(i);
            }
        }
        let nf = free.len();
        let mut band = 0;
        for (ri, &gi) in free.iter().enumerate() {
            for (gj, _) in a.row(gi) {
                if reduced[gj] != usize::MAX {
                    band = band.max(ri.abs_diff(reduced[gj]));
                }
            }
        }
        let w = band + 1;
        let mut lower = vec![0.0; nf * w];
        for (ri, &gi) in free.iter().enumerate() {
            for (gj, v) in a.row(gi) {
                let rj = reduced[gj];
                if rj != usize::MAX && rj <= ri {
                    lower[ri * w + band + rj - ri] = v;
                }
            }
        }
        for i in 0..nf {
            let j0 = i.saturating_sub(band);
            for j in j0..=i {
                let k0 = j0.max(j.saturating_sub(band));
                let mut s = lower[i * w + band + j - i];
                for k in k0..j {
                    s -= lower[i * w + band + k - i] * lower[j * w + band + k - j];
                }
                if i == j {
                    if s <= 0.0 || !s.is_finite() {
                        return Err(LinalgError::NotPositiveDefinite { row: free[i], pivot: s });
                    }
                    lower[i * w + band] = s.sqrt();
                } else {
                    lower[i * w + band + j - i] = s / lower[j * w + band];
                }
            }
        }
        Ok(BandedCholesky { free, band, lower })
    }

    /// Solves the masked system for a full-length right-hand side; entries
    /// outside the mask are returned as zero.
    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let nf = self.free.len();
        let w = self.band + 1;
        let b = self.band;
        let mut y: Vec<f64> = self.free.iter().map(|&g| rhs[g]).collect();
        for i in 0..nf {
            let mut s = y[i];
            for k in i.saturating_sub(b)..i {
                s -= self.lower[i * w + b + k - i] * y[k];
            }
            y[i] = s / self.lower[i * w + b];
        }
        for i in (0..nf).rev() {
            let mut s = y[i];
            for k in (i + 1)..nf.min(i + b + 1) {
                s -= self.lower[k * w + b + i - k] * y[k];
            }
            y[i] = s / self.lower[i * w + b];
        }
        let mut out = vec![0.0; rhs.len()];
        for (ri, &g) in self.free.iter().enumerate() {
            out[g] = y[ri];
        }
        out
    }

    pub fn bandwidth(&self) -> usize {
        self.band
    }
}

/// Jacobi-preconditioned conjugate gradients on the masked system.
pub fn cg_jacobi(
    a: &CsrMatrix,
    free_mask: &[bool],
    rhs: &[f64],
    rel_tol: f64,
    max_iters: usize,
) -> Result<Vec<f64>, LinalgError> {
    let n = a.dim();
    let diag = a.diagonal();
    let mask = |v: &mut [f64]| {
        for (x, &f) in v.iter_mut().zip(free_mask) {
            if !f {
                *x = 0.0;
            }
        }
    };
    let mut x = vec![0.0; n];
    let mut r: Vec<f64> = rhs.to_vec();
    mask(&mut r);
    let b_norm = dot(&r, &r).sqrt();
    if b_norm == 0.0 {
        return Ok(x);
    }
    let precond = |r: &[f64]| -> Vec<f64> {
        r.iter()
            .zip(&diag)
            .zip(free_mask)
            .map(|((ri, di), &f)| if f && *di != 0.0 { ri / di } else { 0.0 })
            .collect()
    };
    let mut z = precond(&r);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    for it in 0..max_iters {
        a.mul_vec_into(&p, &mut ap);
        mask(&mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            return Err(LinalgError::NotPositiveDefinite { row: it, pivot: pap });
        }
        let step = rz / pap;
        for i in 0..n {
            x[i] += step * p[i];
            r[i] -= step * ap[i];
        }
        if dot(&r, &r).sqrt() <= rel_tol * b_norm {
            return Ok(x);
        }
        z = precond(&r);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(LinalgError::CgNotConverged {
        iters: max_iters,
        residual: dot(&r, &r).sqrt() / b_norm,
    })
}

/// Which solver backs the Newton and active-set linear systems.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearSolver {
    /// Banded Cholesky in natural grid ordering.
    #[default]
    Direct,
    /// Jacobi-preconditioned CG with relative tolerance 1e-10; falls back to
    /// the direct factorization if it fails to converge.
    Cg,
}

pub fn solve_spd(
    method: LinearSolver,
    a: &CsrMatrix,
    free_mask: &[bool],
    rhs: &[f64],
) -> Result<Vec<f64>, LinalgError> {
    match method {
        LinearSolver::Direct => Ok(BandedCholesky::factor(a, free_mask)?.solve(rhs)),
        LinearSolver::Cg => {
            let n_free = free_mask.iter().filter(|&&f| f).count();
            cg_jacobi(a, free_mask, rhs, 1e-10, 10 * n_free.max(10))
                .or_else(|_| Ok(BandedCholesky::factor(a, free_mask)?.solve(rhs)))
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}
