//! Small dense symmetric matrices, a cyclic Jacobi eigensolver, and the two
//! batch kernels (cosine and Gaussian RBF) built on top of them.
//!
//! Batches here are tiny (a handful to a few dozen samples), so everything is
//! plain row-major `Vec<f64>` storage and sequential loops.

use crate::error::{Error, Result};

/// Largest matrix the eigensolver accepts.
pub const MAX_DIM: usize = 1024;

const MAX_SWEEPS: usize = 100;
const OFF_DIAGONAL_TOL: f64 = 1e-14;
const ASYMMETRY_TOL: f64 = 1e-9;

/// A real symmetric matrix, stored row-major.
///
/// Entries are exactly symmetric: construction averages `A` with its
/// transpose after checking the input was symmetric to within `1e-9`.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl SymMatrix {
    pub fn new(dim: usize, mut data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::DimensionMismatch {
                expected: 1,
                got: 0,
            });
        }
        if data.len() != dim * dim {
            return Err(Error::DimensionMismatch {
                expected: dim * dim,
                got: data.len(),
            });
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("matrix entries"));
        }
        let mut worst = 0.0f64;
        for i in 0..dim {
            for j in (i + 1)..dim {
                let (a, b) = (data[i * dim + j], data[j * dim + i]);
                worst = worst.max((a - b).abs());
                let mean = 0.5 * (a + b);
                data[i * dim + j] = mean;
                data[j * dim + i] = mean;
            }
        }
        if worst > ASYMMETRY_TOL {
            return Err(Error::Asymmetric(worst));
        }
        Ok(Self { dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.len();
        let mut data = Vec::with_capacity(dim * dim);
        for row in rows {
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(dim, data)
    }

    pub fn identity(dim: usize) -> Self {
        let mut data = vec![0.0; dim * dim];
        for i in 0..dim {
            data[i * dim + i] = 1.0;
        }
        Self { dim, data }
    }

    pub fn diagonal(values: &[f64]) -> Self {
        let dim = values.len();
        let mut data = vec![0.0; dim * dim];
        for (i, v) in values.iter().enumerate() {
            data[i * dim + i] = *v;
        }
        Self { dim, data }
    }

    /// Build from an already-symmetric generator `f(i, j)`; only the upper
    /// triangle is evaluated.
    pub(crate) fn from_upper(dim: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = vec![0.0; dim * dim];
        for i in 0..dim {
            for j in i..dim {
                let v = f(i, j);
                data[i * dim + j] = v;
                data[j * dim + i] = v;
            }
        }
        Self { dim, data }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            dim: self.dim,
            data: self.data.iter().map(|x| x * factor).collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Apply the same permutation to rows and columns: `out[i][j] = self[p[i]][p[j]]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self::from_upper(self.dim, |i, j| self.get(perm[i], perm[j]))
    }
}

/// Spectrum of a symmetric matrix.
///
/// Eigenvalues are sorted descending. Column `k` of the eigenvector matrix
/// pairs with `eigenvalues[k]` and has its first non-negligible component
/// made non-negative.
#[derive(Debug, Clone)]
pub struct EigenDecomposition {
    pub eigenvalues: Vec<f64>,
    /// Row-major `dim x dim`; eigenvectors are the columns.
    vectors: Vec<f64>,
    dim: usize,
}

impl EigenDecomposition {
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Component `row` of eigenvector `col`.
    pub fn vector_entry(&self, row: usize, col: usize) -> f64 {
        self.vectors[row * self.dim + col]
    }

    pub fn eigenvector(&self, col: usize) -> Vec<f64> {
        (0..self.dim).map(|r| self.vector_entry(r, col)).collect()
    }

    /// `U diag(f(λ)) Uᵀ`.
    pub fn matrix_function(&self, f: impl Fn(f64) -> f64) -> SymMatrix {
        let n = self.dim;
        let fl: Vec<f64> = self.eigenvalues.iter().map(|&l| f(l)).collect();
        SymMatrix::from_upper(n, |i, j| {
            (0..n)
                .map(|k| self.vectors[i * n + k] * fl[k] * self.vectors[j * n + k])
                .sum()
        })
    }

    pub fn reconstruct(&self) -> SymMatrix {
        self.matrix_function(|l| l)
    }

    /// `max |UᵀU - I|`.
    pub fn orthonormality_residual(&self) -> f64 {
        let n = self.dim;
        let mut worst = 0.0f64;
        for a in 0..n {
            for b in a..n {
                let dot: f64 = (0..n)
                    .map(|r| self.vectors[r * n + a] * self.vectors[r * n + b])
                    .sum();
                let target = if a == b { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        worst
    }
}

/// Cyclic (row-by-row) Jacobi eigendecomposition.
///
/// Converged when the off-diagonal Frobenius norm is at most
/// `1e-14 * ||A||_F`; gives up with [`Error::NonConvergence`] after 100 sweeps.
pub fn jacobi_eigh(m: &SymMatrix) -> Result<EigenDecomposition> {
    let n = m.dim;
    if n > MAX_DIM {
        return Err(Error::DimensionMismatch {
            expected: MAX_DIM,
            got: n,
        });
    }
    let mut a = m.data.clone();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }

    let threshold = OFF_DIAGONAL_TOL * m.frobenius_norm();
    let mut converged = false;
    let mut off = off_diagonal_norm(&a, n);
    for _ in 0..MAX_SWEEPS {
        if off <= threshold {
            converged = true;
            break;
        }
        for p in 0..n.saturating_sub(1) {
            for q in (p + 1)..n {
                rotate(&mut a, &mut v, n, p, q);
            }
        }
        off = off_diagonal_norm(&a, n);
    }
    if !converged && off > threshold {
        return Err(Error::NonConvergence {
            sweeps: MAX_SWEEPS,
            off_norm: off,
        });
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| a[y * n + y].total_cmp(&a[x * n + x]));
    let eigenvalues: Vec<f64> = order.iter().map(|&k| a[k * n + k]).collect();
    let mut vectors = vec![0.0; n * n];
    for (col, &k) in order.iter().enumerate() {
        let scale = v
            .iter()
            .skip(k)
            .step_by(n)
            .find(|x| x.abs() > 1e-12)
            .map_or(1.0, |x| x.signum());
        for r in 0..n {
            vectors[r * n + col] = scale * v[r * n + k];
        }
    }
    Ok(EigenDecomposition {
        eigenvalues,
        vectors,
        dim: n,
    })
}

fn off_diagonal_norm(a: &[f64], n: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a[i * n + j] * a[i * n + j];
            }
        }
    }
    s.sqrt()
}

/// One Jacobi rotation annihilating `a[p][q]`; keeps `a` exactly symmetric.
fn rotate(a: &mut [f64], v: &mut [f64], n: usize, p: usize, q: usize) {
    let apq = a[p * n + q];
    if apq == 0.0 {
        return;
    }
    let app = a[p * n + p];
    let aqq = a[q * n + q];
    let theta = (aqq - app) / (2.0 * apq);
    let t = if theta.abs() > 1e150 {
        0.5 / theta
    } else {
        theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
    };
    let c = 1.0 / (t * t + 1.0).sqrt();
    let s = t * c;

    for r in 0..n {
        if r == p || r == q {
            continue;
        }
        let arp = a[r * n + p];
        let arq = a[r * n + q];
        let new_rp = c * arp - s * arq;
        let new_rq = s * arp + c * arq;
        a[r * n + p] = new_rp;
        a[p * n + r] = new_rp;
        a[r * n + q] = new_rq;
        a[q * n + r] = new_rq;
    }
    a[p * n + p] = app - t * apq;
    a[q * n + q] = aqq + t * apq;
    a[p * n + q] = 0.0;
    a[q * n + p] = 0.0;

    for r in 0..n {
        let vrp = v[r * n + p];
        let vrq = v[r * n + q];
        v[r * n + p] = c * vrp - s * vrq;
        v[r * n + q] = s * vrp + c * vrq;
    }
}

/// `B` flattened context vectors of length `ND` (one per sample).
///
/// Every vector is finite with a strictly positive Euclidean norm.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextBatch {
    batch_size: usize,
    vector_dim: usize,
    data: Vec<f64>,
}

impl ContextBatch {
    pub fn new(batch_size: usize, vector_dim: usize, data: Vec<f64>) -> Result<Self> {
        Self::validate_shape(batch_size, vector_dim, &data)?;
        for i in 0..batch_size {
            let row = &data[i * vector_dim..(i + 1) * vector_dim];
            if row.iter().all(|x| *x == 0.0) {
                return Err(Error::DegenerateVector { index: i });
            }
        }
        Ok(Self {
            batch_size,
            vector_dim,
            data,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(rows.len(), dim, data)
    }

    fn validate_shape(batch_size: usize, vector_dim: usize, data: &[f64]) -> Result<()> {
        if batch_size == 0 {
            return Err(Error::TooFewSamples { needed: 1, got: 0 });
        }
        if vector_dim == 0 {
            return Err(Error::DimensionMismatch {
                expected: 1,
                got: 0,
            });
        }
        if data.len() != batch_size * vector_dim {
            return Err(Error::DimensionMismatch {
                expected: batch_size * vector_dim,
                got: data.len(),
            });
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("context vectors"));
        }
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn vector_dim(&self) -> usize {
        self.vector_dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.vector_dim..(i + 1) * self.vector_dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.vector_dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.rows().map(<[f64]>::to_vec).collect()
    }

    pub fn permuted(&self, perm: &[usize]) -> Self {
        let data = perm.iter().flat_map(|&p| self.row(p).iter().copied()).collect();
        Self {
            batch_size: self.batch_size,
            vector_dim: self.vector_dim,
            data,
        }
    }

    pub fn norms(&self) -> Vec<f64> {
        self.rows().map(norm).collect()
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine-similarity Gram matrix. Diagonal is exactly 1; off-diagonal
/// entries are clamped to `[-1, 1]`.
pub fn cosine_kernel(batch: &ContextBatch) -> Result<SymMatrix> {
    let norms = batch.norms();
    if let Some(index) = norms.iter().position(|n| *n == 0.0) {
        return Err(Error::DegenerateVector { index });
    }
    let squares: Vec<f64> = batch.rows().map(|r| dot(r, r)).collect();
    Ok(SymMatrix::from_upper(batch.batch_size(), |i, j| {
        if i == j {
            return 1.0;
        }
        // sqrt(|a|²|b|²) keeps identical rows at exactly 1.
        let product = squares[i] * squares[j];
        let denom = if product.is_finite() && product > 0.0 {
            product.sqrt()
        } else {
            norms[i] * norms[j]
        };
        (dot(batch.row(i), batch.row(j)) / denom).clamp(-1.0, 1.0)
    }))
}

/// Gaussian RBF Gram matrix `exp(-|x_i - x_j|^2 / (2 h^2))`.
pub fn rbf_kernel(points: &ContextBatch, bandwidth: f64) -> Result<SymMatrix> {
    rbf_gram(points.as_slice(), points.vector_dim(), bandwidth)
}

/// RBF kernel over raw row-major points. Unlike [`ContextBatch`], points at
/// the origin are allowed here.
pub fn rbf_gram(points: &[f64], dim: usize, bandwidth: f64) -> Result<SymMatrix> {
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "bandwidth must be positive, got {bandwidth}"
        )));
    }
    if dim == 0 || points.is_empty() || points.len() % dim != 0 {
        return Err(Error::DimensionMismatch {
            expected: dim.max(1),
            got: points.len(),
        });
    }
    if points.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("points"));
    }
    let n = points.len() / dim;
    let denom = 2.0 * bandwidth * bandwidth;
    Ok(SymMatrix::from_upper(n, |i, j| {
        if i == j {
            return 1.0;
        }
        let d2: f64 = points[i * dim..(i + 1) * dim]
            .iter()
            .zip(&points[j * dim..(j + 1) * dim])
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        (-d2 / denom).exp()
    }))
}
