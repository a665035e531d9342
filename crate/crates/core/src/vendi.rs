//! Vendi score and the von Neumann entropy of a batch kernel, plus the
//! closed-form gradient of that entropy with respect to the raw context
//! vectors under the cosine kernel.
//!
//! With `K̃ = K / B` and spectrum `λ`, the entropy is `H = -Σ λ log λ`
//! (natural log, `0 log 0 = 0`) and the Vendi score is `exp(H)`, which ranges
//! from 1 (all samples identical) to `B` (mutually orthogonal samples).
//!
//! Because `H = tr f(K̃)` with `f(x) = -x log x`, its derivative is the matrix
//! function `f'(K̃) = -(log K̃ + I)`. That identity holds for repeated
//! eigenvalues too, so no divided-difference correction is involved.

use crate::error::{Error, Result};
use crate::linalg::{cosine_kernel, dot, jacobi_eigh, rbf_kernel, ContextBatch, SymMatrix};

/// Spectrum floor applied before taking logarithms.
pub const EIGEN_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiversityValue {
    /// von Neumann entropy in nats.
    pub entropy: f64,
    /// `exp(entropy)`: the effective number of distinct samples.
    pub score: f64,
}

/// Which similarity kernel to build over a batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KernelKind {
    Cosine,
    Rbf { bandwidth: f64 },
}

impl KernelKind {
    pub fn gram(&self, batch: &ContextBatch) -> Result<SymMatrix> {
        match *self {
            KernelKind::Cosine => cosine_kernel(batch),
            KernelKind::Rbf { bandwidth } => rbf_kernel(batch, bandwidth),
        }
    }
}

fn entropy_term(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        0.0
    } else {
        -lambda * lambda.max(EIGEN_FLOOR).ln()
    }
}

/// Entropy and Vendi score of a unit-diagonal kernel matrix.
pub fn entropy_and_score(k: &SymMatrix) -> Result<DiversityValue> {
    let b = k.dim();
    let eig = jacobi_eigh(&k.scaled(1.0 / b as f64))?;
    let entropy = eig
        .eigenvalues
        .iter()
        .map(|&l| entropy_term(l))
        .sum::<f64>()
        .max(0.0);
    Ok(DiversityValue {
        entropy,
        score: entropy.exp(),
    })
}

/// Convenience: cosine-kernel Vendi of a batch.
pub fn batch_diversity(batch: &ContextBatch) -> Result<DiversityValue> {
    entropy_and_score(&cosine_kernel(batch)?)
}

/// Per-sample gradient of the batch entropy under the cosine kernel, laid out
/// like the input batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchGradient {
    batch_size: usize,
    vector_dim: usize,
    data: Vec<f64>,
}

impl BatchGradient {
    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn vector_dim(&self) -> usize {
        self.vector_dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.vector_dim..(i + 1) * self.vector_dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row_norms(&self) -> Vec<f64> {
        self.data
            .chunks_exact(self.vector_dim)
            .map(|r| dot(r, r).sqrt())
            .collect()
    }

    pub fn max_row_norm(&self) -> f64 {
        self.row_norms().into_iter().fold(0.0, f64::max)
    }
}

/// Exact gradient of the cosine-kernel entropy with respect to every raw
/// (unnormalised) context vector.
///
/// The chain is `∂H/∂K = -(log K̃ + I) / B` (spectrum floored at
/// [`EIGEN_FLOOR`]) followed by the cosine-kernel Jacobian
/// `∂K_ij/∂c_i = c_j/(|c_i||c_j|) - K_ij c_i/|c_i|²`, counted twice for the
/// symmetric pair. Diagonal entries are constant and drop out.
pub fn entropy_gradient(batch: &ContextBatch) -> Result<BatchGradient> {
    let b = batch.batch_size();
    if b < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: b });
    }
    let nd = batch.vector_dim();
    let k = cosine_kernel(batch)?;
    let scale = 1.0 / b as f64;
    let eig = jacobi_eigh(&k.scaled(scale))?;
    let dk = eig.matrix_function(|l| -(l.max(EIGEN_FLOOR).ln() + 1.0) * scale);
    let norms = batch.norms();

    let mut data = vec![0.0; b * nd];
    for i in 0..b {
        let ci = batch.row(i);
        let out = &mut data[i * nd..(i + 1) * nd];
        for j in 0..b {
            if j == i {
                continue;
            }
            let w = 2.0 * dk.get(i, j);
            let along = 1.0 / (norms[i] * norms[j]);
            let radial = k.get(i, j) / (norms[i] * norms[i]);
            for ((o, xj), xi) in out.iter_mut().zip(batch.row(j)).zip(ci) {
                *o += w * (along * xj - radial * xi);
            }
        }
    }
    if data.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("entropy gradient"));
    }
    Ok(BatchGradient {
        batch_size: b,
        vector_dim: nd,
        data,
    })
}

/// Mean Vendi score over all unordered pairs of a precomputed kernel.
/// Always lies in `[1, 2]`.
pub fn average_pair_vendi_from_kernel(k: &SymMatrix) -> Result<f64> {
    let b = k.dim();
    if b < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: b });
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..b {
        for j in (i + 1)..b {
            let kij = k.get(i, j);
            let pair = SymMatrix::new(2, vec![1.0, kij, kij, 1.0])?;
            total += entropy_and_score(&pair)?.score;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// Mean Vendi score over all unordered pairs of samples.
pub fn average_pair_vendi(points: &ContextBatch, kernel: KernelKind) -> Result<f64> {
    average_pair_vendi_from_kernel(&kernel.gram(points)?)
}
