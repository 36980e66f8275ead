//! Positive-semidefinite linear algebra: jittered Cholesky factorization, solves,
//! log-determinants, and the rank-one block-inverse update reused by leave-one-out
//! posteriors.
//!
//! All solves go through Cholesky; the only explicitly assembled inverse is
//! [`block_inverse`], which exists precisely because the leave-one-out update has a
//! closed four-block form worth exposing.

use nalgebra::{DMatrix, DVector};

use crate::error::{LoodError, Result};

/// Jitter escalation schedule for Cholesky of near-singular PSD matrices.
///
/// Multipliers are applied to the largest diagonal entry; the first multiplier that
/// lets the factorization succeed wins.
#[derive(Debug, Clone)]
pub struct JitterPolicy {
    pub multipliers: Vec<f64>,
}

impl Default for JitterPolicy {
    fn default() -> Self {
        JitterPolicy {
            multipliers: vec![0.0, 1e-10, 1e-9, 1e-8],
        }
    }
}

/// Lower-triangular Cholesky factor of `M + delta*I`, with the applied jitter.
#[derive(Debug, Clone)]
pub struct CholFactor {
    pub l: DMatrix<f64>,
    /// Jitter actually added to the diagonal (absolute, not the multiplier).
    pub jitter: f64,
}

impl CholFactor {
    pub fn dim(&self) -> usize {
        self.l.nrows()
    }
}

/// Symmetrize as (M + M^T)/2 to undo floating-point drift.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Cholesky with jitter escalation: tries `M + delta*I` for each
/// `delta = multiplier * max_diag` in order.
pub fn cholesky_psd(m: &DMatrix<f64>, policy: &JitterPolicy) -> Result<CholFactor> {
    assert_eq!(m.nrows(), m.ncols(), "cholesky_psd requires a square matrix");
    let max_diag = m.diagonal().iter().cloned().fold(0.0f64, f64::max).max(1.0);
    let mut last_jitter = 0.0;
    for &mult in &policy.multipliers {
        let delta = mult * max_diag;
        last_jitter = delta;
        let mut jm = m.clone();
        for i in 0..jm.nrows() {
            jm[(i, i)] += delta;
        }
        if let Some(chol) = nalgebra::Cholesky::new(jm) {
            return Ok(CholFactor {
                l: chol.l(),
                jitter: delta,
            });
        }
    }
    Err(LoodError::NotPsd {
        max_jitter: last_jitter,
    })
}

/// Solve (L L^T) X = B for X.
pub fn solve_psd(factor: &CholFactor, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if b.nrows() != factor.dim() {
        return Err(LoodError::DimensionMismatch(format!(
            "solve_psd: factor dim {} vs rhs rows {}",
            factor.dim(),
            b.nrows()
        )));
    }
    let y = factor
        .l
        .clone()
        .solve_lower_triangular(b)
        .expect("lower-triangular solve cannot fail on a valid factor");
    let x = factor
        .l
        .transpose()
        .solve_upper_triangular(&y)
        .expect("upper-triangular solve cannot fail on a valid factor");
    Ok(x)
}

/// Solve for a single right-hand-side vector.
pub fn solve_psd_vec(factor: &CholFactor, b: &DVector<f64>) -> Result<DVector<f64>> {
    let bm = DMatrix::from_column_slice(b.len(), 1, b.as_slice());
    let x = solve_psd(factor, &bm)?;
    Ok(DVector::from_column_slice(x.as_slice()))
}

/// log det(M + delta*I) = 2 * sum log L_ii.
pub fn logdet_psd(factor: &CholFactor) -> f64 {
    2.0 * factor.l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Inverse of [[A, b], [b^T, c]] assembled from A^{-1} by the four-block closed form,
/// with Schur complement `alpha = c - b^T A^{-1} b`.
#[derive(Debug, Clone)]
pub struct BlockInverseResult {
    pub inverse: DMatrix<f64>,
    pub alpha: f64,
}

pub fn block_inverse(a_inv: &DMatrix<f64>, b: &DVector<f64>, c: f64) -> Result<BlockInverseResult> {
    let n = a_inv.nrows();
    if a_inv.ncols() != n || b.len() != n {
        return Err(LoodError::DimensionMismatch(format!(
            "block_inverse: A_inv {}x{}, b len {}",
            n,
            a_inv.ncols(),
            b.len()
        )));
    }
    let ainv_b = a_inv * b;
    let alpha = c - b.dot(&ainv_b);
    if alpha <= 1e-14 {
        return Err(LoodError::SingularSchur { alpha });
    }
    let mut inv = DMatrix::zeros(n + 1, n + 1);
    // Top-left: A^{-1} + alpha^{-1} A^{-1} b b^T A^{-1}
    let outer = &ainv_b * ainv_b.transpose() / alpha;
    inv.view_mut((0, 0), (n, n)).copy_from(&(a_inv + outer));
    // Off-diagonal: -alpha^{-1} A^{-1} b
    for i in 0..n {
        inv[(i, n)] = -ainv_b[i] / alpha;
        inv[(n, i)] = -ainv_b[i] / alpha;
    }
    inv[(n, n)] = 1.0 / alpha;
    Ok(BlockInverseResult {
        inverse: inv,
        alpha,
    })
}

/// True iff plain Cholesky succeeds or the minimum eigenvalue is >= -tol.
pub fn is_psd(m: &DMatrix<f64>, tol: f64) -> bool {
    if m.nrows() != m.ncols() {
        return false;
    }
    if nalgebra::Cholesky::new(m.clone()).is_some() {
        return true;
    }
    let eig = symmetrize(m).symmetric_eigen();
    eig.eigenvalues.iter().all(|&ev| ev >= -tol)
}
