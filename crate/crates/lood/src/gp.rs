//! GP regression posteriors at query sets, for a dataset and its
//! leave-one(-group)-out counterpart, with block-inverse reuse in the single-record
//! case.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::kernels::{kernel_matrix, KernelSpec};
use crate::linalg::{
    block_inverse, cholesky_psd, solve_psd, solve_psd_vec, symmetrize, JitterPolicy,
};

/// Training data with label-noise variance.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// n x d feature matrix.
    pub features: DMatrix<f64>,
    pub labels: DVector<f64>,
    pub noise_variance: f64,
}

impl Dataset {
    pub fn new(features: DMatrix<f64>, labels: DVector<f64>, noise_variance: f64) -> Self {
        assert_eq!(features.nrows(), labels.len());
        assert!(noise_variance >= 1e-12, "noise variance too small");
        assert!(labels.iter().all(|y| y.is_finite()), "labels must be finite");
        Dataset {
            features,
            labels,
            noise_variance,
        }
    }

    pub fn n(&self) -> usize {
        self.features.nrows()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }
}

/// Base dataset D plus differing record(s) S; the larger dataset D' is D with S
/// appended.
#[derive(Debug, Clone)]
pub struct LeaveOneOutPair {
    pub base: Dataset,
    pub differing: DMatrix<f64>,
    pub differing_labels: DVector<f64>,
}

impl LeaveOneOutPair {
    pub fn new(base: Dataset, differing: DMatrix<f64>, differing_labels: DVector<f64>) -> Self {
        assert!(differing.nrows() >= 1, "need at least one differing record");
        assert_eq!(differing.nrows(), differing_labels.len());
        if base.n() > 0 {
            assert_eq!(base.dim(), differing.ncols());
        }
        LeaveOneOutPair {
            base,
            differing,
            differing_labels,
        }
    }

    pub fn s(&self) -> usize {
        self.differing.nrows()
    }

    /// The concatenated dataset D' = D ∪ S.
    pub fn augmented(&self) -> Dataset {
        let n = self.base.n();
        let s = self.s();
        let d = self.differing.ncols();
        let mut feats = DMatrix::zeros(n + s, d);
        if n > 0 {
            feats.view_mut((0, 0), (n, d)).copy_from(&self.base.features);
        }
        feats.view_mut((n, 0), (s, d)).copy_from(&self.differing);
        let mut labels = DVector::zeros(n + s);
        for i in 0..n {
            labels[i] = self.base.labels[i];
        }
        for i in 0..s {
            labels[n + i] = self.differing_labels[i];
        }
        Dataset::new(feats, labels, self.base.noise_variance)
    }
}

/// Posterior mean and covariance of the GP predictions at a query set.
#[derive(Debug, Clone)]
pub struct PosteriorSummary {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl PosteriorSummary {
    pub fn query_count(&self) -> usize {
        self.mean.len()
    }
}

/// mu = K_QD (K_DD + s2 I)^{-1} y_D, Sigma = K_QQ - K_QD (K_DD + s2 I)^{-1} K_DQ.
/// An empty dataset yields the prior (mu = 0, Sigma = K_QQ).
pub fn posterior(spec: &KernelSpec, data: &Dataset, queries: &DMatrix<f64>) -> Result<PosteriorSummary> {
    let q = queries.nrows();
    let k_qq = kernel_matrix(spec, queries, queries)?;
    if data.n() == 0 {
        return Ok(PosteriorSummary {
            mean: DVector::zeros(q),
            covariance: symmetrize(&k_qq),
        });
    }
    let k_qd = kernel_matrix(spec, queries, &data.features)?;
    let m = regularized_gram(spec, data)?;
    let factor = cholesky_psd(&m, &JitterPolicy::default())?;
    let alpha = solve_psd_vec(&factor, &data.labels)?;
    let mean = &k_qd * alpha;
    let minv_kdq = solve_psd(&factor, &k_qd.transpose())?;
    let covariance = symmetrize(&(k_qq - &k_qd * minv_kdq));
    Ok(PosteriorSummary { mean, covariance })
}

/// K_DD + noise * I.
pub fn regularized_gram(spec: &KernelSpec, data: &Dataset) -> Result<DMatrix<f64>> {
    let mut m = kernel_matrix(spec, &data.features, &data.features)?;
    for i in 0..data.n() {
        m[(i, i)] += data.noise_variance;
    }
    Ok(m)
}

/// Posteriors for D and D' at the same query set. For a single differing record the
/// D' solve reuses the factorization of M_D through the closed-form block inverse;
/// larger groups get a fresh factorization.
pub fn loo_pair_posteriors(
    spec: &KernelSpec,
    pair: &LeaveOneOutPair,
    queries: &DMatrix<f64>,
) -> Result<(PosteriorSummary, PosteriorSummary)> {
    let post_d = posterior(spec, &pair.base, queries)?;
    let augmented = pair.augmented();
    let post_dp = if pair.s() == 1 && pair.base.n() > 0 {
        let n = pair.base.n();
        let m_d = regularized_gram(spec, &pair.base)?;
        let factor = cholesky_psd(&m_d, &JitterPolicy::default())?;
        let m_d_inv = solve_psd(&factor, &DMatrix::identity(n, n))?;
        let s_row = &pair.differing;
        let b = DVector::from_column_slice(
            kernel_matrix(spec, &pair.base.features, s_row)?.as_slice(),
        );
        let s_vec = DVector::from(s_row.row(0).transpose());
        let c = crate::kernels::kernel_eval(spec, &s_vec, &s_vec)? + pair.base.noise_variance;
        let block = block_inverse(&symmetrize(&m_d_inv), &b, c)?;
        let k_qdp = kernel_matrix(spec, queries, &augmented.features)?;
        let mean = &k_qdp * (&block.inverse * &augmented.labels);
        let k_qq = kernel_matrix(spec, queries, queries)?;
        let covariance = symmetrize(&(k_qq - &k_qdp * (&block.inverse * k_qdp.transpose())));
        PosteriorSummary { mean, covariance }
    } else {
        posterior(spec, &augmented, queries)?
    };
    Ok((post_d, post_dp))
}

/// Direct two-solve path, used as the self-consistency oracle for the block route.
pub fn loo_pair_posteriors_direct(
    spec: &KernelSpec,
    pair: &LeaveOneOutPair,
    queries: &DMatrix<f64>,
) -> Result<(PosteriorSummary, PosteriorSummary)> {
    let post_d = posterior(spec, &pair.base, queries)?;
    let post_dp = posterior(spec, &pair.augmented(), queries)?;
    Ok((post_d, post_dp))
}

/// i.i.d. draws from N(mu, Sigma) via the jittered Cholesky of Sigma;
/// deterministic given the seed.
pub fn predictive_sample(
    summary: &PosteriorSummary,
    count: usize,
    seed: u64,
) -> Result<DMatrix<f64>> {
    assert!(count >= 1);
    let q = summary.query_count();
    let factor = cholesky_psd(&summary.covariance, &JitterPolicy::default())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = DMatrix::zeros(count, q);
    for i in 0..count {
        let z = DVector::from_fn(q, |_, _| StandardNormal.sample(&mut rng));
        let draw = &summary.mean + &factor.l * z;
        out.row_mut(i).copy_from(&draw.transpose());
    }
    Ok(out)
}
