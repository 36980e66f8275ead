use thiserror::Error;

/// Errors surfaced by the numerical core.
#[derive(Debug, Error)]
pub enum LoodError {
    #[error("matrix is not positive semidefinite (jitter escalation exhausted at delta={max_jitter:e})")]
    NotPsd { max_jitter: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("Schur complement is singular: alpha={alpha:e} <= 1e-14")]
    SingularSchur { alpha: f64 },
    #[error("zero-norm input passed to a kernel that normalizes inputs")]
    ZeroNormInput,
    #[error("kernel triple violates Cauchy-Schwarz beyond tolerance: k_qx^2={kqx2:e} > k_qq*k_xx={prod:e}")]
    QuadratureDivergence { kqx2: f64, prod: f64 },
    #[error("kernel not differentiable at this point: {0}")]
    NonDifferentiablePoint(String),
    #[error("variance ratio is defined only for single-query posteriors (got q={0})")]
    MultiQueryUnsupported(usize),
    #[error("kernel is not in the homogeneous family required for scale-invariance checks")]
    NonHomogeneousKernel,
    #[error("kernel fails regularity conditions: max|K(x,x)-1|={diag:e}, max self-gradient norm={grad:e}")]
    KernelNotRegular { diag: f64, grad: f64 },
    #[error("kernel midpoint alpha_min={0:e} is not positive")]
    AlphaNonpositive(f64),
    #[error("depth-limit estimation unstable: successive estimates differ by {0:e} > 1e-6")]
    LimitEstimationUnstable(f64),
    #[error("empty dataset")]
    EmptyDataset,
}

pub type Result<T> = std::result::Result<T, LoodError>;
