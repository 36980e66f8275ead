//! Kernel families (RBF, linear, correlation, fully-connected NNGP), Gram matrices,
//! query-gradients, and the regularity checks (unit diagonal, vanishing
//! self-gradient) that make the differing point a stationary query.

pub mod nngp;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{LoodError, Result};
use crate::linalg::symmetrize;
pub use nngp::{Activation, KernelTriple};

/// Smooth correlation profile g applied to the input cosine; g(1) = 1 keeps the
/// diagonal at 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum CorrelationProfile {
    /// g(t) = exp(rate * (t - 1)).
    Exp { rate: f64 },
}

impl CorrelationProfile {
    fn eval(&self, t: f64) -> f64 {
        match self {
            CorrelationProfile::Exp { rate } => (rate * (t - 1.0)).exp(),
        }
    }

    fn deriv(&self, t: f64) -> f64 {
        match self {
            CorrelationProfile::Exp { rate } => rate * (rate * (t - 1.0)).exp(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum KernelSpec {
    /// K(x, x') = exp(-||x - x'||^2 / (2 l)); the profile takes the squared
    /// distance, so K(x, x) = 1 always.
    Rbf { length: f64 },
    /// K(x, x') = scale * <x, x'> / d.
    Linear { scale: f64 },
    /// K(x, x') = g(cos(x, x')).
    Correlation { profile: CorrelationProfile },
    NngpFc {
        depth: usize,
        activation: Activation,
        weight_variance: f64,
        bias_variance: f64,
        normalize_inputs: bool,
    },
}

impl KernelSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            KernelSpec::Rbf { length } => *length > 0.0,
            KernelSpec::Linear { scale } => *scale > 0.0,
            KernelSpec::Correlation { .. } => true,
            KernelSpec::NngpFc {
                depth,
                weight_variance,
                bias_variance,
                ..
            } => *depth >= 1 && *weight_variance > 0.0 && *bias_variance >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(LoodError::DimensionMismatch(
                "invalid kernel hyperparameters".into(),
            ))
        }
    }

    /// Kernels that are positively homogeneous in their inputs, eligible for the
    /// scale-invariance check.
    pub fn is_homogeneous(&self) -> bool {
        match self {
            KernelSpec::Linear { .. } => true,
            KernelSpec::NngpFc {
                activation,
                bias_variance,
                normalize_inputs,
                ..
            } => *activation == Activation::ReLU && *bias_variance == 0.0 && !normalize_inputs,
            _ => false,
        }
    }
}

fn cosine(x: &DVector<f64>, z: &DVector<f64>) -> Result<f64> {
    let nx = x.norm();
    let nz = z.norm();
    if nx == 0.0 || nz == 0.0 {
        return Err(LoodError::ZeroNormInput);
    }
    Ok((x.dot(z) / (nx * nz)).clamp(-1.0, 1.0))
}

fn nngp_base_triple(
    spec: &KernelSpec,
    q: &DVector<f64>,
    x: &DVector<f64>,
) -> Result<KernelTriple> {
    let (KernelSpec::NngpFc {
        weight_variance: sw2,
        bias_variance: sb2,
        normalize_inputs,
        ..
    },) = (spec,)
    else {
        unreachable!()
    };
    if *normalize_inputs {
        // Inputs projected to the unit sphere; the layer-0 kernel is the cosine
        // itself, which gives a unit diagonal at every depth under critical
        // parameters and makes the differing point a stationary query.
        Ok(KernelTriple {
            k_qq: 1.0,
            k_qx: cosine(q, x)?,
            k_xx: 1.0,
        })
    } else {
        let d = q.len() as f64;
        Ok(KernelTriple {
            k_qq: sb2 + sw2 * q.dot(q) / d,
            k_qx: sb2 + sw2 * q.dot(x) / d,
            k_xx: sb2 + sw2 * x.dot(x) / d,
        })
    }
}

pub fn kernel_eval(spec: &KernelSpec, x: &DVector<f64>, z: &DVector<f64>) -> Result<f64> {
    if x.len() != z.len() {
        return Err(LoodError::DimensionMismatch(format!(
            "kernel_eval: {} vs {}",
            x.len(),
            z.len()
        )));
    }
    match spec {
        KernelSpec::Rbf { length } => {
            let d2 = (x - z).norm_squared();
            Ok((-d2 / (2.0 * length)).exp())
        }
        KernelSpec::Linear { scale } => Ok(scale * x.dot(z) / x.len() as f64),
        KernelSpec::Correlation { profile } => Ok(profile.eval(cosine(x, z)?)),
        KernelSpec::NngpFc {
            depth,
            activation,
            weight_variance,
            bias_variance,
            ..
        } => {
            let mut base = nngp_base_triple(spec, x, z)?;
            // Fix the computation order so eval is exactly symmetric in (x, z):
            // the cross moment is symmetric analytically, but the quadrature
            // whitening is not order-invariant at the last bit.
            if base.k_qq > base.k_xx {
                std::mem::swap(&mut base.k_qq, &mut base.k_xx);
            }
            let t = nngp::depth_recursion(*activation, *weight_variance, *bias_variance, base, *depth)?;
            Ok(t.k_qx)
        }
    }
}

pub fn kernel_matrix(
    spec: &KernelSpec,
    xs: &DMatrix<f64>,
    zs: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    if xs.ncols() != zs.ncols() {
        return Err(LoodError::DimensionMismatch(format!(
            "kernel_matrix: {} vs {} columns",
            xs.ncols(),
            zs.ncols()
        )));
    }
    let square = std::ptr::eq(xs, zs) || xs == zs;
    let mut out = DMatrix::zeros(xs.nrows(), zs.nrows());
    for i in 0..xs.nrows() {
        let xi = DVector::from(xs.row(i).transpose());
        let j0 = if square { i } else { 0 };
        for j in j0..zs.nrows() {
            let zj = DVector::from(zs.row(j).transpose());
            let v = kernel_eval(spec, &xi, &zj)?;
            out[(i, j)] = v;
            if square {
                out[(j, i)] = v;
            }
        }
    }
    if square {
        out = symmetrize(&out);
    }
    Ok(out)
}

/// dK(q, x)/dq.
pub fn kernel_grad_q(spec: &KernelSpec, q: &DVector<f64>, x: &DVector<f64>) -> Result<DVector<f64>> {
    if q.len() != x.len() {
        return Err(LoodError::DimensionMismatch(format!(
            "kernel_grad_q: {} vs {}",
            q.len(),
            x.len()
        )));
    }
    match spec {
        KernelSpec::Rbf { length } => {
            let k = kernel_eval(spec, q, x)?;
            Ok((x - q) * (k / length))
        }
        KernelSpec::Linear { scale } => Ok(x * (*scale / q.len() as f64)),
        KernelSpec::Correlation { profile } => {
            let nq = q.norm();
            let nx = x.norm();
            if nq == 0.0 || nx == 0.0 {
                return Err(LoodError::ZeroNormInput);
            }
            let t = (q.dot(x) / (nq * nx)).clamp(-1.0, 1.0);
            // d cos / dq = x/(|q||x|) - cos * q/|q|^2
            let dcos = x / (nq * nx) - q * (t / (nq * nq));
            Ok(dcos * profile.deriv(t))
        }
        KernelSpec::NngpFc {
            depth,
            activation,
            weight_variance: sw2,
            bias_variance: sb2,
            normalize_inputs,
        } => {
            let base = nngp_base_triple(spec, q, x)?;
            let g = nngp::depth_recursion_grad(*activation, *sw2, *sb2, base, *depth)?;
            if *normalize_inputs {
                // Base k_qq == 1 identically, so only the cosine channel varies.
                let nq = q.norm();
                let nx = x.norm();
                let t = base.k_qx;
                let dcos = x / (nq * nx) - q * (t / (nq * nq));
                Ok(dcos * g.dc_dc)
            } else {
                let d = q.len() as f64;
                let d_base_qq = q * (2.0 * sw2 / d);
                let d_base_qx = x * (sw2 / d);
                Ok(d_base_qq * g.dc_da + d_base_qx * g.dc_dc)
            }
        }
    }
}

/// Total derivative of the diagonal: d/dq [K(q, q)].
///
/// Zero for every kernel with a constant diagonal (RBF, correlation, normalized
/// NNGP); nonzero for Linear and unnormalized NNGP. Kept as a dedicated path so
/// the NNGP case never evaluates the arccosine derivative at correlation exactly 1.
pub fn kernel_self_grad(spec: &KernelSpec, q: &DVector<f64>) -> Result<DVector<f64>> {
    match spec {
        KernelSpec::Rbf { .. } | KernelSpec::Correlation { .. } => Ok(DVector::zeros(q.len())),
        KernelSpec::Linear { scale } => Ok(q * (2.0 * scale / q.len() as f64)),
        KernelSpec::NngpFc {
            depth,
            activation,
            weight_variance: sw2,
            bias_variance: sb2,
            normalize_inputs,
        } => {
            if *normalize_inputs {
                return Ok(DVector::zeros(q.len()));
            }
            // Diagonal-only chain: k_qq^{l+1} = sb2 + sw2 E[phi(u)^2].
            let d = q.len() as f64;
            let mut a = sb2 + sw2 * q.dot(q) / d;
            let mut da = 1.0;
            for _ in 0..*depth {
                let m = nngp::self_moment(*activation, a);
                da *= sw2 * m.d_da;
                a = sb2 + sw2 * m.value;
            }
            Ok(q * (2.0 * sw2 / d * da))
        }
    }
}

/// Regularity of a kernel for the stationarity theorem: unit diagonal and
/// vanishing self-gradient, both taken as sups over the sample set.
#[derive(Debug, Clone, Serialize)]
pub struct RegularityReport {
    pub max_diag_deviation: f64,
    pub max_self_grad_norm: f64,
    pub passed: bool,
}

pub fn check_regularity(
    spec: &KernelSpec,
    samples: &[DVector<f64>],
    tol: f64,
) -> Result<RegularityReport> {
    assert!(!samples.is_empty(), "check_regularity needs samples");
    let mut max_diag = 0.0f64;
    let mut max_grad = 0.0f64;
    for x in samples {
        let k = kernel_eval(spec, x, x)?;
        max_diag = max_diag.max((k - 1.0).abs());
        max_grad = max_grad.max(kernel_self_grad(spec, x)?.norm());
    }
    Ok(RegularityReport {
        max_diag_deviation: max_diag,
        max_self_grad_norm: max_grad,
        passed: max_diag <= tol && max_grad <= tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::is_psd;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(d: usize, rng: &mut impl Rng) -> DVector<f64> {
        DVector::from_fn(d, |_, _| rng.gen::<f64>() * 2.0 - 1.0)
    }

    fn fd_grad_q(spec: &KernelSpec, q: &DVector<f64>, x: &DVector<f64>) -> DVector<f64> {
        let h = 1e-5 * (1.0 + q.norm());
        DVector::from_fn(q.len(), |i, _| {
            let mut qp = q.clone();
            let mut qm = q.clone();
            qp[i] += h;
            qm[i] -= h;
            (kernel_eval(spec, &qp, x).unwrap() - kernel_eval(spec, &qm, x).unwrap()) / (2.0 * h)
        })
    }

    #[test]
    fn rbf_trivial_values() {
        let spec = KernelSpec::Rbf { length: 1.0 };
        let x = DVector::from_column_slice(&[0.3, -0.2]);
        assert!((kernel_eval(&spec, &x, &x).unwrap() - 1.0).abs() < 1e-15);
        let z = DVector::from_column_slice(&[0.3 + 2.0f64.sqrt(), -0.2]);
        assert!((kernel_eval(&spec, &x, &z).unwrap() - (-1.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn nngp_orthogonal_one_layer() {
        let spec = KernelSpec::NngpFc {
            depth: 1,
            activation: Activation::ReLU,
            weight_variance: 2.0,
            bias_variance: 0.0,
            normalize_inputs: true,
        };
        let q = DVector::from_column_slice(&[1.0, 0.0]);
        let x = DVector::from_column_slice(&[0.0, 1.0]);
        let k = kernel_eval(&spec, &q, &x).unwrap();
        assert!((k - 1.0 / std::f64::consts::PI).abs() < 1e-13);
    }

    #[test]
    fn nngp_one_layer_monte_carlo_cross_check() {
        // E[relu(u) relu(v)] for orthogonal unit inputs, against sampling.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 1_000_000usize;
        let mut acc = 0.0;
        for _ in 0..n {
            let u: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
            let v: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
            acc += u.max(0.0) * v.max(0.0);
        }
        let mc = 2.0 * acc / n as f64; // sigma_w^2 = 2
        assert!((mc - 1.0 / std::f64::consts::PI).abs() < 3e-3, "mc {mc}");
    }

    #[test]
    fn gram_matrices_are_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let specs = vec![
            KernelSpec::Rbf { length: 1.0 },
            KernelSpec::Linear { scale: 1.0 },
            KernelSpec::Correlation {
                profile: CorrelationProfile::Exp { rate: 2.0 },
            },
            KernelSpec::NngpFc {
                depth: 3,
                activation: Activation::ReLU,
                weight_variance: 2.0,
                bias_variance: 0.0,
                normalize_inputs: true,
            },
        ];
        for spec in &specs {
            for _ in 0..50 {
                let n = 2 + rng.gen_range(0..11);
                let x = DMatrix::from_fn(n, 3, |_, _| rng.gen::<f64>() * 2.0 - 1.0 + 0.01);
                let k = kernel_matrix(spec, &x, &x).unwrap();
                assert!(is_psd(&k, 1e-8), "{spec:?}");
            }
        }
    }

    #[test]
    fn nngp_normalized_diagonal_constant() {
        let spec = KernelSpec::NngpFc {
            depth: 4,
            activation: Activation::ReLU,
            weight_variance: 2.0,
            bias_variance: 0.0,
            normalize_inputs: true,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = DMatrix::from_fn(5, 3, |_, _| rng.gen::<f64>() + 0.1);
        let k = kernel_matrix(&spec, &x, &x).unwrap();
        for i in 1..5 {
            assert!((k[(i, i)] - k[(0, 0)]).abs() < 1e-10);
        }
    }

    #[test]
    fn grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let specs = vec![
            KernelSpec::Rbf { length: 0.7 },
            KernelSpec::Linear { scale: 1.3 },
            KernelSpec::Correlation {
                profile: CorrelationProfile::Exp { rate: 1.5 },
            },
            KernelSpec::NngpFc {
                depth: 3,
                activation: Activation::ReLU,
                weight_variance: 2.0,
                bias_variance: 0.0,
                normalize_inputs: true,
            },
            KernelSpec::NngpFc {
                depth: 2,
                activation: Activation::GeLU,
                weight_variance: 2.19,
                bias_variance: 0.067,
                normalize_inputs: false,
            },
        ];
        for spec in &specs {
            for _ in 0..20 {
                let q = rand_vec(3, &mut rng) + DVector::from_element(3, 0.1);
                let x = rand_vec(3, &mut rng) + DVector::from_element(3, 0.15);
                let g = kernel_grad_q(spec, &q, &x).unwrap();
                let fd = fd_grad_q(spec, &q, &x);
                let rel = (g.clone() - &fd).norm() / (1e-12 + fd.norm());
                assert!(rel <= 1e-4, "{spec:?}: rel {rel}");
            }
        }
    }

    #[test]
    fn rbf_self_gradient_vanishes() {
        let spec = KernelSpec::Rbf { length: 1.0 };
        let x = DVector::from_column_slice(&[0.4, 1.2]);
        assert!(kernel_grad_q(&spec, &x, &x).unwrap().norm() < 1e-15);
    }

    #[test]
    fn linear_gradient_is_x_over_d() {
        let spec = KernelSpec::Linear { scale: 1.0 };
        let q = DVector::from_column_slice(&[5.0, -1.0]);
        let x = DVector::from_column_slice(&[2.0, 4.0]);
        let g = kernel_grad_q(&spec, &q, &x).unwrap();
        assert!((g - x / 2.0).norm() < 1e-15);
    }

    #[test]
    fn rbf_hand_gradient() {
        let spec = KernelSpec::Rbf { length: 1.0 };
        let x = DVector::from_column_slice(&[0.0, 0.0]);
        let q = DVector::from_column_slice(&[1.0, 0.0]);
        let g = kernel_grad_q(&spec, &q, &x).unwrap();
        let expect = DVector::from_column_slice(&[-(-0.5f64).exp(), 0.0]);
        assert!((g - expect).norm() < 1e-12);
    }

    #[test]
    fn self_grad_matches_fd_diag() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let specs = vec![
            KernelSpec::Linear { scale: 1.0 },
            KernelSpec::NngpFc {
                depth: 3,
                activation: Activation::ReLU,
                weight_variance: 2.0,
                bias_variance: 0.0,
                normalize_inputs: false,
            },
            KernelSpec::NngpFc {
                depth: 2,
                activation: Activation::GeLU,
                weight_variance: 2.19,
                bias_variance: 0.067,
                normalize_inputs: false,
            },
        ];
        for spec in &specs {
            let q = rand_vec(3, &mut rng) + DVector::from_element(3, 0.2);
            let g = kernel_self_grad(spec, &q).unwrap();
            let h = 1e-5 * (1.0 + q.norm());
            let fd = DVector::from_fn(3, |i, _| {
                let mut qp = q.clone();
                let mut qm = q.clone();
                qp[i] += h;
                qm[i] -= h;
                (kernel_eval(spec, &qp, &qp).unwrap() - kernel_eval(spec, &qm, &qm).unwrap())
                    / (2.0 * h)
            });
            let rel = (g - &fd).norm() / (1e-12 + fd.norm());
            assert!(rel < 1e-4, "{spec:?}: rel {rel}");
        }
    }

    #[test]
    fn regularity_reports() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let samples: Vec<_> = (0..10)
            .map(|_| rand_vec(3, &mut rng) + DVector::from_element(3, 0.3))
            .collect();
        let rbf = check_regularity(&KernelSpec::Rbf { length: 1.0 }, &samples, 1e-10).unwrap();
        assert!(rbf.passed);
        let corr = check_regularity(
            &KernelSpec::Correlation {
                profile: CorrelationProfile::Exp { rate: 2.0 },
            },
            &samples,
            1e-10,
        )
        .unwrap();
        assert!(corr.passed);
        let lin = check_regularity(&KernelSpec::Linear { scale: 1.0 }, &samples, 1e-10).unwrap();
        assert!(!lin.passed);
        assert!(lin.max_diag_deviation > 1e-10);
    }

    #[test]
    fn nngp_depth_contraction_toward_constant() {
        // |K^L(x,x') - alpha| nonincreasing as L doubles, ReLU and GeLU.
        for activation in [Activation::ReLU, Activation::GeLU] {
            let (sw2, sb2) = nngp::critical_fc_params(activation);
            let base = KernelTriple {
                k_qq: 1.0,
                k_qx: -0.3,
                k_xx: 1.0,
            };
            // Deep proxy for the limit.
            let alpha = nngp::depth_recursion(activation, sw2, sb2, base, 4096)
                .unwrap()
                .k_qx;
            let mut prev = f64::INFINITY;
            for depth in [4, 8, 16, 32, 64] {
                let k = nngp::depth_recursion(activation, sw2, sb2, base, depth)
                    .unwrap()
                    .k_qx;
                let dist = (k - alpha).abs();
                assert!(dist <= prev + 1e-12, "{activation:?} depth {depth}");
                prev = dist;
            }
        }
    }

    #[test]
    fn unnormalized_relu_nngp_is_homogeneous() {
        let spec = KernelSpec::NngpFc {
            depth: 3,
            activation: Activation::ReLU,
            weight_variance: 2.0,
            bias_variance: 0.0,
            normalize_inputs: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = rand_vec(3, &mut rng);
        let z = rand_vec(3, &mut rng);
        let k = kernel_eval(&spec, &x, &z).unwrap();
        for lambda in [0.5, 2.0, 7.0] {
            let k_scaled = kernel_eval(&spec, &(&x * lambda), &z).unwrap();
            assert!(
                (k_scaled - lambda * k).abs() <= 1e-8 * k.abs().max(1.0),
                "lambda {lambda}"
            );
        }
        assert!(spec.is_homogeneous());
    }

    #[test]
    fn zero_norm_input_rejected() {
        let spec = KernelSpec::Correlation {
            profile: CorrelationProfile::Exp { rate: 1.0 },
        };
        let z = DVector::zeros(2);
        let x = DVector::from_column_slice(&[1.0, 0.0]);
        assert!(matches!(
            kernel_eval(&spec, &z, &x),
            Err(LoodError::ZeroNormInput)
        ));
    }

    #[test]
    fn symmetry_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let spec = KernelSpec::NngpFc {
            depth: 2,
            activation: Activation::GeLU,
            weight_variance: 2.0,
            bias_variance: 0.1,
            normalize_inputs: true,
        };
        for _ in 0..10 {
            let x = rand_vec(3, &mut rng) + DVector::from_element(3, 0.2);
            let z = rand_vec(3, &mut rng) + DVector::from_element(3, 0.2);
            let a = kernel_eval(&spec, &x, &z).unwrap();
            let b = kernel_eval(&spec, &z, &x).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }
}
