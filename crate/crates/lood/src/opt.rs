//! Query-side gradients of LOOD, gradient-ascent query optimization, stationarity
//! and second-order verification, the non-optimal-differing-point search, and
//! perturbation scans around the differing record.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{LoodError, Result};
use crate::gp::{loo_pair_posteriors, Dataset, LeaveOneOutPair};
use crate::kernels::{
    check_regularity, kernel_eval, kernel_grad_q, kernel_self_grad, KernelSpec,
};
use crate::linalg::{cholesky_psd, solve_psd_vec, JitterPolicy};
use crate::metrics::{kl_lood, mean_distance_lood};

/// The three-term decomposition of the single-query KL gradient plus its
/// finite-difference cross-check.
#[derive(Debug, Clone, Serialize)]
pub struct GradientReport {
    pub f1: Vec<f64>,
    pub f2: Vec<f64>,
    pub f3: Vec<f64>,
    pub total: Vec<f64>,
    pub fd_total: Vec<f64>,
    pub rel_discrepancy: f64,
}

/// Single-query posterior scalars and their query-gradients, shared by the
/// analytic gradient assembly.
struct ScalarPosteriorGrads {
    sigma: f64,
    sigma_p: f64,
    mu: f64,
    mu_p: f64,
    d_sigma: DVector<f64>,
    d_sigma_p: DVector<f64>,
    d_mu: DVector<f64>,
    d_mu_p: DVector<f64>,
}

fn scalar_posterior_grads(
    spec: &KernelSpec,
    pair: &LeaveOneOutPair,
    q: &DVector<f64>,
) -> Result<ScalarPosteriorGrads> {
    let d = q.len();
    let k_qq = kernel_eval(spec, q, q)?;
    let self_grad = kernel_self_grad(spec, q)?;

    // One dataset's contribution: mu, Sigma and their gradients.
    let one = |data: &Dataset| -> Result<(f64, f64, DVector<f64>, DVector<f64>)> {
        let n = data.n();
        if n == 0 {
            return Ok((0.0, k_qq, DVector::zeros(d), self_grad.clone()));
        }
        let m = crate::gp::regularized_gram(spec, data)?;
        let factor = cholesky_psd(&m, &JitterPolicy::default())?;
        let k_qd = DVector::from_fn(n, |i, _| {
            kernel_eval(spec, q, &DVector::from(data.features.row(i).transpose())).unwrap()
        });
        let w = solve_psd_vec(&factor, &k_qd)?; // M^{-1} K_Dq
        let alpha = solve_psd_vec(&factor, &data.labels)?; // M^{-1} y
        let mu = k_qd.dot(&alpha);
        let sigma = k_qq - k_qd.dot(&w);
        // d x n matrix of kernel gradients at the query.
        let mut grads = DMatrix::zeros(d, n);
        for i in 0..n {
            let xi = DVector::from(data.features.row(i).transpose());
            grads.set_column(i, &kernel_grad_q(spec, q, &xi)?);
        }
        let d_mu = &grads * alpha;
        let d_sigma = &self_grad - (&grads * w) * 2.0;
        Ok((mu, sigma, d_mu, d_sigma))
    };

    let (mu, sigma, d_mu, d_sigma) = one(&pair.base)?;
    let (mu_p, sigma_p, d_mu_p, d_sigma_p) = one(&pair.augmented())?;
    Ok(ScalarPosteriorGrads {
        sigma,
        sigma_p,
        mu,
        mu_p,
        d_sigma,
        d_sigma_p,
        d_mu,
        d_mu_p,
    })
}

/// Analytic single-query KL gradient, without the finite-difference cross-check.
pub fn kl_grad_analytic(
    spec: &KernelSpec,
    pair: &LeaveOneOutPair,
    q: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>, DVector<f64>)> {
    let g = scalar_posterior_grads(spec, pair, q)?;
    let sp2 = g.sigma_p * g.sigma_p;
    // d(Sigma/Sigma')/dq
    let d_ratio = (&g.d_sigma * g.sigma_p - &g.d_sigma_p * g.sigma) / sp2;
    let delta = g.mu - g.mu_p;
    let f1 = d_ratio * (0.5 * (1.0 - g.sigma_p / g.sigma));
    let f2 = (&g.d_mu - &g.d_mu_p) * (delta / g.sigma_p);
    let f3 = &g.d_sigma_p * (-0.5 * delta * delta / sp2);
    Ok((f1, f2, f3))
}

/// Full gradient report with the finite-difference cross-check
/// (step 1e-4 * (1 + ||Q||)).
pub fn kl_grad_single(
    spec: &KernelSpec,
    pair: &LeaveOneOutPair,
    q: &DVector<f64>,
) -> Result<GradientReport> {
    let (f1, f2, f3) = kl_grad_analytic(spec, pair, q)?;
    let total = &f1 + &f2 + &f3;
    let qm = DMatrix::from_fn(1, q.len(), |_, j| q[j]);
    let fd = fd_grad(
        &|qq: &DMatrix<f64>| {
            let (pd, pdp) = loo_pair_posteriors(spec, pair, qq).unwrap();
            kl_lood(&pd, &pdp).unwrap()
        },
        &qm,
        1e-4 * (1.0 + q.norm()),
    );
    let fd_total = DVector::from(fd.row(0).transpose());
    let rel_discrepancy = (&total - &fd_total).norm() / (1e-12 + fd_total.norm());
    Ok(GradientReport {
        f1: f1.as_slice().to_vec(),
        f2: f2.as_slice().to_vec(),
        f3: f3.as_slice().to_vec(),
        total: total.as_slice().to_vec(),
        fd_total: fd_total.as_slice().to_vec(),
        rel_discrepancy,
    })
}

/// Closed-form gradient of the mean-distance LOOD at Q = S (single record):
/// -(1/alpha^2) (1 - K_SD M^{-1} K_DS) (y_S - K_SD M^{-1} y_D)^2 Kdot_SD M^{-1} K_DS,
/// with alpha = 1 - K_SD M^{-1} K_DS + noise.
pub fn mean_grad_at_s(spec: &KernelSpec, pair: &LeaveOneOutPair) -> Result<DVector<f64>> {
    assert_eq!(pair.s(), 1, "mean_grad_at_s requires a single differing record");
    let s = DVector::from(pair.differing.row(0).transpose());
    let d = s.len();
    let mut samples: Vec<DVector<f64>> = (0..pair.base.n())
        .map(|i| DVector::from(pair.base.features.row(i).transpose()))
        .collect();
    samples.push(s.clone());
    let reg = check_regularity(spec, &samples, 1e-8)?;
    if !reg.passed {
        return Err(LoodError::KernelNotRegular {
            diag: reg.max_diag_deviation,
            grad: reg.max_self_grad_norm,
        });
    }
    let n = pair.base.n();
    if n == 0 {
        return Ok(DVector::zeros(d));
    }
    let m = crate::gp::regularized_gram(spec, &pair.base)?;
    let factor = cholesky_psd(&m, &JitterPolicy::default())?;
    let k_sd = DVector::from_fn(n, |i, _| {
        kernel_eval(spec, &s, &DVector::from(pair.base.features.row(i).transpose())).unwrap()
    });
    let w = solve_psd_vec(&factor, &k_sd)?;
    let v = k_sd.dot(&w); // K_SD M^{-1} K_DS
    let alpha = 1.0 - v + pair.base.noise_variance;
    let resid = pair.differing_labels[0] - k_sd.dot(&solve_psd_vec(&factor, &pair.base.labels)?);
    let mut grads = DMatrix::zeros(d, n);
    for i in 0..n {
        let xi = DVector::from(pair.base.features.row(i).transpose());
        grads.set_column(i, &kernel_grad_q(spec, &s, &xi)?);
    }
    Ok((&grads * w) * (-(1.0 - v) * resid * resid / (alpha * alpha)))
}

/// Central finite differences of a scalar objective over a query matrix.
pub fn fd_grad(
    objective: &dyn Fn(&DMatrix<f64>) -> f64,
    q: &DMatrix<f64>,
    step: f64,
) -> DMatrix<f64> {
    let mut g = DMatrix::zeros(q.nrows(), q.ncols());
    for i in 0..q.nrows() {
        for j in 0..q.ncols() {
            let mut qp = q.clone();
            let mut qm = q.clone();
            qp[(i, j)] += step;
            qm[(i, j)] -= step;
            g[(i, j)] = (objective(&qp) - objective(&qm)) / (2.0 * step);
        }
    }
    g
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Objective {
    Kl,
    MeanDistance,
}

#[derive(Debug, Clone)]
pub enum Init {
    UniformInBox { lo: f64, hi: f64 },
    GivenPoint(DMatrix<f64>),
    GaussianAround { point: DMatrix<f64>, std: f64 },
}

#[derive(Debug, Clone)]
pub struct OptConfig {
    pub max_iters: usize,
    /// Initial trial step length along the normalized ascent direction.
    /// None selects the default 6.4 * (1 + ||S||); the backtracking line
    /// search halves a rejected trial step, so a deliberately long first
    /// trial lets the search jump across shallow local ripples while still
    /// resolving fine steps near a maximum.
    pub learning_rate: Option<f64>,
    pub grad_tol: f64,
    pub project_to_sphere: bool,
    pub seed: u64,
    pub init: Init,
}

impl Default for OptConfig {
    fn default() -> Self {
        OptConfig {
            max_iters: 2000,
            learning_rate: None,
            grad_tol: 1e-6,
            project_to_sphere: false,
            seed: 0,
            init: Init::UniformInBox { lo: -5.0, hi: 5.0 },
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TracePoint {
    pub iteration: usize,
    pub query: Vec<f64>,
    pub lood: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct OptTrace {
    pub iterates: Vec<TracePoint>,
    pub converged: bool,
    pub final_query: Vec<Vec<f64>>,
    pub final_value: f64,
}

fn project_rows_to_sphere(q: &mut DMatrix<f64>) {
    for mut row in q.row_iter_mut() {
        let n = row.norm();
        if n > 0.0 {
            row /= n;
        }
    }
}

fn tangential(g: &DMatrix<f64>, q: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = g.clone();
    for i in 0..q.nrows() {
        let qi = DVector::from(q.row(i).transpose());
        let n2 = qi.norm_squared();
        if n2 > 0.0 {
            let gi = DVector::from(g.row(i).transpose());
            let proj = &qi * (gi.dot(&qi) / n2);
            out.row_mut(i).copy_from(&(gi - proj).transpose());
        }
    }
    out
}

fn trace_point(iter: usize, q: &DMatrix<f64>, value: f64, grad_norm: f64) -> TracePoint {
    TracePoint {
        iteration: iter,
        query: q.iter().cloned().collect(),
        lood: value,
        grad_norm,
    }
}

/// Gradient ascent with backtracking halving. Single-query KL uses the analytic
/// gradient; every other case goes through central finite differences.
pub fn optimize_query(
    spec: &KernelSpec,
    pair: &LeaveOneOutPair,
    objective: Objective,
    q_count: usize,
    config: &OptConfig,
) -> Result<OptTrace> {
    let d = pair.differing.ncols();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut q = match &config.init {
        Init::UniformInBox { lo, hi } => {
            DMatrix::from_fn(q_count, d, |_, _| rng.gen_range(*lo..*hi))
        }
        Init::GivenPoint(p) => {
            assert_eq!(p.nrows(), q_count);
            p.clone()
        }
        Init::GaussianAround { point, std } => {
            assert_eq!(point.nrows(), q_count);
            DMatrix::from_fn(q_count, d, |i, j| {
                let z: f64 =
                    rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
                point[(i, j)] + std * z
            })
        }
    };
    if config.project_to_sphere {
        project_rows_to_sphere(&mut q);
    }

    let eval = |qq: &DMatrix<f64>| -> Result<f64> {
        let (pd, pdp) = loo_pair_posteriors(spec, pair, qq)?;
        match objective {
            Objective::Kl => kl_lood(&pd, &pdp),
            Objective::MeanDistance => mean_distance_lood(&pd, &pdp),
        }
    };
    let grad = |qq: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        if q_count == 1 && objective == Objective::Kl {
            let (f1, f2, f3) = kl_grad_analytic(spec, pair, &DVector::from(qq.row(0).transpose()))?;
            let total = f1 + f2 + f3;
            Ok(DMatrix::from_fn(1, d, |_, j| total[j]))
        } else {
            let step = 1e-4 * (1.0 + qq.norm());
            Ok(fd_grad(&|x| eval(x).unwrap_or(f64::NAN), qq, step))
        }
    };

    let mut value = eval(&q)?;
    let g0 = grad(&q)?;
    let base_step = config
        .learning_rate
        .unwrap_or_else(|| 6.4 * (1.0 + pair.differing.norm()));

    let mut iterates = Vec::new();
    let mut converged = false;
    let mut g = g0;
    // Step length carried across iterations: restart each line search a few
    // doublings above the last accepted step, capped at the base step.
    let mut step = base_step;
    for iter in 0..config.max_iters {
        let eff_g = if config.project_to_sphere {
            tangential(&g, &q)
        } else {
            g.clone()
        };
        let gn = eff_g.norm();
        iterates.push(trace_point(iter, &q, value, gn));
        if gn <= config.grad_tol {
            converged = true;
            break;
        }
        // Backtracking line search along the normalized ascent direction.
        let dir = &eff_g / gn;
        let mut trial = (step * 4.0).min(base_step);
        let mut accepted = false;
        for _ in 0..=20 {
            let mut cand = &q + &dir * trial;
            if config.project_to_sphere {
                project_rows_to_sphere(&mut cand);
            }
            if let Ok(v) = eval(&cand) {
                if v > value {
                    q = cand;
                    value = v;
                    accepted = true;
                    break;
                }
            }
            trial *= 0.5;
        }
        if !accepted {
            break;
        }
        step = trial;
        g = grad(&q)?;
    }
    if !converged {
        // Final gradient check in case the loop exhausted iterations right at a
        // stationary point.
        let eff_g = if config.project_to_sphere {
            tangential(&g, &q)
        } else {
            g.clone()
        };
        let gn = eff_g.norm();
        if gn <= config.grad_tol {
            converged = true;
        }
        if iterates.last().map(|p| p.iteration) != Some(config.max_iters) {
            iterates.push(trace_point(iterates.len(), &q, value, gn));
        }
    }
    Ok(OptTrace {
        iterates,
        converged,
        final_query: (0..q.nrows())
            .map(|i| q.row(i).iter().cloned().collect())
            .collect(),
        final_value: value,
    })
}

/// Search for the differing record with the largest mean-distance gradient at
/// itself (the non-optimal differing point of the first-order influence
/// condition): ascent on ||grad_Q M|_{Q=S}||^2 over S, with seeded random
/// restarts. Labels for candidate S come from the caller-provided rule.
pub fn find_nonstationary_s(
    spec: &KernelSpec,
    data: &Dataset,
    label_fn: &dyn Fn(&DVector<f64>) -> f64,
    config: &OptConfig,
    restarts: usize,
) -> Result<(DVector<f64>, f64)> {
    let d = data.dim();
    let objective = |sm: &DMatrix<f64>| -> f64 {
        let s = DVector::from(sm.row(0).transpose());
        let pair = LeaveOneOutPair::new(
            data.clone(),
            DMatrix::from_fn(1, d, |_, j| s[j]),
            DVector::from_element(1, label_fn(&s)),
        );
        match mean_grad_at_s(spec, &pair) {
            Ok(g) => g.norm_squared(),
            Err(_) => f64::NEG_INFINITY,
        }
    };
    let (lo, hi) = match config.init {
        Init::UniformInBox { lo, hi } => (lo, hi),
        _ => (-5.0, 5.0),
    };
    let mut best_s: Option<DVector<f64>> = None;
    let mut best_obj = f64::NEG_INFINITY;
    for r in 0..restarts.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(r as u64));
        let mut s = DMatrix::from_fn(1, d, |_, _| rng.gen_range(lo..hi));
        let mut value = objective(&s);
        let step0 = 1e-5 * (hi - lo).abs().max(1.0);
        let g0 = fd_grad(&objective, &s, step0);
        let mut lr = 0.1 * (1.0 + s.norm()) / (1.0 + g0.norm());
        let mut g = g0;
        for _ in 0..config.max_iters {
            if g.norm() <= config.grad_tol {
                break;
            }
            let mut accepted = false;
            let mut trial_lr = lr;
            for _ in 0..=20 {
                let mut cand = &s + &g * trial_lr;
                // Keep candidates inside the search box.
                for v in cand.iter_mut() {
                    *v = v.clamp(lo, hi);
                }
                let v = objective(&cand);
                if v > value {
                    s = cand;
                    value = v;
                    accepted = true;
                    break;
                }
                trial_lr *= 0.5;
            }
            if !accepted {
                break;
            }
            lr = trial_lr * 2.0;
            g = fd_grad(&objective, &s, step0);
        }
        if value > best_obj {
            best_obj = value;
            best_s = Some(DVector::from(s.row(0).transpose()));
        }
    }
    let s = best_s.expect("at least one restart");
    Ok((s, best_obj.sqrt()))
}

#[derive(Debug, Clone, Serialize)]
pub struct StationarityReport {
    pub analytic_norm: f64,
    pub fd_norm: f64,
    pub passed: bool,
    pub regularity_passed: bool,
    /// True when the gradients were projected onto the tangent space of the
    /// sphere (kernels that normalize inputs).
    pub tangential: bool,
}

/// Check that the differing point is a stationary query of the KL objective:
/// both the analytic and the finite-difference gradient at Q = S must be small.
pub fn verify_stationarity(
    spec: &KernelSpec,
    pair: &LeaveOneOutPair,
    tol_analytic: f64,
    tol_fd: f64,
) -> Result<StationarityReport> {
    assert_eq!(pair.s(), 1);
    let s = DVector::from(pair.differing.row(0).transpose());
    let mut samples: Vec<DVector<f64>> = (0..pair.base.n())
        .map(|i| DVector::from(pair.base.features.row(i).transpose()))
        .collect();
    samples.push(s.clone());
    let reg = check_regularity(spec, &samples, 1e-8)?;
    let report = kl_grad_single(spec, pair, &s)?;
    let projected = matches!(
        spec,
        KernelSpec::NngpFc {
            normalize_inputs: true,
            ..
        }
    ) || matches!(spec, KernelSpec::Correlation { .. });
    let (analytic_norm, fd_norm) = if projected {
        let qm = DMatrix::from_fn(1, s.len(), |_, j| s[j]);
        let an = DMatrix::from_fn(1, s.len(), |_, j| report.total[j]);
        let fd = DMatrix::from_fn(1, s.len(), |_, j| report.fd_total[j]);
        (tangential(&an, &qm).norm(), tangential(&fd, &qm).norm())
    } else {
        (
            DVector::from_column_slice(&report.total).norm(),
            DVector::from_column_slice(&report.fd_total).norm(),
        )
    };
    Ok(StationarityReport {
        analytic_norm,
        fd_norm,
        passed: analytic_norm <= tol_analytic && fd_norm <= tol_fd,
        regularity_passed: reg.passed,
        tangential: projected,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct HessianReport {
    pub eigenvalues: Vec<f64>,
    pub max_eigenvalue: f64,
    pub negative_definite: bool,
}

/// Finite-difference Hessian of the mean-distance LOOD at Q = S
/// (central, step 1e-3 * (1 + ||S||)), symmetrized.
pub fn hessian_check(spec: &KernelSpec, pair: &LeaveOneOutPair) -> Result<HessianReport> {
    assert_eq!(pair.s(), 1);
    let s = DVector::from(pair.differing.row(0).transpose());
    let objective = |qm: &DMatrix<f64>| -> f64 {
        let (pd, pdp) = loo_pair_posteriors(spec, pair, qm).unwrap();
        mean_distance_lood(&pd, &pdp).unwrap()
    };
    let h = fd_hessian(&objective, &s, 1e-3 * (1.0 + s.norm()));
    let eig = h.symmetric_eigen();
    let mut eigenvalues: Vec<f64> = eig.eigenvalues.iter().cloned().collect();
    eigenvalues.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let max_eigenvalue = *eigenvalues.last().unwrap();
    Ok(HessianReport {
        eigenvalues,
        max_eigenvalue,
        negative_definite: max_eigenvalue < 0.0,
    })
}

/// Central-difference Hessian of a scalar function of a d-vector.
pub fn fd_hessian(
    objective: &dyn Fn(&DMatrix<f64>) -> f64,
    q: &DVector<f64>,
    step: f64,
) -> DMatrix<f64> {
    let d = q.len();
    let at = |v: &DVector<f64>| {
        let m = DMatrix::from_fn(1, d, |_, j| v[j]);
        objective(&m)
    };
    let mut h = DMatrix::zeros(d, d);
    let f0 = at(q);
    for i in 0..d {
        for j in i..d {
            if i == j {
                let mut p = q.clone();
                let mut m = q.clone();
                p[i] += step;
                m[i] -= step;
                h[(i, i)] = (at(&p) - 2.0 * f0 + at(&m)) / (step * step);
            } else {
                let mut pp = q.clone();
                let mut pm = q.clone();
                let mut mp = q.clone();
                let mut mm = q.clone();
                pp[i] += step;
                pp[j] += step;
                pm[i] += step;
                pm[j] -= step;
                mp[i] -= step;
                mp[j] += step;
                mm[i] -= step;
                mm[j] -= step;
                let v = (at(&pp) - at(&pm) - at(&mp) + at(&mm)) / (4.0 * step * step);
                h[(i, j)] = v;
                h[(j, i)] = v;
            }
        }
    }
    h
}

#[derive(Debug, Clone, Serialize)]
pub struct PerturbationPoint {
    pub x: f64,
    pub kl: f64,
    pub mean_distance: f64,
}

/// LOOD metrics along the ray Q = S + x * direction.
pub fn perturbation_scan(
    spec: &KernelSpec,
    pair: &LeaveOneOutPair,
    direction: &DVector<f64>,
    xs: &[f64],
) -> Result<Vec<PerturbationPoint>> {
    assert_eq!(pair.s(), 1);
    assert!(
        direction.amax() <= 1.0 + 1e-12,
        "direction must lie in the unit infinity-ball"
    );
    let s = DVector::from(pair.differing.row(0).transpose());
    let mut out = Vec::with_capacity(xs.len());
    for &x in xs {
        let q = &s + direction * x;
        let qm = DMatrix::from_fn(1, q.len(), |_, j| q[j]);
        let (pd, pdp) = loo_pair_posteriors(spec, pair, &qm)?;
        out.push(PerturbationPoint {
            x,
            kl: kl_lood(&pd, &pdp)?,
            mean_distance: mean_distance_lood(&pd, &pdp)?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rbf() -> KernelSpec {
        KernelSpec::Rbf { length: 1.0 }
    }

    /// The 1-D sine setup: features N(0,1), labels sin(x), noise 0.01.
    pub fn sine_dataset(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let feats = DMatrix::from_fn(n, 1, |_, _| {
            let z: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
            z
        });
        let labels = DVector::from_fn(n, |i, _| feats[(i, 0)].sin());
        Dataset::new(feats, labels, 0.01)
    }

    fn sine_pair(s_x: f64, seed: u64) -> LeaveOneOutPair {
        LeaveOneOutPair::new(
            sine_dataset(10, seed),
            DMatrix::from_row_slice(1, 1, &[s_x]),
            DVector::from_column_slice(&[s_x.sin()]),
        )
    }

    #[test]
    fn stationary_at_s_rbf() {
        for (i, s_x) in [-4.0, -1.5, 0.3, 2.7].iter().enumerate() {
            let pair = sine_pair(*s_x, 40 + i as u64);
            let report = kl_grad_single(&rbf(), &pair, &DVector::from_column_slice(&[*s_x])).unwrap();
            let norm = DVector::from_column_slice(&report.total).norm();
            assert!(norm <= 1e-6, "S={s_x}: norm {norm}");
        }
    }

    #[test]
    fn far_query_gradient_vanishes() {
        let pair = sine_pair(-4.0, 41);
        let report =
            kl_grad_single(&rbf(), &pair, &DVector::from_column_slice(&[60.0])).unwrap();
        assert!(DVector::from_column_slice(&report.total).norm() <= 1e-8);
    }

    #[test]
    fn gradient_decomposition_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let pair = sine_pair(1.2, 42);
        for _ in 0..20 {
            let q = DVector::from_column_slice(&[rng.gen::<f64>() * 6.0 - 3.0]);
            let report = kl_grad_single(&rbf(), &pair, &q).unwrap();
            assert!(
                report.rel_discrepancy <= 1e-3,
                "q={} rel {}",
                q[0],
                report.rel_discrepancy
            );
            let sum: f64 = report
                .total
                .iter()
                .zip(report.f1.iter().zip(report.f2.iter().zip(report.f3.iter())))
                .map(|(t, (a, (b, c)))| (t - (a + b + c)).abs())
                .sum();
            assert!(sum < 1e-15);
        }
    }

    #[test]
    fn mean_grad_closed_form_cases() {
        // Far S: gradient near zero.
        let pair = sine_pair(40.0, 43);
        let g = mean_grad_at_s(&rbf(), &pair).unwrap();
        assert!(g.norm() < 1e-10);

        // Label equal to the D-posterior mean at S: exactly zero.
        let data = sine_dataset(10, 44);
        let s = DMatrix::from_row_slice(1, 1, &[1.1]);
        let post = crate::gp::posterior(&rbf(), &data, &s).unwrap();
        let pair = LeaveOneOutPair::new(data, s, DVector::from_column_slice(&[post.mean[0]]));
        let g = mean_grad_at_s(&rbf(), &pair).unwrap();
        assert!(g.norm() < 1e-12);

        // Generic S: matches finite differences of M.
        let pair = sine_pair(2.0, 45);
        let g = mean_grad_at_s(&rbf(), &pair).unwrap();
        let objective = |qm: &DMatrix<f64>| {
            let (pd, pdp) = loo_pair_posteriors(&rbf(), &pair, qm).unwrap();
            mean_distance_lood(&pd, &pdp).unwrap()
        };
        let fd = fd_grad(&objective, &DMatrix::from_row_slice(1, 1, &[2.0]), 1e-5);
        let rel = (g[0] - fd[(0, 0)]).abs() / fd[(0, 0)].abs().max(1e-12);
        assert!(rel <= 1e-3, "rel {rel}");
    }

    #[test]
    fn mean_grad_rejects_irregular_kernel() {
        let pair = sine_pair(1.0, 46);
        assert!(matches!(
            mean_grad_at_s(&KernelSpec::Linear { scale: 1.0 }, &pair),
            Err(LoodError::KernelNotRegular { .. })
        ));
    }

    #[test]
    fn fd_grad_quadratic_exact() {
        let q = DMatrix::from_row_slice(2, 2, &[1.0, -2.0, 0.5, 3.0]);
        let g = fd_grad(&|m| 0.5 * m.norm_squared(), &q, 1e-4);
        assert!((g - &q).amax() < 1e-8);
        let z = fd_grad(&|_| 7.0, &q, 1e-4);
        assert!(z.amax() < 1e-12);
    }

    #[test]
    fn optimize_from_stationary_start_terminates() {
        let pair = sine_pair(-4.0, 47);
        let config = OptConfig {
            init: Init::GivenPoint(DMatrix::from_row_slice(1, 1, &[-4.0])),
            grad_tol: 1e-5,
            ..OptConfig::default()
        };
        let trace = optimize_query(&rbf(), &pair, Objective::Kl, 1, &config).unwrap();
        assert!(trace.converged);
        assert!(trace.iterates.len() <= 2);
        assert!((trace.final_query[0][0] + 4.0).abs() < 1e-9);
    }

    #[test]
    fn optimize_recovers_far_differing_point() {
        let pair = sine_pair(-4.0, 48);
        let mut hits = 0;
        for seed in 0..10 {
            let config = OptConfig {
                init: Init::UniformInBox { lo: -5.0, hi: 5.0 },
                seed,
                // The KL surface has near-flat shoulders away from the data;
                // a tight gradient tolerance keeps the ascent moving there
                // (the normalized direction still yields full-length trial
                // steps even when the raw gradient is tiny).
                grad_tol: 1e-12,
                ..OptConfig::default()
            };
            let trace = optimize_query(&rbf(), &pair, Objective::Kl, 1, &config).unwrap();
            if (trace.final_query[0][0] + 4.0).abs() < 0.05 {
                hits += 1;
            }
        }
        assert!(hits >= 8, "hits {hits}");
    }

    #[test]
    fn ascent_monotonic_and_deterministic() {
        let pair = sine_pair(2.5, 49);
        let config = OptConfig {
            seed: 3,
            max_iters: 200,
            ..OptConfig::default()
        };
        let t1 = optimize_query(&rbf(), &pair, Objective::Kl, 1, &config).unwrap();
        let t2 = optimize_query(&rbf(), &pair, Objective::Kl, 1, &config).unwrap();
        assert_eq!(t1.iterates.len(), t2.iterates.len());
        for (a, b) in t1.iterates.iter().zip(&t2.iterates) {
            assert_eq!(a.query, b.query);
        }
        for w in t1.iterates.windows(2) {
            assert!(w[1].lood >= w[0].lood - 1e-12);
        }
    }

    #[test]
    fn stationarity_verifier_paths() {
        let pair = sine_pair(-2.2, 50);
        let rep = verify_stationarity(&rbf(), &pair, 1e-5, 1e-3).unwrap();
        assert!(rep.passed, "analytic {} fd {}", rep.analytic_norm, rep.fd_norm);
        assert!(rep.regularity_passed);
        assert!(!rep.tangential);

        // Linear kernel on unnormalized data: regularity flag must trip.
        let rep = verify_stationarity(&KernelSpec::Linear { scale: 1.0 }, &pair, 1e-5, 1e-3).unwrap();
        assert!(!rep.regularity_passed);
    }

    #[test]
    fn stationarity_nngp_tangential() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let spec = KernelSpec::NngpFc {
            depth: 2,
            activation: crate::kernels::Activation::ReLU,
            weight_variance: 2.0,
            bias_variance: 0.0,
            normalize_inputs: true,
        };
        let mut feats = DMatrix::from_fn(6, 3, |_, _| rng.gen::<f64>() * 2.0 - 1.0);
        for i in 0..6 {
            let n = feats.row(i).norm();
            for j in 0..3 {
                feats[(i, j)] /= n;
            }
        }
        let labels = DVector::from_fn(6, |i, _| feats[(i, 0)]);
        let data = Dataset::new(feats, labels, 0.01);
        let mut s = DVector::from_column_slice(&[0.4, -0.8, 0.45]);
        s /= s.norm();
        let pair = LeaveOneOutPair::new(
            data,
            DMatrix::from_fn(1, 3, |_, j| s[j]),
            DVector::from_column_slice(&[0.7]),
        );
        let rep = verify_stationarity(&spec, &pair, 1e-4, 1e-3).unwrap();
        assert!(rep.tangential);
        assert!(rep.fd_norm <= 1e-3, "fd {}", rep.fd_norm);
        assert!(rep.analytic_norm <= 1e-4, "analytic {}", rep.analytic_norm);
    }

    #[test]
    fn hessian_far_s_negative_definite() {
        let pair = sine_pair(5.0, 52);
        let rep = hessian_check(&rbf(), &pair).unwrap();
        assert!(rep.negative_definite, "max eig {}", rep.max_eigenvalue);
    }

    #[test]
    fn hessian_fd_matches_quadratic() {
        // f(q) = q^T A q / 2 with known A.
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let objective = move |qm: &DMatrix<f64>| {
            let v = DVector::from(qm.row(0).transpose());
            0.5 * v.dot(&(&a * &v))
        };
        let h = fd_hessian(&objective, &DVector::from_column_slice(&[0.3, -0.7]), 1e-3);
        let expect = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        assert!((h - expect).amax() < 1e-3);
    }

    #[test]
    fn perturbation_scan_peak_at_zero() {
        let pair = sine_pair(-4.0, 53);
        let xs: Vec<f64> = (-40..=40).map(|i| i as f64 * 0.05).collect();
        let dir = DVector::from_column_slice(&[1.0]);
        let curve = perturbation_scan(&rbf(), &pair, &dir, &xs).unwrap();
        let zero_idx = xs.iter().position(|&x| x.abs() < 1e-12).unwrap();
        let max_idx = curve
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.kl.partial_cmp(&b.1.kl).unwrap())
            .unwrap()
            .0;
        assert_eq!(max_idx, zero_idx);
        // At x = 0 the scan reproduces the report at S.
        let qm = DMatrix::from_row_slice(1, 1, &[-4.0]);
        let (pd, pdp) = loo_pair_posteriors(&rbf(), &pair, &qm).unwrap();
        assert!((curve[zero_idx].kl - kl_lood(&pd, &pdp).unwrap()).abs() < 1e-12);
        // Monotone decay beyond the length scale on each side.
        let right: Vec<f64> = curve
            .iter()
            .filter(|p| p.x >= 1.0)
            .map(|p| p.kl)
            .collect();
        for w in right.windows(2) {
            assert!(w[1] <= w[0] + 1e-10);
        }
    }

    #[test]
    fn far_s_gradient_decays_with_distance() {
        // Mean-gradient magnitude shrinks as S moves beyond ~3 length scales.
        let data = sine_dataset(10, 54);
        let mut prev = f64::INFINITY;
        for s_x in [3.5, 4.0, 4.5, 5.0, 6.0] {
            let pair = LeaveOneOutPair::new(
                data.clone(),
                DMatrix::from_row_slice(1, 1, &[s_x]),
                DVector::from_column_slice(&[s_x.sin()]),
            );
            let g = mean_grad_at_s(&rbf(), &pair).unwrap().norm();
            assert!(g <= prev + 1e-15, "s={s_x}");
            prev = g;
        }
    }

    #[test]
    fn find_nonstationary_s_beats_grid() {
        let data = sine_dataset(10, 7);
        let label_fn = |s: &DVector<f64>| s[0].sin();
        let config = OptConfig {
            init: Init::UniformInBox { lo: -5.0, hi: 5.0 },
            seed: 1,
            max_iters: 300,
            ..OptConfig::default()
        };
        let (s_star, g_star) = find_nonstationary_s(&rbf(), &data, &label_fn, &config, 10).unwrap();
        assert!(g_star > 0.0);
        // Grid oracle.
        let mut best = 0.0f64;
        for i in 0..=1000 {
            let x = -5.0 + i as f64 * 0.01;
            let pair = LeaveOneOutPair::new(
                data.clone(),
                DMatrix::from_row_slice(1, 1, &[x]),
                DVector::from_column_slice(&[x.sin()]),
            );
            best = best.max(mean_grad_at_s(&rbf(), &pair).unwrap().norm());
        }
        assert!(
            g_star >= best * 0.99,
            "s*={} grad {} vs grid {}",
            s_star[0],
            g_star,
            best
        );
    }
}
