//! Membership-inference AUC from Gaussian prediction pairs, LOOD-vs-AUC
//! correlation studies, the low-rank leakage bound, activation depth scans, and
//! group-reconstruction frequency studies.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{LoodError, Result};
use crate::gp::{loo_pair_posteriors, Dataset, LeaveOneOutPair, PosteriorSummary};
use crate::kernels::nngp::{self, Activation, KernelTriple};
use crate::kernels::{kernel_matrix, KernelSpec};
use crate::metrics::kl_lood;
use crate::opt::{optimize_query, Objective, OptConfig};

#[derive(Debug, Clone, Serialize)]
pub struct MiaResult {
    pub auc: f64,
    pub n_samples: usize,
    pub seed: u64,
}

const VARIANCE_FLOOR: f64 = 1e-14;

fn log_density(x: f64, mean: f64, var: f64) -> f64 {
    let v = var.max(VARIANCE_FLOOR);
    -0.5 * ((x - mean) * (x - mean) / v + v.ln() + (2.0 * std::f64::consts::PI).ln())
}

/// Average ranks (1-based) with ties sharing the mean rank of their block.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[idx[k]] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Record-level membership-inference AUC: draw samples from both predictive
/// Gaussians at the differing record, score each by the log-likelihood ratio
/// of the D' density over the D density, and compute the Mann-Whitney AUC with
/// ties sharing half credit.
pub fn mia_auc(
    post_d_at_s: &PosteriorSummary,
    post_dp_at_s: &PosteriorSummary,
    n_samples: usize,
    seed: u64,
) -> Result<MiaResult> {
    if post_d_at_s.query_count() != 1 || post_dp_at_s.query_count() != 1 {
        return Err(LoodError::MultiQueryUnsupported(
            post_d_at_s.query_count().max(post_dp_at_s.query_count()),
        ));
    }
    let (mu, var) = (post_d_at_s.mean[0], post_d_at_s.covariance[(0, 0)]);
    let (mu_p, var_p) = (post_dp_at_s.mean[0], post_dp_at_s.covariance[(0, 0)]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd = var.max(VARIANCE_FLOOR).sqrt();
    let sd_p = var_p.max(VARIANCE_FLOOR).sqrt();
    let mut scores = Vec::with_capacity(2 * n_samples);
    // Out-world samples (model trained without S) first, then in-world.
    for _ in 0..n_samples {
        let z: f64 = StandardNormal.sample(&mut rng);
        let x = mu + sd * z;
        scores.push(log_density(x, mu_p, var_p) - log_density(x, mu, var));
    }
    for _ in 0..n_samples {
        let z: f64 = StandardNormal.sample(&mut rng);
        let x = mu_p + sd_p * z;
        scores.push(log_density(x, mu_p, var_p) - log_density(x, mu, var));
    }
    let ranks = average_ranks(&scores);
    let n = n_samples as f64;
    let rank_sum_in: f64 = ranks[n_samples..].iter().sum();
    let auc = (rank_sum_in - n * (n + 1.0) / 2.0) / (n * n);
    Ok(MiaResult {
        auc,
        n_samples,
        seed,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct CandidateRow {
    pub index: usize,
    pub kl: f64,
    pub auc: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CorrelationReport {
    /// Pearson on (log kl, auc); absent when degenerate.
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    pub rows: Vec<CandidateRow>,
}

fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        None
    } else {
        Some(sxy / (sxx * syy).sqrt())
    }
}

fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    pearson(&average_ranks(xs), &average_ranks(ys))
}

/// For each candidate differing record: KL LOOD at Q = S and MIA AUC at S, then
/// rank correlation between log-KL and AUC over the candidate set.
pub fn lood_auc_correlation(
    spec: &KernelSpec,
    data: &Dataset,
    candidates: &[(DVector<f64>, f64)],
    n_samples: usize,
    seed: u64,
) -> Result<CorrelationReport> {
    assert!(!candidates.is_empty());
    let mut rows = Vec::with_capacity(candidates.len());
    for (i, (s, y)) in candidates.iter().enumerate() {
        let pair = LeaveOneOutPair::new(
            data.clone(),
            DMatrix::from_fn(1, s.len(), |_, j| s[j]),
            DVector::from_element(1, *y),
        );
        let qm = DMatrix::from_fn(1, s.len(), |_, j| s[j]);
        let (pd, pdp) = loo_pair_posteriors(spec, &pair, &qm)?;
        let kl = kl_lood(&pd, &pdp)?;
        // Independent per-candidate generator derived from (seed, index).
        let auc = mia_auc(&pd, &pdp, n_samples, split_seed(seed, i as u64))?.auc;
        rows.push(CandidateRow { index: i, kl, auc });
    }
    let log_kl: Vec<f64> = rows.iter().map(|r| r.kl.max(1e-300).ln()).collect();
    let aucs: Vec<f64> = rows.iter().map(|r| r.auc).collect();
    Ok(CorrelationReport {
        pearson: pearson(&log_kl, &aucs),
        spearman: spearman(&log_kl, &aucs),
        rows,
    })
}

/// SplitMix64 step, used to derive independent stream seeds from (root, index).
pub fn split_seed(root: u64, index: u64) -> u64 {
    let mut z = root
        .wrapping_add(0x9E3779B97F4A7C15u64.wrapping_mul(index.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Serialize)]
pub struct LowRankReport {
    pub alpha_min: f64,
    pub h_alpha_min: f64,
    pub n: usize,
    pub zeta: f64,
    pub a_n: f64,
    pub b: f64,
    pub bound: f64,
    pub observed_max_lood: f64,
}

/// The low-rank leakage bound: when the kernel matrix over D' is within h of the
/// constant matrix alpha * 1 1^T, the KL LOOD at any query is at most
/// A_n * h + B / n. alpha_min is analytically the midpoint of the extreme kernel
/// entries (diagonal included) and h the half-range.
pub fn lowrank_analysis(
    spec: &KernelSpec,
    pair: &LeaveOneOutPair,
    query_grid: &[DVector<f64>],
) -> Result<LowRankReport> {
    let n = pair.base.n();
    assert!(n >= 1, "lowrank_analysis needs a nonempty base dataset");
    let augmented = pair.augmented();
    let k = kernel_matrix(spec, &augmented.features, &augmented.features)?;
    let mut kmin = f64::INFINITY;
    let mut kmax = f64::NEG_INFINITY;
    for v in k.iter() {
        kmin = kmin.min(*v);
        kmax = kmax.max(*v);
    }
    let alpha = 0.5 * (kmin + kmax);
    let h = 0.5 * (kmax - kmin);
    if alpha <= 0.0 {
        return Err(LoodError::AlphaNonpositive(alpha));
    }
    let zeta = augmented.labels.amax();
    let s2 = pair.base.noise_variance;
    let nf = n as f64;

    // Variance bracketing for the near-constant kernel: a lower bound on the
    // large-dataset predictive variance and an upper bound on the small one.
    let sigma_p_lb = ((alpha - h) * s2 / ((nf + 1.0) * (alpha + h) + s2)).max(1e-14);
    let sigma_ub = (alpha + h) - nf * (alpha - h).max(0.0).powi(2) / (nf * (alpha + h) + s2);
    let r_ub = (sigma_ub / sigma_p_lb).max(1.0);

    // Mean-difference bound: ||mu - mu'|| <= P * h + (1 + 1/alpha) * zeta / n.
    let den = |m: f64| -> f64 { (alpha * s2).min((alpha * s2 - m * h).abs()).max(1e-300) };
    let p = nf * nf * (alpha + h) * zeta / den(nf)
        + (nf + 1.0) * (nf + 1.0) * (alpha + h) * zeta / den(nf + 1.0)
        + (nf.sqrt() + (nf + 1.0).sqrt()) * zeta / s2;
    let c_az = (1.0 + 1.0 / alpha) * zeta;

    // Scalar-KL assembly: KL <= ||dmu||^2 / Sigma'_lb + (r-1-log r)/2, split so
    // the whole bound is exactly A_n * h + B / n.
    let a_n = p * p * h / sigma_p_lb;
    let b = c_az * c_az / (nf * sigma_p_lb) + nf / 2.0 * (r_ub - 1.0 - r_ub.ln());
    let bound = a_n * h + b / nf;

    let mut observed = 0.0f64;
    for q in query_grid {
        let qm = DMatrix::from_fn(1, q.len(), |_, j| q[j]);
        let (pd, pdp) = loo_pair_posteriors(spec, pair, &qm)?;
        observed = observed.max(kl_lood(&pd, &pdp)?);
    }
    Ok(LowRankReport {
        alpha_min: alpha,
        h_alpha_min: h,
        n,
        zeta,
        a_n,
        b,
        bound,
        observed_max_lood: observed,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ActivationScanResult {
    pub activation: Activation,
    pub depths: Vec<usize>,
    /// |K^L(x, x') - alpha_hat| at each scanned depth.
    pub distances: Vec<f64>,
    /// Least-squares slope of log-distance against log-depth over the scanned
    /// depths, excluding a burn-in of the first two.
    pub fitted_slope: f64,
    /// Depth-limit estimate (Richardson at the two largest scanned depths with
    /// the selected rate).
    pub alpha: f64,
    /// Convergence-rate hypothesis selected from {1, 2}.
    pub rate: u32,
    /// True when the input pair is (numerically) perfectly correlated and the
    /// distance is identically zero.
    pub degenerate: bool,
}

/// Depth scan of the NNGP kernel toward its constant limit for one activation.
///
/// The limit is estimated by Richardson extrapolation at the two largest scanned
/// depths under a convergence-rate hypothesis r in {1, 2}; the hypothesis is the
/// self-consistent one, selected by running the recursion much deeper (up to
/// 16384 layers) and keeping the rate whose successive deep Richardson estimates
/// drift the least. Those deep estimates must agree to 1e-6 or the scan aborts.
pub fn activation_scan(
    activation: Activation,
    weight_variance: f64,
    bias_variance: f64,
    depths: &[usize],
    x: &DVector<f64>,
    z: &DVector<f64>,
) -> Result<ActivationScanResult> {
    assert!(depths.len() >= 3, "need at least 3 scanned depths");
    assert!(depths.windows(2).all(|w| w[1] > w[0]));
    assert!(*depths.first().unwrap() >= 4);
    let nx = x.norm();
    let nz = z.norm();
    if nx == 0.0 || nz == 0.0 {
        return Err(LoodError::ZeroNormInput);
    }
    let rho0 = (x.dot(z) / (nx * nz)).clamp(-1.0, 1.0);
    let base = KernelTriple {
        k_qq: 1.0,
        k_qx: rho0,
        k_xx: 1.0,
    };

    // One pass of the recursion, recording the cross value at every depth of
    // interest.
    const DEEP: [usize; 3] = [4096, 8192, 16384];
    let max_depth = *DEEP.last().unwrap();
    let mut wanted: Vec<usize> = depths.to_vec();
    wanted.extend_from_slice(&DEEP);
    let mut values = std::collections::BTreeMap::new();
    let mut t = base;
    for l in 1..=max_depth {
        t = nngp::step_triple(activation, weight_variance, bias_variance, &t);
        if wanted.contains(&l) {
            values.insert(l, t.k_qx);
        }
    }

    let richardson = |k_big: f64, k_small: f64, ratio: f64, r: u32| -> f64 {
        k_big + (k_big - k_small) / (ratio.powi(r as i32) - 1.0)
    };

    // Rate selection by deep-estimate drift.
    let (k4096, k8192, k16384) = (values[&DEEP[0]], values[&DEEP[1]], values[&DEEP[2]]);
    let mut best_rate = 1;
    let mut best_drift = f64::INFINITY;
    let mut chosen_drift = f64::INFINITY;
    for r in [1u32, 2u32] {
        let e1 = richardson(k8192, k4096, 2.0, r);
        let e2 = richardson(k16384, k8192, 2.0, r);
        let drift = (e2 - e1).abs();
        if drift < best_drift {
            best_drift = drift;
            best_rate = r;
            chosen_drift = drift;
        }
    }
    if chosen_drift > 1e-6 {
        return Err(LoodError::LimitEstimationUnstable(chosen_drift));
    }

    // Reported limit: Richardson at the two largest scanned depths.
    let n_last = depths[depths.len() - 1];
    let n_prev = depths[depths.len() - 2];
    let alpha = richardson(
        values[&n_last],
        values[&n_prev],
        n_last as f64 / n_prev as f64,
        best_rate,
    );

    let distances: Vec<f64> = depths.iter().map(|l| (values[l] - alpha).abs()).collect();
    let degenerate = distances.iter().all(|d| *d < 1e-15);
    let fitted_slope = if degenerate {
        0.0
    } else {
        // Least squares on (log L, log distance), skipping the 2-layer burn-in.
        let pts: Vec<(f64, f64)> = depths
            .iter()
            .zip(&distances)
            .skip(2)
            .filter(|(_, d)| **d > 0.0)
            .map(|(l, d)| ((*l as f64).ln(), d.ln()))
            .collect();
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let num: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let den: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
        num / den
    };
    Ok(ActivationScanResult {
        activation,
        depths: depths.to_vec(),
        distances,
        fitted_slope,
        alpha,
        rate: best_rate,
        degenerate,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct MemberStats {
    pub index: usize,
    pub recoveries: usize,
    /// Single-query KL LOOD at Q = S_i (the whole group left out).
    pub kl_at_self: f64,
    /// Distances from each assigned final query to this member.
    pub assignment_distances: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct GroupReconstructionReport {
    pub members: Vec<MemberStats>,
    pub non_converged: usize,
    pub runs: usize,
}

/// Repeated single-query KL optimizations against a leave-one-group-out pair;
/// each converged run's final query is assigned to its nearest group member.
pub fn group_reconstruction_study(
    spec: &KernelSpec,
    data: &Dataset,
    group: &DMatrix<f64>,
    group_labels: &DVector<f64>,
    runs: usize,
    config: &OptConfig,
) -> Result<GroupReconstructionReport> {
    let s = group.nrows();
    assert!(s >= 2, "group study needs s >= 2");
    assert!(runs >= 1);
    let pair = LeaveOneOutPair::new(data.clone(), group.clone(), group_labels.clone());
    let mut members: Vec<MemberStats> = (0..s)
        .map(|i| {
            let qm = DMatrix::from_fn(1, group.ncols(), |_, j| group[(i, j)]);
            let (pd, pdp) = loo_pair_posteriors(spec, &pair, &qm).unwrap();
            MemberStats {
                index: i,
                recoveries: 0,
                kl_at_self: kl_lood(&pd, &pdp).unwrap(),
                assignment_distances: Vec::new(),
            }
        })
        .collect();
    let mut non_converged = 0;
    for run in 0..runs {
        let mut cfg = config.clone();
        cfg.seed = split_seed(config.seed, run as u64);
        let trace = optimize_query(spec, &pair, Objective::Kl, 1, &cfg)?;
        if !trace.converged {
            non_converged += 1;
            continue;
        }
        let fq = DVector::from_column_slice(&trace.final_query[0]);
        let (best, dist) = (0..s)
            .map(|i| {
                let mi = DVector::from(group.row(i).transpose());
                (i, (&fq - mi).norm())
            })
            .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .unwrap();
        members[best].recoveries += 1;
        members[best].assignment_distances.push(dist);
    }
    Ok(GroupReconstructionReport {
        members,
        non_converged,
        runs,
    })
}
