//! Subcommand implementations. Every command resolves its inputs from the
//! effective config, writes its artifacts plus a run manifest into
//! `output_dir`, and returns a one-line summary for stdout.

use std::path::{Path, PathBuf};

use lood::gp::{loo_pair_posteriors, Dataset, LeaveOneOutPair};
use lood::kernels::nngp::critical_fc_params;
use lood::leakage::{
    activation_scan, group_reconstruction_study, lood_auc_correlation, lowrank_analysis, mia_auc,
    split_seed,
};
use lood::metrics::lood_report;
use lood::opt::{
    find_nonstationary_s, hessian_check, optimize_query, perturbation_scan, verify_stationarity,
};
use nalgebra::{DMatrix, DVector};

use crate::config::{
    self, parse_common, parse_differing, parse_kernel, parse_objective, parse_opt_config,
    parse_queries, CommonConfig, Differing, Queries, RawConfig,
};
use crate::dataset::{generate_toy, load_dataset, write_dataset_csv, ToyGeneratorSpec};
use crate::error::{CliError, Result};
use crate::jsonout::{fmt_f64_csv, J};

fn cfg_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

struct Ctx {
    raw: RawConfig,
    common: CommonConfig,
}

impl Ctx {
    fn new(raw: RawConfig) -> Result<Ctx> {
        let common = parse_common(&raw.table)?;
        Ok(Ctx { raw, common })
    }

    fn dataset(&self) -> Result<Dataset> {
        let path = self
            .common
            .dataset_path
            .as_ref()
            .ok_or_else(|| cfg_err("dataset_path is required for this subcommand"))?;
        if !path.exists() {
            return Err(cfg_err(format!(
                "dataset_path '{}' does not exist",
                path.display()
            )));
        }
        load_dataset(path, self.common.noise_variance)
    }

    /// Splits the dataset into (base D, differing S) per the config.
    fn pair(&self) -> Result<LeaveOneOutPair> {
        let data = self.dataset()?;
        match parse_differing(&self.raw.table)? {
            Differing::Indices(indices) => {
                for &i in &indices {
                    if i >= data.n() {
                        return Err(cfg_err(format!(
                            "differing index {i} out of bounds for {} records",
                            data.n()
                        )));
                    }
                }
                let keep: Vec<usize> =
                    (0..data.n()).filter(|i| !indices.contains(i)).collect();
                let d = data.dim();
                let base_feats =
                    DMatrix::from_fn(keep.len(), d, |i, j| data.features[(keep[i], j)]);
                let base_labels = DVector::from_fn(keep.len(), |i, _| data.labels[keep[i]]);
                let s_feats =
                    DMatrix::from_fn(indices.len(), d, |i, j| data.features[(indices[i], j)]);
                let s_labels = DVector::from_fn(indices.len(), |i, _| data.labels[indices[i]]);
                Ok(LeaveOneOutPair::new(
                    Dataset::new(base_feats, base_labels, data.noise_variance),
                    s_feats,
                    s_labels,
                ))
            }
            Differing::Inline { features, labels } => {
                if features.ncols() != data.dim() {
                    return Err(cfg_err(format!(
                        "differing features have {} columns, dataset has {}",
                        features.ncols(),
                        data.dim()
                    )));
                }
                Ok(LeaveOneOutPair::new(data, features, labels))
            }
        }
    }

    fn queries_for(&self, pair: &LeaveOneOutPair) -> Result<DMatrix<f64>> {
        match parse_queries(&self.raw.table)? {
            Queries::AtDiffering => Ok(pair.differing.clone()),
            Queries::Inline(points) => {
                if points.ncols() != pair.differing.ncols() {
                    return Err(cfg_err(format!(
                        "queries have {} columns, data has {}",
                        points.ncols(),
                        pair.differing.ncols()
                    )));
                }
                Ok(points)
            }
        }
    }

    fn ensure_output_dir(&self) -> Result<&Path> {
        std::fs::create_dir_all(&self.common.output_dir).map_err(|e| {
            CliError::Io(format!(
                "creating output_dir '{}': {e}",
                self.common.output_dir.display()
            ))
        })?;
        Ok(&self.common.output_dir)
    }

    fn write_manifest(&self) -> Result<()> {
        let manifest = J::O(vec![
            ("config_sha256", J::S(self.raw.sha256_hex())),
            ("seed", J::UInt(self.common.seed)),
            ("version", J::S(env!("CARGO_PKG_VERSION").to_string())),
        ]);
        self.write_text("manifest.json", &manifest.to_string())
    }

    fn write_text(&self, name: &str, content: &str) -> Result<()> {
        let path = self.common.output_dir.join(name);
        let mut data = content.to_string();
        if !data.ends_with('\n') {
            data.push('\n');
        }
        std::fs::write(&path, data)
            .map_err(|e| CliError::Io(format!("writing {}: {e}", path.display())))?;
        Ok(())
    }
}

fn rows_json(rows: &[Vec<f64>]) -> J {
    J::A(rows.iter().map(|r| J::floats(r)).collect())
}

pub fn run(name: &str, raw: RawConfig) -> Result<String> {
    let ctx = Ctx::new(raw)?;
    ctx.ensure_output_dir()?;
    let summary = match name {
        "score" => score(&ctx)?,
        "optimize-query" => optimize(&ctx)?,
        "scan-perturbation" => scan_perturbation(&ctx)?,
        "verify-stationarity" => stationarity(&ctx)?,
        "find-nonstationary-s" => nonstationary_s(&ctx)?,
        "hessian-check" => hessian(&ctx)?,
        "mia-auc" => mia(&ctx)?,
        "correlate" => correlate(&ctx)?,
        "lowrank-bound" => lowrank(&ctx)?,
        "activation-scan" => activation(&ctx)?,
        "group-reconstruct" => group_reconstruct(&ctx)?,
        "gen-toy" => gen_toy(&ctx)?,
        other => return Err(cfg_err(format!("unknown subcommand '{other}'"))),
    };
    ctx.write_manifest()?;
    Ok(summary)
}

fn score(ctx: &Ctx) -> Result<String> {
    let spec = parse_kernel(&ctx.raw.table)?;
    let pair = ctx.pair()?;
    let queries = ctx.queries_for(&pair)?;
    let report = lood_report(&spec, &pair, &queries)?;
    let json = J::O(vec![
        ("kl", J::F(report.kl)),
        ("mean_distance", J::F(report.mean_distance)),
        (
            "variance_ratio",
            report.variance_ratio.map_or(J::Null, J::F),
        ),
        ("query_count", J::UInt(report.query_count as u64)),
        ("variance_floored", J::Bool(report.variance_floored)),
    ]);
    ctx.write_text("score.json", &json.to_string())?;
    Ok(format!(
        "score: kl={} mean_distance={} queries={}",
        fmt_f64_csv(report.kl),
        fmt_f64_csv(report.mean_distance),
        report.query_count
    ))
}

fn optimize(ctx: &Ctx) -> Result<String> {
    let spec = parse_kernel(&ctx.raw.table)?;
    let pair = ctx.pair()?;
    let objective = parse_objective(&ctx.raw.table)?;
    let opt_cfg = parse_opt_config(&ctx.raw.table, split_seed(ctx.common.seed, 1))?;
    let q_count = match config::optional_section(&ctx.raw.table, "optimizer")? {
        Some(s) => config::get_usize(s, "q_count")?.unwrap_or(1),
        None => 1,
    };
    if q_count == 0 {
        return Err(cfg_err("optimizer.q_count must be >= 1"));
    }
    let trace = optimize_query(&spec, &pair, objective, q_count, &opt_cfg)?;
    let iterates = J::A(trace
        .iterates
        .iter()
        .map(|p| {
            J::O(vec![
                ("iteration", J::UInt(p.iteration as u64)),
                ("query", J::floats(&p.query)),
                ("lood", J::F(p.lood)),
                ("grad_norm", J::F(p.grad_norm)),
            ])
        })
        .collect());
    let json = J::O(vec![
        ("converged", J::Bool(trace.converged)),
        ("final_value", J::F(trace.final_value)),
        ("final_query", rows_json(&trace.final_query)),
        ("iterations", J::UInt(trace.iterates.len() as u64)),
        ("iterates", iterates),
    ]);
    ctx.write_text("optimize_query.json", &json.to_string())?;
    Ok(format!(
        "optimize-query: converged={} final_value={} iterations={}",
        trace.converged,
        fmt_f64_csv(trace.final_value),
        trace.iterates.len()
    ))
}

fn scan_perturbation(ctx: &Ctx) -> Result<String> {
    let spec = parse_kernel(&ctx.raw.table)?;
    let pair = ctx.pair()?;
    if pair.s() != 1 {
        return Err(cfg_err("scan-perturbation requires a single differing record"));
    }
    let d = pair.differing.ncols();
    let section = config::optional_section(&ctx.raw.table, "scan")?;
    let direction = match section.and_then(|s| config::get_f64_vec(s, "direction").transpose()) {
        Some(v) => DVector::from_vec(v?),
        None => {
            let mut e = DVector::zeros(d);
            e[0] = 1.0;
            e
        }
    };
    if direction.len() != d {
        return Err(cfg_err(format!(
            "scan.direction has {} entries, data dimension is {d}",
            direction.len()
        )));
    }
    if direction.amax() > 1.0 + 1e-12 {
        return Err(cfg_err(
            "scan.direction entries must lie in [-1, 1] (unit infinity-ball)",
        ));
    }
    let xs: Vec<f64> = match section {
        Some(s) => {
            if let Some(list) = config::get_f64_vec(s, "xs")? {
                list
            } else {
                let lo = config::get_f64(s, "lo")?.unwrap_or(-2.0);
                let hi = config::get_f64(s, "hi")?.unwrap_or(2.0);
                let step = config::get_f64(s, "step")?.unwrap_or(0.1);
                if step <= 0.0 || hi < lo {
                    return Err(cfg_err("scan: need step > 0 and hi >= lo"));
                }
                let count = ((hi - lo) / step).round() as usize;
                (0..=count).map(|i| lo + i as f64 * step).collect()
            }
        }
        None => (0..=40).map(|i| -2.0 + i as f64 * 0.1).collect(),
    };
    let curve = perturbation_scan(&spec, &pair, &direction, &xs)?;
    let mut csv = String::from("x,kl,mean_distance\n");
    for p in &curve {
        csv.push_str(&format!(
            "{},{},{}\n",
            fmt_f64_csv(p.x),
            fmt_f64_csv(p.kl),
            fmt_f64_csv(p.mean_distance)
        ));
    }
    ctx.write_text("scan_perturbation.csv", &csv)?;
    let peak = curve
        .iter()
        .max_by(|a, b| a.kl.partial_cmp(&b.kl).unwrap())
        .unwrap();
    Ok(format!(
        "scan-perturbation: {} points, kl peak {} at x={}",
        curve.len(),
        fmt_f64_csv(peak.kl),
        fmt_f64_csv(peak.x)
    ))
}

fn stationarity(ctx: &Ctx) -> Result<String> {
    let spec = parse_kernel(&ctx.raw.table)?;
    let pair = ctx.pair()?;
    if pair.s() != 1 {
        return Err(cfg_err("verify-stationarity requires a single differing record"));
    }
    let section = config::optional_section(&ctx.raw.table, "stationarity")?;
    let (tol_analytic, tol_fd) = match section {
        Some(s) => (
            config::get_f64(s, "tol_analytic")?.unwrap_or(1e-5),
            config::get_f64(s, "tol_fd")?.unwrap_or(1e-3),
        ),
        None => (1e-5, 1e-3),
    };
    let report = verify_stationarity(&spec, &pair, tol_analytic, tol_fd)?;
    let json = J::O(vec![
        ("analytic_norm", J::F(report.analytic_norm)),
        ("fd_norm", J::F(report.fd_norm)),
        ("passed", J::Bool(report.passed)),
        ("regularity_passed", J::Bool(report.regularity_passed)),
        ("tangential", J::Bool(report.tangential)),
    ]);
    ctx.write_text("verify_stationarity.json", &json.to_string())?;
    Ok(format!(
        "verify-stationarity: passed={} analytic_norm={} fd_norm={}",
        report.passed,
        fmt_f64_csv(report.analytic_norm),
        fmt_f64_csv(report.fd_norm)
    ))
}

fn nonstationary_s(ctx: &Ctx) -> Result<String> {
    let spec = parse_kernel(&ctx.raw.table)?;
    let data = ctx.dataset()?;
    let section = config::optional_section(&ctx.raw.table, "nonstationary")?;
    let restarts = match section {
        Some(s) => config::get_usize(s, "restarts")?.unwrap_or(10),
        None => 10,
    };
    let rule = match section {
        Some(s) => config::get_str(s, "label_rule")?.unwrap_or("sine").to_string(),
        None => "sine".to_string(),
    };
    if rule != "sine" {
        return Err(cfg_err(format!(
            "unknown nonstationary.label_rule '{rule}' (only 'sine' is provided)"
        )));
    }
    let label_fn = |s: &DVector<f64>| s[0].sin();
    let opt_cfg = parse_opt_config(&ctx.raw.table, split_seed(ctx.common.seed, 2))?;
    let (s_star, grad_norm) = find_nonstationary_s(&spec, &data, &label_fn, &opt_cfg, restarts)?;
    let json = J::O(vec![
        ("s_star", J::floats(s_star.as_slice())),
        ("grad_norm", J::F(grad_norm)),
        ("restarts", J::UInt(restarts as u64)),
    ]);
    ctx.write_text("find_nonstationary_s.json", &json.to_string())?;
    Ok(format!(
        "find-nonstationary-s: s_star={} grad_norm={}",
        fmt_f64_csv(s_star[0]),
        fmt_f64_csv(grad_norm)
    ))
}

fn hessian(ctx: &Ctx) -> Result<String> {
    let spec = parse_kernel(&ctx.raw.table)?;
    let pair = ctx.pair()?;
    if pair.s() != 1 {
        return Err(cfg_err("hessian-check requires a single differing record"));
    }
    let report = hessian_check(&spec, &pair)?;
    let json = J::O(vec![
        ("eigenvalues", J::floats(&report.eigenvalues)),
        ("max_eigenvalue", J::F(report.max_eigenvalue)),
        ("negative_definite", J::Bool(report.negative_definite)),
    ]);
    ctx.write_text("hessian_check.json", &json.to_string())?;
    Ok(format!(
        "hessian-check: negative_definite={} max_eigenvalue={}",
        report.negative_definite,
        fmt_f64_csv(report.max_eigenvalue)
    ))
}

fn mia(ctx: &Ctx) -> Result<String> {
    let spec = parse_kernel(&ctx.raw.table)?;
    let pair = ctx.pair()?;
    let queries = ctx.queries_for(&pair)?;
    if queries.nrows() != 1 {
        return Err(cfg_err("mia-auc requires exactly one query"));
    }
    let n_samples = match config::optional_section(&ctx.raw.table, "mia")? {
        Some(s) => config::get_usize(s, "n_samples")?.unwrap_or(5000),
        None => 5000,
    };
    let (pd, pdp) = loo_pair_posteriors(&spec, &pair, &queries)?;
    let result = mia_auc(&pd, &pdp, n_samples, split_seed(ctx.common.seed, 3))?;
    let json = J::O(vec![
        ("auc", J::F(result.auc)),
        ("n_samples", J::UInt(result.n_samples as u64)),
        ("seed", J::UInt(result.seed)),
    ]);
    ctx.write_text("mia_auc.json", &json.to_string())?;
    Ok(format!(
        "mia-auc: auc={} n_samples={n_samples}",
        fmt_f64_csv(result.auc)
    ))
}

fn correlate(ctx: &Ctx) -> Result<String> {
    let spec = parse_kernel(&ctx.raw.table)?;
    let data = ctx.dataset()?;
    let section = config::section(&ctx.raw.table, "correlate")?;
    let cand_path = config::get_str(section, "candidates_path")?
        .ok_or_else(|| cfg_err("correlate.candidates_path is required"))?;
    let cand_path = PathBuf::from(cand_path);
    if !cand_path.exists() {
        return Err(cfg_err(format!(
            "correlate.candidates_path '{}' does not exist",
            cand_path.display()
        )));
    }
    let n_samples = config::get_usize(section, "n_samples")?.unwrap_or(5000);
    let cands = load_dataset(&cand_path, data.noise_variance)?;
    if cands.dim() != data.dim() {
        return Err(cfg_err(format!(
            "candidates have dimension {}, dataset has {}",
            cands.dim(),
            data.dim()
        )));
    }
    let candidates: Vec<(DVector<f64>, f64)> = (0..cands.n())
        .map(|i| {
            (
                DVector::from(cands.features.row(i).transpose()),
                cands.labels[i],
            )
        })
        .collect();
    let report =
        lood_auc_correlation(&spec, &data, &candidates, n_samples, split_seed(ctx.common.seed, 4))?;
    let mut csv = String::from("index,kl,auc\n");
    for row in &report.rows {
        csv.push_str(&format!(
            "{},{},{}\n",
            row.index,
            fmt_f64_csv(row.kl),
            fmt_f64_csv(row.auc)
        ));
    }
    ctx.write_text("correlate.csv", &csv)?;
    let json = J::O(vec![
        ("pearson", report.pearson.map_or(J::Null, J::F)),
        ("spearman", report.spearman.map_or(J::Null, J::F)),
        ("candidates", J::UInt(report.rows.len() as u64)),
        ("n_samples", J::UInt(n_samples as u64)),
    ]);
    ctx.write_text("correlate.json", &json.to_string())?;
    let rho = report.spearman.unwrap_or(f64::NAN);
    Ok(format!(
        "correlate: {} candidates, spearman={}",
        report.rows.len(),
        fmt_f64_csv(rho)
    ))
}

fn lowrank(ctx: &Ctx) -> Result<String> {
    let spec = parse_kernel(&ctx.raw.table)?;
    let pair = ctx.pair()?;
    let d = pair.differing.ncols();
    let section = config::optional_section(&ctx.raw.table, "lowrank")?;
    let (lo, hi, steps) = match section {
        Some(s) => (
            config::get_f64(s, "grid_lo")?.unwrap_or(-2.0),
            config::get_f64(s, "grid_hi")?.unwrap_or(2.0),
            config::get_usize(s, "grid_steps")?.unwrap_or(9),
        ),
        None => (-2.0, 2.0, 9),
    };
    if steps < 2 || hi <= lo {
        return Err(cfg_err("lowrank: need grid_steps >= 2 and grid_hi > grid_lo"));
    }
    let total = (steps as u128).pow(d as u32);
    if total > 100_000 {
        return Err(cfg_err(format!(
            "lowrank: grid of {steps}^{d} = {total} points is too large (max 100000)"
        )));
    }
    let axis: Vec<f64> = (0..steps)
        .map(|i| lo + (hi - lo) * i as f64 / (steps - 1) as f64)
        .collect();
    let mut grid: Vec<DVector<f64>> = vec![DVector::zeros(d)];
    for dim in 0..d {
        let mut next = Vec::with_capacity(grid.len() * steps);
        for point in &grid {
            for &v in &axis {
                let mut p = point.clone();
                p[dim] = v;
                next.push(p);
            }
        }
        grid = next;
    }
    let report = lowrank_analysis(&spec, &pair, &grid)?;
    let json = J::O(vec![
        ("alpha_min", J::F(report.alpha_min)),
        ("h_alpha_min", J::F(report.h_alpha_min)),
        ("n", J::UInt(report.n as u64)),
        ("zeta", J::F(report.zeta)),
        ("a_n", J::F(report.a_n)),
        ("b", J::F(report.b)),
        ("bound", J::F(report.bound)),
        ("observed_max_lood", J::F(report.observed_max_lood)),
    ]);
    ctx.write_text("lowrank_bound.json", &json.to_string())?;
    Ok(format!(
        "lowrank-bound: bound={} observed_max={} h={}",
        fmt_f64_csv(report.bound),
        fmt_f64_csv(report.observed_max_lood),
        fmt_f64_csv(report.h_alpha_min)
    ))
}

fn activation(ctx: &Ctx) -> Result<String> {
    let section = config::section(&ctx.raw.table, "activation_scan")?;
    let activation =
        config::parse_activation(config::get_str(section, "activation")?.unwrap_or("relu"))?;
    let (crit_w, crit_b) = critical_fc_params(activation);
    let weight_variance = config::get_f64(section, "weight_variance")?.unwrap_or(crit_w);
    let bias_variance = config::get_f64(section, "bias_variance")?.unwrap_or(crit_b);
    let depths: Vec<usize> = match config::get_f64_vec(section, "depths")? {
        Some(v) => v.iter().map(|&x| x as usize).collect(),
        None => vec![4, 8, 16, 32, 64],
    };
    let x = config::get_f64_vec(section, "x")?
        .ok_or_else(|| cfg_err("activation_scan.x is required"))?;
    let z = config::get_f64_vec(section, "z")?
        .ok_or_else(|| cfg_err("activation_scan.z is required"))?;
    if x.len() != z.len() {
        return Err(cfg_err("activation_scan: x and z must have equal length"));
    }
    let result = activation_scan(
        activation,
        weight_variance,
        bias_variance,
        &depths,
        &DVector::from_vec(x),
        &DVector::from_vec(z),
    )?;
    let mut csv = String::from("depth,distance\n");
    for (depth, dist) in result.depths.iter().zip(&result.distances) {
        csv.push_str(&format!("{depth},{}\n", fmt_f64_csv(*dist)));
    }
    ctx.write_text("activation_scan.csv", &csv)?;
    let json = J::O(vec![
        ("activation", J::S(format!("{:?}", result.activation))),
        (
            "depths",
            J::A(result.depths.iter().map(|&v| J::UInt(v as u64)).collect()),
        ),
        ("distances", J::floats(&result.distances)),
        ("fitted_slope", J::F(result.fitted_slope)),
        ("alpha", J::F(result.alpha)),
        ("rate", J::UInt(result.rate as u64)),
        ("degenerate", J::Bool(result.degenerate)),
    ]);
    ctx.write_text("activation_scan.json", &json.to_string())?;
    Ok(format!(
        "activation-scan: {:?} fitted_slope={} rate={}",
        result.activation,
        fmt_f64_csv(result.fitted_slope),
        result.rate
    ))
}

fn group_reconstruct(ctx: &Ctx) -> Result<String> {
    let spec = parse_kernel(&ctx.raw.table)?;
    let data = ctx.dataset()?;
    let section = config::section(&ctx.raw.table, "group")?;
    let features = config::get_matrix(section, "features")?
        .ok_or_else(|| cfg_err("group.features is required"))?;
    let labels = config::get_f64_vec(section, "labels")?
        .ok_or_else(|| cfg_err("group.labels is required"))?;
    if labels.len() != features.nrows() {
        return Err(cfg_err(format!(
            "group: {} feature rows but {} labels",
            features.nrows(),
            labels.len()
        )));
    }
    if features.nrows() < 2 {
        return Err(cfg_err("group needs at least 2 members"));
    }
    if features.ncols() != data.dim() {
        return Err(cfg_err(format!(
            "group features have {} columns, dataset has {}",
            features.ncols(),
            data.dim()
        )));
    }
    let runs = config::get_usize(section, "runs")?.unwrap_or(30);
    if runs == 0 {
        return Err(cfg_err("group.runs must be >= 1"));
    }
    let opt_cfg = parse_opt_config(&ctx.raw.table, split_seed(ctx.common.seed, 5))?;
    let report = group_reconstruction_study(
        &spec,
        &data,
        &features,
        &DVector::from_vec(labels),
        runs,
        &opt_cfg,
    )?;
    let mut csv = String::from("member,recoveries,kl_at_self\n");
    for m in &report.members {
        csv.push_str(&format!(
            "{},{},{}\n",
            m.index,
            m.recoveries,
            fmt_f64_csv(m.kl_at_self)
        ));
    }
    ctx.write_text("group_reconstruct.csv", &csv)?;
    let members = J::A(report
        .members
        .iter()
        .map(|m| {
            J::O(vec![
                ("index", J::UInt(m.index as u64)),
                ("recoveries", J::UInt(m.recoveries as u64)),
                ("kl_at_self", J::F(m.kl_at_self)),
                ("assignment_distances", J::floats(&m.assignment_distances)),
            ])
        })
        .collect());
    let json = J::O(vec![
        ("members", members),
        ("non_converged", J::UInt(report.non_converged as u64)),
        ("runs", J::UInt(report.runs as u64)),
    ]);
    ctx.write_text("group_reconstruct.json", &json.to_string())?;
    let best = report
        .members
        .iter()
        .max_by_key(|m| m.recoveries)
        .unwrap();
    Ok(format!(
        "group-reconstruct: {} runs, top member {} with {} recoveries",
        report.runs, best.index, best.recoveries
    ))
}

fn gen_toy(ctx: &Ctx) -> Result<String> {
    let section = config::optional_section(&ctx.raw.table, "toy")?;
    let (kind, n, x_std, noise, out_name) = match section {
        Some(s) => (
            config::get_str(s, "kind")?.unwrap_or("sine").to_string(),
            config::get_usize(s, "n")?.unwrap_or(10),
            config::get_f64(s, "x_std")?.unwrap_or(1.0),
            config::get_f64(s, "noise_variance")?.unwrap_or(ctx.common.noise_variance),
            config::get_str(s, "out")?.unwrap_or("toy.csv").to_string(),
        ),
        None => ("sine".to_string(), 10, 1.0, ctx.common.noise_variance, "toy.csv".to_string()),
    };
    if kind != "sine" {
        return Err(cfg_err(format!("unknown toy.kind '{kind}' (only 'sine')")));
    }
    let data = generate_toy(&ToyGeneratorSpec {
        n,
        x_std,
        noise_variance: noise,
        seed: ctx.common.seed,
    })?;
    let path = ctx.common.output_dir.join(&out_name);
    write_dataset_csv(&path, &data)?;
    Ok(format!(
        "gen-toy: wrote {} records to {}",
        data.n(),
        path.display()
    ))
}
