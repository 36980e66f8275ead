//! Experiment configuration: a TOML file with dotted sections, plus
//! `--set key=value` command-line overrides applied on top.

use std::path::{Path, PathBuf};

use lood::kernels::{Activation, CorrelationProfile, KernelSpec};
use lood::opt::{Init, Objective, OptConfig};
use nalgebra::{DMatrix, DVector};
use sha2::{Digest, Sha256};
use toml::Value;

use crate::error::{CliError, Result};

fn cfg_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

/// The raw configuration: the parsed TOML tree after overrides, plus its
/// canonical serialization (hashed into the run manifest).
pub struct RawConfig {
    pub table: toml::Table,
    pub canonical: String,
}

impl RawConfig {
    pub fn load(path: &Path, overrides: &[String]) -> Result<RawConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("reading config {}: {e}", path.display())))?;
        let mut table: toml::Table = text
            .parse()
            .map_err(|e| cfg_err(format!("parsing config {}: {e}", path.display())))?;
        for ov in overrides {
            apply_override(&mut table, ov)?;
        }
        let canonical = toml::to_string(&table)
            .map_err(|e| cfg_err(format!("serializing config: {e}")))?;
        Ok(RawConfig { table, canonical })
    }

    pub fn sha256_hex(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.canonical.as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Applies one `dotted.key=value` override; the value is parsed as TOML
/// (falling back to a bare string when that fails).
fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw_value) = spec
        .split_once('=')
        .ok_or_else(|| cfg_err(format!("override '{spec}' is not key=value")))?;
    let value: Value = match format!("v = {raw_value}").parse::<toml::Table>() {
        Ok(t) => t["v"].clone(),
        Err(_) => Value::String(raw_value.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    let mut current = table;
    for part in &parts[..parts.len() - 1] {
        current = current
            .entry(part.to_string())
            .or_insert(Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| cfg_err(format!("override '{key}': '{part}' is not a table")))?;
    }
    current.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn get<'a>(table: &'a toml::Table, key: &str) -> Option<&'a Value> {
    table.get(key)
}

pub fn get_f64(table: &toml::Table, key: &str) -> Result<Option<f64>> {
    match get(table, key) {
        None => Ok(None),
        Some(Value::Float(f)) => Ok(Some(*f)),
        Some(Value::Integer(i)) => Ok(Some(*i as f64)),
        Some(other) => Err(cfg_err(format!("'{key}' must be a number, got {other}"))),
    }
}

pub fn get_u64(table: &toml::Table, key: &str) -> Result<Option<u64>> {
    match get(table, key) {
        None => Ok(None),
        Some(Value::Integer(i)) if *i >= 0 => Ok(Some(*i as u64)),
        Some(other) => Err(cfg_err(format!(
            "'{key}' must be a nonnegative integer, got {other}"
        ))),
    }
}

pub fn get_usize(table: &toml::Table, key: &str) -> Result<Option<usize>> {
    Ok(get_u64(table, key)?.map(|v| v as usize))
}

pub fn get_bool(table: &toml::Table, key: &str) -> Result<Option<bool>> {
    match get(table, key) {
        None => Ok(None),
        Some(Value::Boolean(b)) => Ok(Some(*b)),
        Some(other) => Err(cfg_err(format!("'{key}' must be a boolean, got {other}"))),
    }
}

pub fn get_str<'a>(table: &'a toml::Table, key: &str) -> Result<Option<&'a str>> {
    match get(table, key) {
        None => Ok(None),
        Some(Value::String(s)) => Ok(Some(s)),
        Some(other) => Err(cfg_err(format!("'{key}' must be a string, got {other}"))),
    }
}

pub fn get_table<'a>(table: &'a toml::Table, key: &str) -> Result<Option<&'a toml::Table>> {
    match get(table, key) {
        None => Ok(None),
        Some(Value::Table(t)) => Ok(Some(t)),
        Some(other) => Err(cfg_err(format!("'{key}' must be a table, got {other}"))),
    }
}

fn value_as_f64(v: &Value, ctx: &str) -> Result<f64> {
    match v {
        Value::Float(f) => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        other => Err(cfg_err(format!("{ctx}: expected number, got {other}"))),
    }
}

pub fn get_f64_vec(table: &toml::Table, key: &str) -> Result<Option<Vec<f64>>> {
    match get(table, key) {
        None => Ok(None),
        Some(Value::Array(items)) => items
            .iter()
            .map(|v| value_as_f64(v, key))
            .collect::<Result<Vec<f64>>>()
            .map(Some),
        Some(other) => Err(cfg_err(format!("'{key}' must be an array, got {other}"))),
    }
}

/// Parses an array of equal-length number arrays into a row-major matrix.
pub fn get_matrix(table: &toml::Table, key: &str) -> Result<Option<DMatrix<f64>>> {
    let rows = match get(table, key) {
        None => return Ok(None),
        Some(Value::Array(items)) => items,
        Some(other) => {
            return Err(cfg_err(format!(
                "'{key}' must be an array of arrays, got {other}"
            )))
        }
    };
    if rows.is_empty() {
        return Err(cfg_err(format!("'{key}' must not be empty")));
    }
    let mut data: Vec<Vec<f64>> = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        match row {
            Value::Array(cells) => {
                let parsed: Vec<f64> = cells
                    .iter()
                    .map(|v| value_as_f64(v, &format!("{key}[{i}]")))
                    .collect::<Result<_>>()?;
                data.push(parsed);
            }
            other => {
                return Err(cfg_err(format!(
                    "'{key}[{i}]' must be an array, got {other}"
                )))
            }
        }
    }
    let d = data[0].len();
    if d == 0 || data.iter().any(|r| r.len() != d) {
        return Err(cfg_err(format!("'{key}' rows must be equal nonzero length")));
    }
    Ok(Some(DMatrix::from_fn(data.len(), d, |i, j| data[i][j])))
}

pub fn parse_kernel(table: &toml::Table) -> Result<KernelSpec> {
    let kernel = get_table(table, "kernel")?
        .ok_or_else(|| cfg_err("missing [kernel] section"))?;
    let family = get_str(kernel, "family")?
        .ok_or_else(|| cfg_err("missing kernel.family"))?;
    let spec = match family {
        "rbf" => KernelSpec::Rbf {
            length: get_f64(kernel, "length")?.unwrap_or(1.0),
        },
        "linear" => KernelSpec::Linear {
            scale: get_f64(kernel, "scale")?.unwrap_or(1.0),
        },
        "correlation" => KernelSpec::Correlation {
            profile: CorrelationProfile::Exp {
                rate: get_f64(kernel, "rate")?.unwrap_or(1.0),
            },
        },
        "nngp-fc" => KernelSpec::NngpFc {
            depth: get_usize(kernel, "depth")?.unwrap_or(1),
            activation: parse_activation(
                get_str(kernel, "activation")?.unwrap_or("relu"),
            )?,
            weight_variance: get_f64(kernel, "weight_variance")?.unwrap_or(2.0),
            bias_variance: get_f64(kernel, "bias_variance")?.unwrap_or(0.0),
            normalize_inputs: get_bool(kernel, "normalize_inputs")?.unwrap_or(true),
        },
        other => {
            return Err(cfg_err(format!(
                "unknown kernel.family '{other}' (expected rbf | linear | correlation | nngp-fc)"
            )))
        }
    };
    spec.validate().map_err(CliError::Numerical)?;
    Ok(spec)
}

pub fn parse_activation(name: &str) -> Result<Activation> {
    match name.to_ascii_lowercase().as_str() {
        "relu" => Ok(Activation::ReLU),
        "gelu" => Ok(Activation::GeLU),
        "tanh" => Ok(Activation::Tanh),
        "erf" => Ok(Activation::Erf),
        other => Err(cfg_err(format!(
            "unknown activation '{other}' (expected relu | gelu | tanh | erf)"
        ))),
    }
}

/// Which records differ between D and D'.
pub enum Differing {
    /// Indices into the loaded dataset; those rows become S and are removed
    /// from D.
    Indices(Vec<usize>),
    /// Explicit records.
    Inline {
        features: DMatrix<f64>,
        labels: DVector<f64>,
    },
}

pub fn parse_differing(table: &toml::Table) -> Result<Differing> {
    let section = get_table(table, "differing")?
        .ok_or_else(|| cfg_err("missing [differing] section"))?;
    if let Some(Value::Array(items)) = get(section, "indices") {
        let mut indices = Vec::with_capacity(items.len());
        for v in items {
            match v {
                Value::Integer(i) if *i >= 0 => indices.push(*i as usize),
                other => {
                    return Err(cfg_err(format!(
                        "differing.indices entries must be nonnegative integers, got {other}"
                    )))
                }
            }
        }
        if indices.is_empty() {
            return Err(cfg_err("differing.indices must not be empty"));
        }
        let mut sorted = indices.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != indices.len() {
            return Err(cfg_err("differing.indices must be distinct"));
        }
        return Ok(Differing::Indices(indices));
    }
    let features = get_matrix(section, "features")?
        .ok_or_else(|| cfg_err("differing needs either 'indices' or 'features' + 'labels'"))?;
    let labels = get_f64_vec(section, "labels")?
        .ok_or_else(|| cfg_err("differing.labels is required with differing.features"))?;
    if labels.len() != features.nrows() {
        return Err(cfg_err(format!(
            "differing: {} feature rows but {} labels",
            features.nrows(),
            labels.len()
        )));
    }
    Ok(Differing::Inline {
        features,
        labels: DVector::from_vec(labels),
    })
}

/// Query specification: explicit points or "at-differing".
pub enum Queries {
    AtDiffering,
    Inline(DMatrix<f64>),
}

pub fn parse_queries(table: &toml::Table) -> Result<Queries> {
    let section = match get_table(table, "queries")? {
        None => return Ok(Queries::AtDiffering),
        Some(s) => s,
    };
    match get_str(section, "mode")?.unwrap_or("at-differing") {
        "at-differing" => Ok(Queries::AtDiffering),
        "inline" => {
            let points = get_matrix(section, "points")?
                .ok_or_else(|| cfg_err("queries.mode = \"inline\" requires queries.points"))?;
            Ok(Queries::Inline(points))
        }
        other => Err(cfg_err(format!(
            "unknown queries.mode '{other}' (expected at-differing | inline)"
        ))),
    }
}

pub fn parse_opt_config(table: &toml::Table, root_seed: u64) -> Result<OptConfig> {
    let mut config = OptConfig {
        seed: root_seed,
        ..OptConfig::default()
    };
    let section = match get_table(table, "optimizer")? {
        None => return Ok(config),
        Some(s) => s,
    };
    if let Some(v) = get_usize(section, "max_iters")? {
        if v == 0 {
            return Err(cfg_err("optimizer.max_iters must be >= 1"));
        }
        config.max_iters = v;
    }
    if let Some(v) = get_f64(section, "learning_rate")? {
        if v <= 0.0 {
            return Err(cfg_err("optimizer.learning_rate must be > 0"));
        }
        config.learning_rate = Some(v);
    }
    if let Some(v) = get_f64(section, "grad_tol")? {
        if v <= 0.0 {
            return Err(cfg_err("optimizer.grad_tol must be > 0"));
        }
        config.grad_tol = v;
    }
    if let Some(v) = get_bool(section, "project_to_sphere")? {
        config.project_to_sphere = v;
    }
    if let Some(v) = get_u64(section, "seed")? {
        config.seed = v;
    }
    match get_str(section, "init")?.unwrap_or("uniform") {
        "uniform" => {
            let lo = get_f64(section, "init_lo")?.unwrap_or(-5.0);
            let hi = get_f64(section, "init_hi")?.unwrap_or(5.0);
            if hi <= lo {
                return Err(cfg_err("optimizer.init_hi must exceed optimizer.init_lo"));
            }
            config.init = Init::UniformInBox { lo, hi };
        }
        "given" => {
            let point = get_matrix(section, "init_point")?
                .ok_or_else(|| cfg_err("optimizer.init = \"given\" requires init_point"))?;
            config.init = Init::GivenPoint(point);
        }
        "gaussian" => {
            let point = get_matrix(section, "init_point")?
                .ok_or_else(|| cfg_err("optimizer.init = \"gaussian\" requires init_point"))?;
            let std = get_f64(section, "init_std")?.unwrap_or(1.0);
            if std <= 0.0 {
                return Err(cfg_err("optimizer.init_std must be > 0"));
            }
            config.init = Init::GaussianAround { point, std };
        }
        other => {
            return Err(cfg_err(format!(
                "unknown optimizer.init '{other}' (expected uniform | given | gaussian)"
            )))
        }
    }
    Ok(config)
}

pub fn parse_objective(table: &toml::Table) -> Result<Objective> {
    let section = match get_table(table, "optimizer")? {
        None => return Ok(Objective::Kl),
        Some(s) => s,
    };
    match get_str(section, "objective")?.unwrap_or("kl") {
        "kl" => Ok(Objective::Kl),
        "mean-distance" => Ok(Objective::MeanDistance),
        other => Err(cfg_err(format!(
            "unknown optimizer.objective '{other}' (expected kl | mean-distance)"
        ))),
    }
}

pub struct CommonConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset_path: Option<PathBuf>,
    pub noise_variance: f64,
}

pub fn parse_common(table: &toml::Table) -> Result<CommonConfig> {
    let noise = get_f64(table, "noise_variance")?.unwrap_or(0.01);
    if noise < 0.0 {
        return Err(cfg_err("noise_variance must be >= 0"));
    }
    Ok(CommonConfig {
        seed: get_u64(table, "seed")?.unwrap_or(0),
        output_dir: PathBuf::from(get_str(table, "output_dir")?.unwrap_or("out")),
        dataset_path: get_str(table, "dataset_path")?.map(PathBuf::from),
        noise_variance: noise,
    })
}

pub fn section<'a>(table: &'a toml::Table, name: &str) -> Result<&'a toml::Table> {
    get_table(table, name)?.ok_or_else(|| cfg_err(format!("missing [{name}] section")))
}

pub fn optional_section<'a>(
    table: &'a toml::Table,
    name: &str,
) -> Result<Option<&'a toml::Table>> {
    get_table(table, name)
}
