//! CSV dataset ingestion and the toy sine generator.
//!
//! Format: header `f0,...,f{d-1},label`, one record per row, `#` comment lines
//! allowed. Non-finite values are rejected with their location.

use std::path::Path;

use lood::gp::Dataset;
use lood::leakage::split_seed;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CliError, Result};
use crate::jsonout::fmt_f64_csv;

pub fn load_dataset(path: &Path, noise_variance: f64) -> Result<Dataset> {
    let file = std::fs::File::open(path)
        .map_err(|e| CliError::Io(format!("opening {}: {e}", path.display())))?;
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| CliError::Config(format!("{}: reading header: {e}", path.display())))?
        .clone();
    let cols = headers.len();
    if cols < 2 {
        return Err(CliError::Config(format!(
            "{}: need at least one feature column and a label column",
            path.display()
        )));
    }
    let d = cols - 1;
    for (j, name) in headers.iter().enumerate() {
        let expected = if j < d {
            format!("f{j}")
        } else {
            "label".to_string()
        };
        if name != expected {
            return Err(CliError::Config(format!(
                "{}: header column {} is '{name}', expected '{expected}'",
                path.display(),
                j + 1
            )));
        }
    }
    let mut features: Vec<f64> = Vec::new();
    let mut labels: Vec<f64> = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| {
            CliError::Config(format!("{}: row {}: {e}", path.display(), row_idx + 2))
        })?;
        if record.len() != cols {
            return Err(CliError::Config(format!(
                "{}: row {}: {} fields, expected {cols}",
                path.display(),
                row_idx + 2,
                record.len()
            )));
        }
        for (col_idx, cell) in record.iter().enumerate() {
            let value: f64 = cell.parse().map_err(|_| {
                CliError::Config(format!(
                    "{}: row {}, column {} ('{}'): not a number: '{cell}'",
                    path.display(),
                    row_idx + 2,
                    col_idx + 1,
                    headers.get(col_idx).unwrap_or("?")
                ))
            })?;
            if !value.is_finite() {
                return Err(CliError::Config(format!(
                    "{}: row {}, column {}: non-finite value '{cell}'",
                    path.display(),
                    row_idx + 2,
                    col_idx + 1
                )));
            }
            if col_idx < d {
                features.push(value);
            } else {
                labels.push(value);
            }
        }
    }
    let n = labels.len();
    if n == 0 {
        return Err(CliError::Numerical(lood::LoodError::EmptyDataset));
    }
    let feats = DMatrix::from_fn(n, d, |i, j| features[i * d + j]);
    Ok(Dataset::new(feats, DVector::from_vec(labels), noise_variance))
}

pub fn write_dataset_csv(path: &Path, data: &Dataset) -> Result<()> {
    let d = data.dim();
    let mut out = String::new();
    for j in 0..d {
        out.push_str(&format!("f{j},"));
    }
    out.push_str("label\n");
    for i in 0..data.n() {
        for j in 0..d {
            out.push_str(&fmt_f64_csv(data.features[(i, j)]));
            out.push(',');
        }
        out.push_str(&fmt_f64_csv(data.labels[i]));
        out.push('\n');
    }
    std::fs::write(path, out)
        .map_err(|e| CliError::Io(format!("writing {}: {e}", path.display())))?;
    Ok(())
}

pub struct ToyGeneratorSpec {
    pub n: usize,
    pub x_std: f64,
    pub noise_variance: f64,
    pub seed: u64,
}

/// The 1-D sine dataset: x_i ~ N(0, x_std^2), y_i = sin(x_i) exactly; the
/// noise variance enters only through the GP likelihood term.
pub fn generate_toy(spec: &ToyGeneratorSpec) -> Result<Dataset> {
    if spec.n == 0 {
        return Err(CliError::Config("toy.n must be >= 1".to_string()));
    }
    if spec.x_std <= 0.0 {
        return Err(CliError::Config("toy.x_std must be > 0".to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed(spec.seed, 0x70791));
    let feats = DMatrix::from_fn(spec.n, 1, |_, _| {
        let z: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
        spec.x_std * z
    });
    let labels = DVector::from_fn(spec.n, |i, _| feats[(i, 0)].sin());
    Ok(Dataset::new(feats, labels, spec.noise_variance))
}
