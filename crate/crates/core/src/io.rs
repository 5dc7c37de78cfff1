//! File formats: CSV datasets and JSON checkpoints.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::divergence::DivergenceSpec;
use crate::error::{Error, Result};
use crate::gmm::GaussianMixture;
use crate::plan::PlanModel;

pub const SCHEMA_VERSION: u32 = 1;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.to_path_buf(), source }
}

fn parse_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Parse { path: path.to_path_buf(), message: message.into() }
}

/// Reads a CSV with a header row and one finite sample per line.
pub fn read_dataset(path: &Path) -> Result<Array2<f64>> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let dim = reader
        .headers()
        .map_err(|e| parse_err(path, e.to_string()))?
        .len();
    if dim == 0 {
        return Err(parse_err(path, "empty header"));
    }
    let mut values = Vec::new();
    let mut rows = 0;
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| parse_err(path, e.to_string()))?;
        if record.len() != dim {
            return Err(parse_err(path, format!("row {} has {} fields, expected {dim}", line + 1, record.len())));
        }
        for field in record.iter() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| parse_err(path, format!("row {}: `{field}` is not a number", line + 1)))?;
            if !v.is_finite() {
                return Err(parse_err(path, format!("row {}: non-finite value", line + 1)));
            }
            values.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(parse_err(path, "no samples"));
    }
    Array2::from_shape_vec((rows, dim), values).map_err(|e| parse_err(path, e.to_string()))
}

/// Writes samples under the given column names.
pub fn write_table(path: &Path, header: &[String], data: &Array2<f64>) -> Result<()> {
    if header.len() != data.ncols() {
        return Err(Error::DimensionMismatch { expected: data.ncols(), got: header.len() });
    }
    let file = File::create(path).map_err(io_err(path))?;
    let mut writer = csv::Writer::from_writer(BufWriter::new(file));
    let csv_err = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::Io { path: path.to_path_buf(), source },
        other => parse_err(path, format!("{other:?}")),
    };
    writer.write_record(header).map_err(csv_err)?;
    for row in data.rows() {
        writer.write_record(row.iter().map(|v| v.to_string())).map_err(csv_err)?;
    }
    writer.flush().map_err(io_err(path))
}

/// Column names `prefix0, prefix1, ...`.
pub fn column_names(prefix: &str, d: usize) -> Vec<String> {
    (0..d).map(|i| format!("{prefix}{i}")).collect()
}

pub fn write_dataset(path: &Path, data: &Array2<f64>) -> Result<()> {
    write_table(path, &column_names("x", data.ncols()), data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureRecord {
    pub log_weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub log_diag_covs: Vec<Vec<f64>>,
}

impl MixtureRecord {
    fn from_mixture(m: &GaussianMixture) -> Self {
        let rows = |a: &Array2<f64>| a.rows().into_iter().map(|r| r.to_vec()).collect();
        Self {
            log_weights: m.log_weights().to_vec(),
            means: rows(m.means()),
            log_diag_covs: rows(m.log_diag_covs()),
        }
    }

    fn to_mixture(&self, dim: usize) -> std::result::Result<GaussianMixture, String> {
        let c = self.log_weights.len();
        let matrix = |name: &str, rows: &[Vec<f64>]| -> std::result::Result<Array2<f64>, String> {
            if rows.len() != c || rows.iter().any(|r| r.len() != dim) {
                return Err(format!("`{name}` must be {c} rows of length {dim}"));
            }
            Ok(Array2::from_shape_fn((c, dim), |(k, i)| rows[k][i]))
        };
        let means = matrix("means", &self.means)?;
        let covs = matrix("log_diag_covs", &self.log_diag_covs)?;
        GaussianMixture::new(Array1::from(self.log_weights.clone()), means, covs).map_err(|e| e.to_string())
    }
}

/// On-disk form of a trained plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub dim: usize,
    pub epsilon: f64,
    pub div1: DivergenceSpec,
    pub div2: DivergenceSpec,
    pub v: MixtureRecord,
    pub u: MixtureRecord,
    pub seed: u64,
    pub steps_trained: u64,
}

impl Checkpoint {
    pub fn from_plan(plan: &PlanModel, seed: u64, steps_trained: u64) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            dim: plan.dim(),
            epsilon: plan.epsilon(),
            div1: plan.div1,
            div2: plan.div2,
            v: MixtureRecord::from_mixture(&plan.v),
            u: MixtureRecord::from_mixture(&plan.u),
            seed,
            steps_trained,
        }
    }

    pub fn to_plan(&self) -> std::result::Result<PlanModel, String> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(format!("unsupported schema_version {}", self.schema_version));
        }
        let v = self.v.to_mixture(self.dim)?;
        let u = self.u.to_mixture(self.dim)?;
        for div in [self.div1, self.div2] {
            DivergenceSpec::new(div.kind, div.tau).map_err(|e| e.to_string())?;
        }
        PlanModel::new(self.epsilon, v, u, self.div1, self.div2).map_err(|e| e.to_string())
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, ckpt).map_err(|e| parse_err(path, e.to_string()))?;
    writeln!(w).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

pub fn load_checkpoint(path: &Path) -> Result<(Checkpoint, PlanModel)> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| parse_err(path, e.to_string()))?;
    let plan = ckpt.to_plan().map_err(|m| parse_err(path, m))?;
    Ok((ckpt, plan))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| parse_err(path, e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(io_err(path))
}
