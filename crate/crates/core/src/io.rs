//! Reading data and writing results: CSV data with a JSON descriptor, tidy
//! metric CSVs, and the on-disk format for fitted states and chains.
//!
//! Matrices are stored as raw little-endian `f64` in column-major order; the
//! shapes live in a JSON manifest next to them.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::chain::{AcceptanceStats, Chain, ChainSample};
use crate::error::{Error, Result};
use crate::expfam::ExpFamilyKind;
use crate::model::{FactorState, LayoutSpec, ObservationSet};
use crate::optim::TraceRow;
use crate::prior::PriorSpec;

/// Where a data matrix lives and how to read it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataDescriptor {
    /// CSV path, relative to the descriptor's directory when not absolute.
    pub csv: PathBuf,
    #[serde(default)]
    pub header: bool,
    /// Number of columns in each view; the second is 0 for one view.
    pub view_widths: [usize; 2],
    pub families: [ExpFamilyKind; 2],
    /// Token marking a missing entry, in addition to the empty field.
    #[serde(default = "default_missing")]
    pub missing: String,
}

fn default_missing() -> String {
    "NA".into()
}

/// Reads a numeric CSV; missing entries become unobserved.
pub fn load_csv_data(desc: &DataDescriptor, base: &Path) -> Result<ObservationSet> {
    let path = if desc.csv.is_absolute() { desc.csv.clone() } else { base.join(&desc.csv) };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(desc.header)
        .trim(csv::Trim::All)
        .from_path(&path)?;
    let width = desc.view_widths[0] + desc.view_widths[1];
    let mut values = Vec::new();
    let mut mask = Vec::new();
    let mut rows = 0;
    for record in reader.records() {
        let record = record?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        if record.len() != width {
            return Err(Error::Parse {
                path: path.clone(),
                line,
                msg: format!("expected {width} fields, found {}", record.len()),
            });
        }
        for field in record.iter() {
            if field.is_empty() || field == desc.missing {
                values.push(0.0);
                mask.push(false);
            } else {
                let v: f64 = field.parse().map_err(|_| Error::Parse {
                    path: path.clone(),
                    line,
                    msg: format!("`{field}` is not a number"),
                })?;
                values.push(v);
                mask.push(true);
            }
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Parse { path, line: 1, msg: "no data rows".into() });
    }
    let x = DMatrix::from_row_slice(rows, width, &values);
    let observed = DMatrix::from_row_slice(rows, width, &mask);
    ObservationSet::new(x, observed, desc.view_widths, desc.families)
}

/// One tidy result row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub experiment: String,
    pub replicate: usize,
    pub method: String,
    pub components: usize,
    pub metric: String,
    pub value: f64,
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record(["experiment", "replicate", "method", "components", "metric", "value"])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn write_trace_csv(path: &Path, trace: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in trace {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

pub fn save_matrix(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut bytes = Vec::with_capacity(m.len() * 8);
    for x in m.iter() {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_matrix(path: &Path, shape: (usize, usize)) -> Result<DMatrix<f64>> {
    let bytes = fs::read(path)?;
    if bytes.len() != shape.0 * shape.1 * 8 {
        return Err(Error::Shape(format!(
            "{} holds {} bytes, expected a {}x{} matrix",
            path.display(),
            bytes.len(),
            shape.0,
            shape.1
        )));
    }
    let vals: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok(DMatrix::from_vec(shape.0, shape.1, vals))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StateManifest {
    n: usize,
    k: usize,
    d: usize,
    mean_row: bool,
}

fn save_state_files(dir: &Path, prefix: &str, state: &FactorState) -> Result<StateManifest> {
    save_matrix(&dir.join(format!("{prefix}u.bin")), &state.u)?;
    save_matrix(&dir.join(format!("{prefix}v.bin")), &state.v)?;
    if let Some(m) = &state.mean_row {
        save_matrix(&dir.join(format!("{prefix}mean_row.bin")), &DMatrix::from_column_slice(m.len(), 1, m.as_slice()))?;
    }
    Ok(StateManifest {
        n: state.u.nrows(),
        k: state.u.ncols(),
        d: state.v.ncols(),
        mean_row: state.mean_row.is_some(),
    })
}

fn load_state_files(dir: &Path, prefix: &str, m: &StateManifest) -> Result<FactorState> {
    let u = load_matrix(&dir.join(format!("{prefix}u.bin")), (m.n, m.k))?;
    let v = load_matrix(&dir.join(format!("{prefix}v.bin")), (m.k, m.d))?;
    let mean_row = if m.mean_row {
        let col = load_matrix(&dir.join(format!("{prefix}mean_row.bin")), (m.d, 1))?;
        Some(DVector::from_column_slice(col.as_slice()))
    } else {
        None
    };
    Ok(FactorState { u, v, mean_row })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub layout: LayoutSpec,
    pub prior: PriorSpec,
    pub objective: f64,
    pub converged: bool,
    pub iterations: usize,
    pub seed: u64,
    state: StateManifest,
}

/// Writes a fitted state as `manifest.json` plus binary matrices.
pub fn save_model(
    dir: &Path,
    state: &FactorState,
    layout: &LayoutSpec,
    prior: &PriorSpec,
    fit: (f64, bool, usize),
    seed: u64,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let files = save_state_files(dir, "", state)?;
    let manifest = ModelManifest {
        layout: layout.clone(),
        prior: prior.clone(),
        objective: fit.0,
        converged: fit.1,
        iterations: fit.2,
        seed,
        state: files,
    };
    write_json(&dir.join("manifest.json"), &manifest)
}

pub fn load_model(dir: &Path) -> Result<(FactorState, ModelManifest)> {
    let manifest: ModelManifest = read_json(&dir.join("manifest.json"))?;
    let state = load_state_files(dir, "", &manifest.state)?;
    Ok((state, manifest))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SampleManifest {
    prefix: String,
    log_lik: f64,
    prior: Option<PriorSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ChainManifest {
    engine: String,
    seed: u64,
    layout: LayoutSpec,
    n_samples: usize,
    state: Option<StateManifest>,
    stats: AcceptanceStats,
    samples: Vec<SampleManifest>,
}

/// Writes a chain as `manifest.json` (deterministic), `timing.json` (the
/// wall-clock stamps) and `sample_XXXXX_{u,v,theta}.bin` per sample.
pub fn save_chain(dir: &Path, chain: &Chain) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut samples = Vec::with_capacity(chain.len());
    let mut shape = None;
    for (i, s) in chain.samples.iter().enumerate() {
        let prefix = format!("sample_{i:05}_");
        shape = Some(save_state_files(dir, &prefix, &s.state)?);
        save_matrix(&dir.join(format!("{prefix}theta.bin")), &s.theta)?;
        samples.push(SampleManifest {
            prefix,
            log_lik: s.log_lik,
            prior: s.prior.clone(),
        });
    }
    let manifest = ChainManifest {
        engine: chain.engine.clone(),
        seed: chain.seed,
        layout: chain.layout.clone(),
        n_samples: chain.len(),
        state: shape,
        stats: chain.stats.clone(),
        samples,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    write_json(&dir.join("timing.json"), &chain.wall_clock)
}

pub fn load_chain(dir: &Path) -> Result<Chain> {
    let manifest: ChainManifest = read_json(&dir.join("manifest.json"))?;
    let wall_clock: Vec<f64> = read_json(&dir.join("timing.json"))?;
    let mut samples = Vec::with_capacity(manifest.n_samples);
    for s in &manifest.samples {
        let shape = manifest
            .state
            .as_ref()
            .ok_or_else(|| Error::Shape("chain manifest lists samples but no shapes".into()))?;
        let state = load_state_files(dir, &s.prefix, shape)?;
        let theta = load_matrix(&dir.join(format!("{}theta.bin", s.prefix)), (shape.n, shape.d))?;
        samples.push(ChainSample {
            state,
            theta,
            prior: s.prior.clone(),
            log_lik: s.log_lik,
        });
    }
    Ok(Chain {
        engine: manifest.engine,
        seed: manifest.seed,
        layout: manifest.layout,
        samples,
        wall_clock,
        stats: manifest.stats,
    })
}
