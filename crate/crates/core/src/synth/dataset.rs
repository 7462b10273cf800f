//! Experiment dataset assembly and the line-delimited record file format.

use super::{
    generate_population, generate_split, DriftSchedule, PopularityTable, Result, SynthConfig,
    SynthError, TrainingRecord,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use thiserror::Error;

/// Schema tag carried on line 1 of every record file.
pub const SCHEMA_VERSION: &str = "app-select-records-v1";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unsupported schema {got:?}, expected {SCHEMA_VERSION:?}")]
    Schema { got: String },
}

/// Sizes and drift strength for the four experiment splits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub synth: SynthConfig,
    pub drift_strength: f64,
    pub train_stale_size: usize,
    pub train_fresh_size: usize,
    pub valid_fresh_size: usize,
    pub valid_fixed_size: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            drift_strength: 0.0,
            train_stale_size: 20_000,
            train_fresh_size: 20_000,
            valid_fresh_size: 4_000,
            valid_fixed_size: 4_000,
        }
    }
}

/// The four experiment splits. Stale spans the early half of the timeline,
/// fresh the late half; the fixed validation set mirrors the stale regime.
#[derive(Clone, Debug)]
pub struct ExperimentDatasets {
    pub train_stale: Vec<TrainingRecord>,
    pub train_fresh: Vec<TrainingRecord>,
    pub valid_fresh: Vec<TrainingRecord>,
    pub valid_fixed: Vec<TrainingRecord>,
}

impl ExperimentDatasets {
    /// Generate all splits from distinct seed streams.
    pub fn generate(config: &DatasetConfig) -> Result<Self> {
        config.synth.validate()?;
        if !(0.0..=1.0).contains(&config.drift_strength) {
            return Err(SynthError::InvalidConfig(format!(
                "drift_strength must lie in [0,1], got {}",
                config.drift_strength
            )));
        }
        let population = generate_population(&config.synth)?;
        let popularity = PopularityTable::from_population(&population);
        let schedule = DriftSchedule::generate(&config.synth, config.drift_strength, config.synth.seed)?;
        let split = |name: &str, size: usize, range: (f64, f64)| {
            generate_split(
                &population,
                &schedule,
                &popularity,
                &config.synth,
                name,
                size,
                range,
            )
        };
        Ok(Self {
            train_stale: split("train-stale", config.train_stale_size, (0.0, 0.5))?,
            train_fresh: split("train-fresh", config.train_fresh_size, (0.5, 1.0))?,
            valid_fresh: split("valid-fresh", config.valid_fresh_size, (0.8, 1.0))?,
            valid_fixed: split("valid-fixed", config.valid_fixed_size, (0.0, 0.5))?,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema: String,
}

/// Write records as line-delimited JSON with a schema header line.
pub fn write_records(path: &Path, records: &[TrainingRecord]) -> std::result::Result<(), DatasetError> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(
        &mut w,
        &Header {
            schema: SCHEMA_VERSION.to_string(),
        },
    )
    .map_err(|e| DatasetError::Parse {
        line: 1,
        message: e.to_string(),
    })?;
    w.write_all(b"\n")?;
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| DatasetError::Parse {
            line: 0,
            message: e.to_string(),
        })?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Read a record file, validating the schema header; parse failures carry
/// the 1-based line number.
pub fn read_records(path: &Path) -> std::result::Result<Vec<TrainingRecord>, DatasetError> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    let mut lines = reader.lines();
    let header_line = lines.next().ok_or(DatasetError::Parse {
        line: 1,
        message: "empty file".into(),
    })??;
    let header: Header = serde_json::from_str(&header_line).map_err(|e| DatasetError::Parse {
        line: 1,
        message: e.to_string(),
    })?;
    if header.schema != SCHEMA_VERSION {
        return Err(DatasetError::Schema { got: header.schema });
    }
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: TrainingRecord =
            serde_json::from_str(&line).map_err(|e| DatasetError::Parse {
                line: i + 2,
                message: e.to_string(),
            })?;
        record.example.validate().map_err(|e| DatasetError::Parse {
            line: i + 2,
            message: e.to_string(),
        })?;
        records.push(record);
    }
    Ok(records)
}

/// SHA-256 hex digest of the canonical JSON serialization of the records,
/// used to verify that two reports were evaluated on the same data.
pub fn dataset_digest(records: &[TrainingRecord]) -> String {
    let mut h = Sha256::new();
    for r in records {
        h.update(serde_json::to_vec(r).expect("records serialize"));
        h.update([b'\n']);
    }
    crate::nn::hex_digest(&h.finalize())
}
