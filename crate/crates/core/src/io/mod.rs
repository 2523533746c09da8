//! Dataset loaders, binary containers, configuration files and reports.

mod bytes;
mod containers;
mod datasets;

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sea::{BitKnowledge, CampaignConfig, CampaignOutcome, InputRecord};

pub use bytes::write_atomic;
pub use containers::{
    decode_dataset, decode_float_model, decode_knowledge, decode_model, encode_dataset, encode_float_model,
    encode_knowledge, encode_model, load_dataset, load_float_model, load_knowledge, load_model, save_dataset,
    save_float_model, save_knowledge, save_model, DATASET_MAGIC, FORMAT_VERSION, KNOWLEDGE_MAGIC, MODEL_MAGIC,
};
pub use datasets::{
    cifar10_paths, load_cifar10_bin, load_cifar10_dir, load_mnist_dir, load_mnist_idx, mnist_paths, parse_idx,
};

/// Reads a TOML configuration file.
pub fn load_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

pub fn parse_toml<T: DeserializeOwned>(text: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
}

/// Renders serializable rows as CSV with a header row.
pub fn csv_string<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::validation(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    write_atomic(path, csv_string(rows)?.as_bytes())
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<T>, _>>()?)
}

/// Persisted campaign: configuration, recovered bits and per-input progress.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignRecord {
    pub config: CampaignConfig,
    pub knowledge: BitKnowledge,
    pub inputs: Vec<InputRecord>,
    pub stopped_early: bool,
    pub total_probes: u64,
    pub total_ms: f64,
}

impl CampaignRecord {
    pub fn new(config: CampaignConfig, outcome: CampaignOutcome) -> Self {
        Self {
            total_probes: outcome.records.iter().map(|r| r.probes).sum(),
            total_ms: outcome.records.last().map_or(0.0, |r| r.elapsed_ms),
            config,
            knowledge: outcome.knowledge,
            inputs: outcome.records,
            stopped_early: outcome.stopped_early,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(text)?;
        r.knowledge.validate()?;
        Ok(r)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json(j) => bytes::parse(path, j.line() as u64, format!("line {} column {}: {j}", j.line(), j.column())),
            other => other,
        })
    }
}
