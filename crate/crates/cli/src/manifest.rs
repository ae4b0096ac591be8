//! Run manifests: the resolved configuration, input digests, and output
//! paths — everything needed to reproduce a run byte-for-byte.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use erasure_fl::sim::{DatasetKind, ExperimentConfig};
use erasure_fl::Result;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: ExperimentConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub strategies: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepManifest>,
    /// SHA-256 of each input file, keyed by path.
    pub input_digests: BTreeMap<String, String>,
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepManifest {
    pub parameter: String,
    pub values: Vec<f64>,
    pub trials: usize,
    pub threads: usize,
}

fn sha256_hex(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

impl RunManifest {
    pub fn new(command: &str, config: ExperimentConfig) -> Result<Self> {
        let mut input_digests = BTreeMap::new();
        if config.dataset == DatasetKind::Csv {
            for path in &config.csv_train {
                input_digests.insert(path.display().to_string(), sha256_hex(path)?);
            }
            if let Some(path) = &config.csv_test {
                input_digests.insert(path.display().to_string(), sha256_hex(path)?);
            }
        }
        Ok(RunManifest {
            tool: "erasure-fl".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config,
            strategies: None,
            sweep: None,
            input_digests,
            outputs: Vec::new(),
        })
    }

    pub fn with_outputs(mut self, outputs: &[PathBuf]) -> Self {
        self.outputs = outputs.iter().map(|p| p.display().to_string()).collect();
        self
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .expect("manifest serialization cannot fail");
        std::fs::write(path, json + "\n")?;
        Ok(())
    }
}
