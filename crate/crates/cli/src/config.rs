//! Config resolution: defaults, then config file, then command-line flags.

use std::path::PathBuf;

use clap::Args;
use erasure_fl::channel::{erasure_probability, ShortPacketConfig};
use erasure_fl::sim::{DatasetKind, ExperimentConfig, ModelSpecConfig};
use erasure_fl::{Error, Result};

/// Experiment options shared by `run`, `compare`, `sweep`, and the analyze
/// subcommands. Flags override config-file values, which override defaults.
#[derive(Debug, Clone, Args)]
pub struct ConfigFlags {
    /// JSON config file: flat ExperimentConfig fields, or a manifest from a
    /// previous run (its resolved config is reused).
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Device count N.
    #[arg(long)]
    pub devices: Option<usize>,

    /// Dataset kind: linear, quadratic-noniid, uniform, blobs, csv.
    #[arg(long)]
    pub dataset: Option<String>,

    /// Training samples per device (per class for blobs).
    #[arg(long)]
    pub per_device: Option<usize>,

    /// Per-device slopes for the linear dataset (single value broadcasts).
    #[arg(long, value_delimiter = ',')]
    pub slopes: Option<Vec<f64>>,

    /// Per-device intercepts for the linear dataset.
    #[arg(long, value_delimiter = ',')]
    pub intercepts: Option<Vec<f64>>,

    #[arg(long)]
    pub noise_sigma: Option<f64>,

    #[arg(long)]
    pub x_lo: Option<f64>,

    #[arg(long)]
    pub x_hi: Option<f64>,

    /// Blob feature dimension.
    #[arg(long)]
    pub feature_dim: Option<usize>,

    /// Minimum distance between blob class centers.
    #[arg(long)]
    pub separation: Option<f64>,

    /// Held-out samples (total for regression, per class for blobs).
    #[arg(long)]
    pub holdout: Option<usize>,

    /// Comma-separated device CSVs (dataset = csv).
    #[arg(long, value_delimiter = ',')]
    pub csv_train: Option<Vec<PathBuf>>,

    /// Held-out CSV (dataset = csv).
    #[arg(long)]
    pub csv_test: Option<PathBuf>,

    /// Aggregation strategy: error-free, memoryless, stale-reuse.
    #[arg(long)]
    pub strategy: Option<String>,

    /// Erasure probability, shared or comma-separated per device.
    /// Mutually exclusive with the short-packet flags.
    #[arg(long, value_delimiter = ',')]
    pub epsilon: Option<Vec<f64>>,

    /// Payload bits k: with --packet-n and --gamma, sets epsilon from the
    /// short-packet erasure formula.
    #[arg(long)]
    pub packet_k: Option<u64>,

    /// Codeword length n in channel uses.
    #[arg(long)]
    pub packet_n: Option<u64>,

    /// Signal-to-noise ratio (linear scale).
    #[arg(long)]
    pub gamma: Option<f64>,

    /// Learning rate.
    #[arg(long)]
    pub eta: Option<f64>,

    /// Local GD iterations per round.
    #[arg(long)]
    pub tau: Option<usize>,

    #[arg(long)]
    pub rounds: Option<usize>,

    #[arg(long)]
    pub seed: Option<u64>,

    /// Override the round-1 erasure pattern to all-received.
    #[arg(long)]
    pub force_first_round_error_free: bool,

    /// Model: linear-mse or softmax-xent.
    #[arg(long)]
    pub model: Option<String>,

    /// Ridge coefficient.
    #[arg(long)]
    pub lambda: Option<f64>,

    /// Initial global parameter (comma-separated; default zeros).
    #[arg(long, value_delimiter = ',')]
    pub init: Option<Vec<f64>>,
}

fn parse_dataset(s: &str) -> Result<DatasetKind> {
    s.parse()
}

fn parse_model(s: &str) -> Result<ModelSpecConfig> {
    match s {
        "linear-mse" => Ok(ModelSpecConfig::LinearMse),
        "softmax-xent" => Ok(ModelSpecConfig::SoftmaxXent),
        other => Err(Error::InvalidParameter(format!(
            "unknown model {other:?} (expected linear-mse or softmax-xent)"
        ))),
    }
}

/// Load a config file: either a flat `ExperimentConfig` document or a
/// manifest carrying one under `"config"`. Missing fields take defaults.
pub fn load_config_file(path: &PathBuf) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| {
        Error::InvalidParameter(format!("config file {}: {e}", path.display()))
    })?;
    let config_value = match value.get("config") {
        Some(inner) => inner.clone(),
        None => value,
    };
    serde_json::from_value(config_value).map_err(|e| {
        Error::InvalidParameter(format!("config file {}: {e}", path.display()))
    })
}

impl ConfigFlags {
    /// Resolve to a full experiment config: defaults, then the config file,
    /// then explicit flags.
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => load_config_file(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = self.devices {
            cfg.devices = v;
        }
        if let Some(s) = &self.dataset {
            cfg.dataset = parse_dataset(s)?;
        }
        if let Some(v) = self.per_device {
            cfg.per_device = v;
        }
        if let Some(v) = &self.slopes {
            cfg.slopes = v.clone();
        }
        if let Some(v) = &self.intercepts {
            cfg.intercepts = v.clone();
        }
        if let Some(v) = self.noise_sigma {
            cfg.noise_sigma = v;
        }
        if let Some(v) = self.x_lo {
            cfg.x_lo = v;
        }
        if let Some(v) = self.x_hi {
            cfg.x_hi = v;
        }
        if let Some(v) = self.feature_dim {
            cfg.feature_dim = v;
        }
        if let Some(v) = self.separation {
            cfg.separation = v;
        }
        if let Some(v) = self.holdout {
            cfg.holdout = v;
        }
        if let Some(v) = &self.csv_train {
            cfg.csv_train = v.clone();
            cfg.dataset = DatasetKind::Csv;
        }
        if let Some(v) = &self.csv_test {
            cfg.csv_test = Some(v.clone());
        }
        if let Some(s) = &self.strategy {
            cfg.strategy = s.parse()?;
        }
        if let Some(s) = &self.model {
            cfg.model = parse_model(s)?;
        }
        if let Some(v) = self.lambda {
            cfg.lambda = v;
        }
        if let Some(v) = &self.init {
            cfg.init = v.clone();
        }
        if let Some(v) = self.eta {
            cfg.eta = v;
        }
        if let Some(v) = self.tau {
            cfg.tau = v;
        }
        if let Some(v) = self.rounds {
            cfg.rounds = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if self.force_first_round_error_free {
            cfg.force_first_round_error_free = true;
        }

        let packet_flags = [
            self.packet_k.is_some(),
            self.packet_n.is_some(),
            self.gamma.is_some(),
        ];
        if packet_flags.iter().any(|&f| f) {
            if !packet_flags.iter().all(|&f| f) {
                return Err(Error::InvalidParameter(
                    "--packet-k, --packet-n, and --gamma must be given together".into(),
                ));
            }
            if self.epsilon.is_some() {
                return Err(Error::InvalidParameter(
                    "--epsilon conflicts with the short-packet flags; give one or the other"
                        .into(),
                ));
            }
            let packet = ShortPacketConfig::new(
                self.packet_k.unwrap(),
                self.packet_n.unwrap(),
                self.gamma.unwrap(),
            )?;
            cfg.epsilon = vec![erasure_probability(&packet)?];
        } else if let Some(v) = &self.epsilon {
            cfg.epsilon = v.clone();
        }

        cfg.validate()?;
        Ok(cfg)
    }
}
