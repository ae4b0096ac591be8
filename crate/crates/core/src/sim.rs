//! Round-by-round orchestration of federated training under a chosen
//! aggregation strategy, plus strategy comparison with common random numbers
//! and seeded parameter sweeps.
//!
//! Determinism contract: `(config, seed)` fixes every output bit. The random
//! stream is consumed in a fixed order — dataset generation first (train
//! parts in device order, then any held-out set), then one erasure pattern
//! per round in round order. Nothing else draws from the stream; local
//! gradient descent is deterministic.

use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::{
    aggregate_error_free, aggregate_memoryless, aggregate_stale_reuse, AggregationStrategy,
    UpdateCache,
};
use crate::analysis::{
    curvature_quadratic, delta_metrics, global_loss, optimal_params, ConvergenceBound,
};
use crate::channel::{sample_pattern, ErasureChannelSet, ErasurePattern};
use crate::data::{
    fmt_float, gen_classification_blobs, gen_classification_pool, gen_linear, gen_quadratic,
    load_csv, partition_noniid_intervals, partition_uniform, FederatedDataset, LocalDataset,
    PartitionKind,
};
use crate::model::{accuracy_on, local_update, mse_on, LossSpec, ModelKind, ParamVector};
use crate::rng::{derive_seed, seeded};
use crate::{Error, Result};

/// Which dataset family an experiment trains on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    /// Per-device linear models (slopes/intercepts may differ per device).
    Linear,
    /// Quadratic-model samples on disjoint contiguous input intervals.
    QuadraticNoniid,
    /// A common quadratic-model pool shuffled uniformly across devices.
    Uniform,
    /// Gaussian class blobs, one class per device.
    Blobs,
    /// Pre-generated CSV files, one per device.
    Csv,
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(DatasetKind::Linear),
            "quadratic-noniid" => Ok(DatasetKind::QuadraticNoniid),
            "uniform" => Ok(DatasetKind::Uniform),
            "blobs" => Ok(DatasetKind::Blobs),
            "csv" => Ok(DatasetKind::Csv),
            other => Err(Error::InvalidParameter(format!(
                "unknown dataset kind {other:?} (expected linear, quadratic-noniid, uniform, blobs, or csv)"
            ))),
        }
    }
}

/// Full description of one experiment. Flat so it can round-trip through a
/// plain key-value JSON config file; unused fields for a given dataset kind
/// are simply ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Device count `N`.
    pub devices: usize,
    pub dataset: DatasetKind,
    /// Training samples per device (`|D_i|`), or per class for blobs.
    pub per_device: usize,
    /// Per-device slopes for the linear dataset; one value broadcasts.
    pub slopes: Vec<f64>,
    /// Per-device intercepts for the linear dataset; one value broadcasts.
    pub intercepts: Vec<f64>,
    pub noise_sigma: f64,
    pub x_lo: f64,
    pub x_hi: f64,
    /// Blob feature dimension (before the bias column).
    pub feature_dim: usize,
    /// Minimum distance between blob class centers.
    pub separation: f64,
    /// Held-out samples: total for regression, per class for blobs.
    pub holdout: usize,
    /// One CSV per device (dataset = csv).
    pub csv_train: Vec<PathBuf>,
    /// Optional held-out CSV (dataset = csv).
    pub csv_test: Option<PathBuf>,
    pub strategy: AggregationStrategy,
    /// Shared (length 1) or per-device (length N) erasure probabilities.
    pub epsilon: Vec<f64>,
    pub eta: f64,
    /// Local GD iterations per round.
    pub tau: usize,
    pub rounds: usize,
    pub seed: u64,
    /// Override the round-1 pattern to all-received.
    pub force_first_round_error_free: bool,
    pub model: ModelSpecConfig,
    /// Ridge coefficient.
    pub lambda: f64,
    /// Initial global parameter; empty means zeros.
    pub init: Vec<f64>,
}

/// Model family tag as it appears in config files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelSpecConfig {
    LinearMse,
    SoftmaxXent,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            devices: 3,
            dataset: DatasetKind::Linear,
            per_device: 1000,
            slopes: vec![2.0],
            intercepts: vec![0.0],
            noise_sigma: 1.0,
            x_lo: -2.0,
            x_hi: 2.0,
            feature_dim: 2,
            separation: 3.0,
            holdout: 0,
            csv_train: Vec::new(),
            csv_test: None,
            strategy: AggregationStrategy::StaleReuse,
            epsilon: vec![0.3],
            eta: 0.005,
            tau: 1,
            rounds: 300,
            seed: 1,
            force_first_round_error_free: false,
            model: ModelSpecConfig::LinearMse,
            lambda: 0.0,
            init: Vec::new(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.devices < 1 {
            return Err(Error::InvalidParameter("devices must be >= 1".into()));
        }
        if self.rounds < 1 {
            return Err(Error::InvalidParameter("rounds must be >= 1".into()));
        }
        if !(self.eta > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "eta must be > 0 (got {})",
                self.eta
            )));
        }
        if self.epsilon.is_empty()
            || (self.epsilon.len() != 1 && self.epsilon.len() != self.devices)
        {
            return Err(Error::InvalidParameter(format!(
                "epsilon must have 1 or N={} entries (got {})",
                self.devices,
                self.epsilon.len()
            )));
        }
        for &e in &self.epsilon {
            if !(0.0..=1.0).contains(&e) {
                return Err(Error::InvalidParameter(format!(
                    "epsilon {e} outside [0, 1]"
                )));
            }
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::InvalidParameter("lambda must be >= 0".into()));
        }
        Ok(())
    }

    pub fn channels(&self) -> Result<ErasureChannelSet> {
        if self.epsilon.len() == 1 {
            ErasureChannelSet::shared(self.epsilon[0], self.devices)
        } else {
            ErasureChannelSet::new(self.epsilon.clone())
        }
    }

    /// The loss specification; blob class count defaults to the device count
    /// (one class per device).
    pub fn loss_spec(&self) -> Result<LossSpec> {
        let kind = match self.model {
            ModelSpecConfig::LinearMse => ModelKind::LinearMse,
            ModelSpecConfig::SoftmaxXent => ModelKind::SoftmaxXent {
                classes: self.devices,
            },
        };
        LossSpec::new(kind, self.lambda)
    }

    fn broadcast(&self, values: &[f64], what: &str) -> Result<Vec<f64>> {
        match values.len() {
            1 => Ok(vec![values[0]; self.devices]),
            n if n == self.devices => Ok(values.to_vec()),
            n => Err(Error::InvalidParameter(format!(
                "{what} must have 1 or N={} entries (got {n})",
                self.devices
            ))),
        }
    }
}

/// Materialize the experiment's datasets. Consumes the head of the random
/// stream: train parts in device order first, then the held-out set.
pub fn build_dataset(
    cfg: &ExperimentConfig,
    rng: &mut crate::rng::SimRng,
) -> Result<(FederatedDataset, Option<LocalDataset>)> {
    cfg.validate()?;
    let range = (cfg.x_lo, cfg.x_hi);
    match cfg.dataset {
        DatasetKind::Linear => {
            let slopes = cfg.broadcast(&cfg.slopes, "slopes")?;
            let intercepts = cfg.broadcast(&cfg.intercepts, "intercepts")?;
            let mut parts = Vec::with_capacity(cfg.devices);
            for i in 0..cfg.devices {
                parts.push(gen_linear(
                    cfg.per_device,
                    slopes[i],
                    intercepts[i],
                    cfg.noise_sigma,
                    range,
                    rng,
                )?);
            }
            let homogeneous = slopes.windows(2).all(|w| w[0] == w[1])
                && intercepts.windows(2).all(|w| w[0] == w[1]);
            let kind = if homogeneous {
                PartitionKind::Uniform
            } else {
                PartitionKind::NonIidInterval
            };
            let fed = FederatedDataset::from_parts(parts, kind)?;
            // Held-out samples drawn evenly across the device generators.
            let holdout = if cfg.holdout > 0 {
                let mut rows = Vec::new();
                let mut ys = Vec::new();
                for i in 0..cfg.devices {
                    let share = cfg.holdout / cfg.devices
                        + usize::from(i < cfg.holdout % cfg.devices);
                    if share == 0 {
                        continue;
                    }
                    let part = gen_linear(
                        share,
                        slopes[i],
                        intercepts[i],
                        cfg.noise_sigma,
                        range,
                        rng,
                    )?;
                    for j in 0..part.n_samples() {
                        rows.push(vec![part.row(j)[0]]);
                        ys.push(part.targets()[j]);
                    }
                }
                Some(LocalDataset::new_regression(rows, ys)?)
            } else {
                None
            };
            Ok((fed, holdout))
        }
        DatasetKind::QuadraticNoniid => {
            let fed = partition_noniid_intervals(
                range,
                cfg.devices,
                cfg.per_device,
                cfg.noise_sigma,
                rng,
            )?;
            let holdout = (cfg.holdout > 0)
                .then(|| gen_quadratic(cfg.holdout, cfg.noise_sigma, range, rng))
                .transpose()?;
            Ok((fed, holdout))
        }
        DatasetKind::Uniform => {
            let pool = gen_quadratic(
                cfg.devices * cfg.per_device,
                cfg.noise_sigma,
                range,
                rng,
            )?;
            let holdout = (cfg.holdout > 0)
                .then(|| gen_quadratic(cfg.holdout, cfg.noise_sigma, range, rng))
                .transpose()?;
            let fed = partition_uniform(&pool, cfg.devices, rng)?;
            Ok((fed, holdout))
        }
        DatasetKind::Blobs => {
            let fed = gen_classification_blobs(
                cfg.devices,
                cfg.per_device,
                cfg.feature_dim,
                cfg.separation,
                cfg.noise_sigma,
                rng,
            )?;
            let holdout = (cfg.holdout > 0)
                .then(|| {
                    gen_classification_pool(
                        cfg.devices,
                        cfg.holdout,
                        cfg.feature_dim,
                        cfg.separation,
                        cfg.noise_sigma,
                        rng,
                    )
                })
                .transpose()?;
            Ok((fed, holdout))
        }
        DatasetKind::Csv => {
            if cfg.csv_train.len() != cfg.devices {
                return Err(Error::InvalidParameter(format!(
                    "csv dataset needs one file per device ({} files for N={})",
                    cfg.csv_train.len(),
                    cfg.devices
                )));
            }
            let spec = cfg.loss_spec()?;
            let cast = |ds: LocalDataset| -> Result<LocalDataset> {
                match spec.kind {
                    ModelKind::LinearMse => Ok(ds),
                    ModelKind::SoftmaxXent { classes } => ds.into_classification(classes),
                }
            };
            let parts = cfg
                .csv_train
                .iter()
                .map(|p| load_csv(p).and_then(cast))
                .collect::<Result<Vec<_>>>()?;
            let fed = FederatedDataset::from_parts(parts, PartitionKind::NonIidInterval)?;
            let holdout = cfg
                .csv_test
                .as_ref()
                .map(|p| load_csv(p).and_then(cast))
                .transpose()?;
            Ok((fed, holdout))
        }
    }
}

/// Everything recorded about one communication round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    /// 1-based round index.
    pub round: usize,
    /// The channel realization (also drawn for error-free runs, which ignore
    /// it, so compared strategies see identical streams).
    pub pattern: ErasurePattern,
    /// Updates the aggregation actually used this round.
    pub received_count: usize,
    /// Training metric: mean squared error (`2 F` at `lambda = 0`) for the
    /// linear model, mean cross-entropy for softmax.
    pub mse_train: f64,
    /// Held-out metric when configured: MSE for regression, accuracy for
    /// classification.
    pub mse_test: Option<f64>,
    /// `||w^(t) - w*||^2`.
    pub delta: f64,
    /// Running average `(1/t) sum_{i=0}^{t-1} delta_i` — the quantity the
    /// convergence bound controls at round `t`.
    pub delta_bar: f64,
}

/// A finished run: the parameter trajectory `w^(0)..w^(T)`, per-round
/// records, and the optimum it is measured against.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub strategy: AggregationStrategy,
    /// Mean device erasure probability (the shared value when uniform).
    pub epsilon: f64,
    pub trajectory: Vec<ParamVector>,
    pub rounds: Vec<RoundRecord>,
    pub w_star: ParamVector,
    pub f_star: f64,
}

impl ExperimentResult {
    pub fn final_mse(&self) -> f64 {
        self.rounds.last().expect("at least one round").mse_train
    }

    pub fn mse_series(&self) -> Vec<f64> {
        self.rounds.iter().map(|r| r.mse_train).collect()
    }
}

/// Training metric at `lambda = 0`: plain MSE (twice the half-MSE loss) for
/// the linear model, mean cross-entropy for softmax.
pub fn train_metric(fed: &FederatedDataset, spec: &LossSpec, w: &ParamVector) -> Result<f64> {
    let bare = LossSpec::new(spec.kind, 0.0)?;
    let f = global_loss(fed, &bare, w)?;
    Ok(match spec.kind {
        ModelKind::LinearMse => 2.0 * f,
        ModelKind::SoftmaxXent { .. } => f,
    })
}

fn test_metric(holdout: &LocalDataset, spec: &LossSpec, w: &ParamVector) -> Result<f64> {
    match spec.kind {
        ModelKind::LinearMse => mse_on(holdout, w),
        ModelKind::SoftmaxXent { .. } => accuracy_on(holdout, w),
    }
}

enum PatternSource<'a> {
    Sample,
    Given(&'a [ErasurePattern]),
}

fn run_inner(cfg: &ExperimentConfig, patterns: PatternSource<'_>) -> Result<ExperimentResult> {
    cfg.validate()?;
    let mut rng = seeded(cfg.seed);
    let (fed, holdout) = build_dataset(cfg, &mut rng)?;
    let spec = cfg.loss_spec()?;
    let channels = cfg.channels()?;
    let sizes = fed.sizes();

    let w0 = if cfg.init.is_empty() {
        ParamVector::zeros(spec.kind, fed.width())
    } else {
        let expected = spec.kind.param_len(fed.width());
        if cfg.init.len() != expected {
            return Err(Error::DimensionMismatch {
                context: "init vector vs model",
                expected,
                got: cfg.init.len(),
            });
        }
        ParamVector::new(spec.kind, cfg.init.clone())?
    };

    let (w_star, f_star) = optimal_params(&fed, &spec)?;

    let mut trajectory = Vec::with_capacity(cfg.rounds + 1);
    trajectory.push(w0.clone());
    let mut rounds = Vec::with_capacity(cfg.rounds);
    let mut cache = UpdateCache::initial(&w0, fed.n_devices());
    let mut prev_global = w0.clone();
    // delta_sum holds sum(delta_0..delta_{t-1}) entering round t.
    let mut delta_sum = w0.distance_sq(&w_star);

    for round in 1..=cfg.rounds {
        let updates = fed
            .parts()
            .iter()
            .enumerate()
            .map(|(device, part)| {
                local_update(&prev_global, part, &spec, cfg.eta, cfg.tau).map_err(|e| match e {
                    Error::Divergence { iteration } => Error::ExperimentDiverged {
                        round,
                        device,
                        iteration,
                    },
                    other => other,
                })
            })
            .collect::<Result<Vec<ParamVector>>>()?;

        let mut pattern = match patterns {
            PatternSource::Sample => sample_pattern(&channels, &mut rng),
            PatternSource::Given(ps) => {
                let p = ps.get(round - 1).ok_or_else(|| {
                    Error::InvalidParameter(format!(
                        "replay needs {} patterns, got {}",
                        cfg.rounds,
                        ps.len()
                    ))
                })?;
                p.clone()
            }
        };
        // The stream is consumed either way; the override only changes what
        // the central node sees.
        if round == 1
            && cfg.force_first_round_error_free
            && matches!(patterns, PatternSource::Sample)
        {
            pattern = ErasurePattern::all_received(fed.n_devices());
        }

        let (w_next, received_count) = match cfg.strategy {
            AggregationStrategy::ErrorFree => {
                (aggregate_error_free(&updates, &sizes)?, fed.n_devices())
            }
            AggregationStrategy::Memoryless => (
                aggregate_memoryless(&updates, &pattern, &sizes, &prev_global)?,
                pattern.received_count(),
            ),
            AggregationStrategy::StaleReuse => {
                let (w, next_cache) =
                    aggregate_stale_reuse(&updates, &pattern, &sizes, cache, round)?;
                cache = next_cache;
                (w, pattern.received_count())
            }
        };

        let delta = w_next.distance_sq(&w_star);
        let delta_bar = delta_sum / round as f64;
        delta_sum += delta;

        rounds.push(RoundRecord {
            round,
            pattern,
            received_count,
            mse_train: train_metric(&fed, &spec, &w_next)?,
            mse_test: holdout
                .as_ref()
                .map(|h| test_metric(h, &spec, &w_next))
                .transpose()?,
            delta,
            delta_bar,
        });
        trajectory.push(w_next.clone());
        prev_global = w_next;
    }

    let epsilon_mean =
        channels.epsilons().iter().sum::<f64>() / channels.n_devices() as f64;
    Ok(ExperimentResult {
        strategy: cfg.strategy,
        epsilon: epsilon_mean,
        trajectory,
        rounds,
        w_star,
        f_star,
    })
}

/// Run one experiment as configured.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    run_inner(cfg, PatternSource::Sample)
}

/// Re-run an experiment against recorded erasure patterns (used verbatim; no
/// first-round override). With the patterns from a previous run's records the
/// reconstructed trajectory must match bit-for-bit — the replay audit.
pub fn replay_experiment(
    cfg: &ExperimentConfig,
    patterns: &[ErasurePattern],
) -> Result<ExperimentResult> {
    run_inner(cfg, PatternSource::Given(patterns))
}

/// Run several strategies against the identical dataset and erasure-pattern
/// stream (common random numbers), so differences are attributable to the
/// strategy alone. Results come back in the order requested.
pub fn compare_strategies(
    cfg: &ExperimentConfig,
    strategies: &[AggregationStrategy],
) -> Result<Vec<ExperimentResult>> {
    if strategies.is_empty() {
        return Err(Error::InvalidParameter(
            "compare needs at least one strategy".into(),
        ));
    }
    strategies
        .iter()
        .map(|&strategy| {
            let mut c = cfg.clone();
            c.strategy = strategy;
            run_experiment(&c)
        })
        .collect()
}

/// First round whose training MSE reaches `(1 + theta)` times the reference
/// final MSE (the error-free run's last round, by convention).
pub fn rounds_to_threshold(mse_series: &[f64], reference_final: f64, theta: f64) -> Option<usize> {
    let threshold = (1.0 + theta) * reference_final;
    mse_series.iter().position(|&m| m <= threshold).map(|i| i + 1)
}

/// Default relative margin for [`rounds_to_threshold`].
pub const DEFAULT_THRESHOLD_THETA: f64 = 0.01;

/// Which config field a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepParameter {
    Epsilon,
    Eta,
    Tau,
    Devices,
}

impl std::str::FromStr for SweepParameter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "epsilon" => Ok(SweepParameter::Epsilon),
            "eta" => Ok(SweepParameter::Eta),
            "tau" => Ok(SweepParameter::Tau),
            "devices" | "N" | "n" => Ok(SweepParameter::Devices),
            other => Err(Error::InvalidParameter(format!(
                "unknown sweep parameter {other:?} (expected epsilon, eta, tau, or devices)"
            ))),
        }
    }
}

fn apply_sweep_value(
    cfg: &ExperimentConfig,
    parameter: SweepParameter,
    value: f64,
) -> Result<ExperimentConfig> {
    let mut c = cfg.clone();
    match parameter {
        SweepParameter::Epsilon => c.epsilon = vec![value],
        SweepParameter::Eta => c.eta = value,
        SweepParameter::Tau => {
            if value < 0.0 || value.fract() != 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "tau sweep values must be non-negative integers (got {value})"
                )));
            }
            c.tau = value as usize;
        }
        SweepParameter::Devices => {
            if value < 1.0 || value.fract() != 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "device sweep values must be positive integers (got {value})"
                )));
            }
            if c.dataset == DatasetKind::Csv {
                return Err(Error::InvalidParameter(
                    "cannot sweep device count with csv datasets".into(),
                ));
            }
            c.devices = value as usize;
            // Broadcastable vectors must be re-broadcast at the new N.
            if c.slopes.len() > 1 {
                c.slopes = vec![c.slopes[0]];
            }
            if c.intercepts.len() > 1 {
                c.intercepts = vec![c.intercepts[0]];
            }
            if c.epsilon.len() > 1 {
                c.epsilon = vec![c.epsilon[0]];
            }
        }
    }
    Ok(c)
}

/// One sweep trial's outcome.
#[derive(Debug, Clone, Serialize)]
pub struct SweepCell {
    pub value: f64,
    pub trial: usize,
    pub seed: u64,
    pub final_mse: f64,
    pub reference_final_mse: f64,
    pub rounds_to_threshold: Option<usize>,
}

/// Aggregated statistics for one sweep value.
#[derive(Debug, Clone, Serialize)]
pub struct SweepPoint {
    pub value: f64,
    pub trials: usize,
    pub mean_final_mse: f64,
    pub std_final_mse: f64,
    /// Over trials that reached the threshold.
    pub mean_rounds_to_threshold: Option<f64>,
    pub std_rounds_to_threshold: Option<f64>,
    pub reached: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepSummary {
    pub parameter: SweepParameter,
    pub strategy: AggregationStrategy,
    pub trials_per_value: usize,
    pub points: Vec<SweepPoint>,
    pub cells: Vec<SweepCell>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Seeded sweep over one parameter: `trials` independent runs per value, each
/// paired with an error-free reference run on the same seed for the
/// rounds-to-threshold metric. Trial seeds derive from the base seed as
/// `derive_seed(base, value_index * trials + trial)`. Trials run in parallel
/// (capped by `threads`; 0 means the rayon default) and are collected in
/// canonical `(value, trial)` order.
pub fn sweep(
    cfg: &ExperimentConfig,
    parameter: SweepParameter,
    values: &[f64],
    trials: usize,
    threads: usize,
) -> Result<SweepSummary> {
    if values.is_empty() || trials == 0 {
        return Err(Error::InvalidParameter(
            "sweep needs at least one value and one trial".into(),
        ));
    }
    let jobs: Vec<(usize, usize)> = (0..values.len())
        .flat_map(|v| (0..trials).map(move |t| (v, t)))
        .collect();

    let run_one = |&(value_idx, trial): &(usize, usize)| -> Result<SweepCell> {
        let value = values[value_idx];
        let mut c = apply_sweep_value(cfg, parameter, value)?;
        c.seed = derive_seed(cfg.seed, (value_idx * trials + trial) as u64);
        let result = run_experiment(&c)?;
        let mut reference_cfg = c.clone();
        reference_cfg.strategy = AggregationStrategy::ErrorFree;
        let reference = run_experiment(&reference_cfg)?;
        let reference_final = reference.final_mse();
        Ok(SweepCell {
            value,
            trial,
            seed: c.seed,
            final_mse: result.final_mse(),
            reference_final_mse: reference_final,
            rounds_to_threshold: rounds_to_threshold(
                &result.mse_series(),
                reference_final,
                DEFAULT_THRESHOLD_THETA,
            ),
        })
    };

    let cells: Vec<SweepCell> = if threads == 0 {
        jobs.par_iter().map(run_one).collect::<Result<Vec<_>>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Numeric(format!("thread pool: {e}")))?;
        pool.install(|| jobs.par_iter().map(run_one).collect::<Result<Vec<_>>>())?
    };

    let points = values
        .iter()
        .enumerate()
        .map(|(value_idx, &value)| {
            let slice = &cells[value_idx * trials..(value_idx + 1) * trials];
            let finals: Vec<f64> = slice.iter().map(|c| c.final_mse).collect();
            let (mean_final_mse, std_final_mse) = mean_std(&finals);
            let reached_rounds: Vec<f64> = slice
                .iter()
                .filter_map(|c| c.rounds_to_threshold.map(|r| r as f64))
                .collect();
            let (mean_rtt, std_rtt) = if reached_rounds.is_empty() {
                (None, None)
            } else {
                let (m, s) = mean_std(&reached_rounds);
                (Some(m), Some(s))
            };
            SweepPoint {
                value,
                trials,
                mean_final_mse,
                std_final_mse,
                mean_rounds_to_threshold: mean_rtt,
                std_rounds_to_threshold: std_rtt,
                reached: reached_rounds.len(),
            }
        })
        .collect();

    Ok(SweepSummary {
        parameter,
        strategy: cfg.strategy,
        trials_per_value: trials,
        points,
        cells,
    })
}

/// One row of the bound-overlay curve.
#[derive(Debug, Clone, Serialize)]
pub struct BoundRow {
    pub t: usize,
    pub delta_bar: f64,
    pub bound: f64,
}

/// The convergence bound laid over a realized stale-reuse trajectory.
#[derive(Debug, Clone, Serialize)]
pub struct BoundOverlay {
    pub l: f64,
    pub mu: f64,
    pub epsilon: f64,
    pub beta_sq: f64,
    pub f0_gap: f64,
    /// The step size actually used (`1/L`).
    pub eta: f64,
    pub rows: Vec<BoundRow>,
    pub holds_everywhere: bool,
}

/// Run the bound's regime for the configured dataset and erasure probability:
/// stale-reuse aggregation, `eta = 1/L`, one local step, first round forced
/// error-free. The config's `strategy`, `eta`, `tau`, and
/// `force_first_round_error_free` are overridden accordingly; `epsilon` must
/// be common across devices and satisfy the applicability conditions.
pub fn bound_overlay(cfg: &ExperimentConfig) -> Result<BoundOverlay> {
    cfg.validate()?;
    let channels = cfg.channels()?;
    let epsilon = channels.common_epsilon().ok_or_else(|| Error::NotApplicable {
        condition: "the bound requires a common erasure probability across devices".into(),
    })?;

    let mut rng = seeded(cfg.seed);
    let (fed, _) = build_dataset(cfg, &mut rng)?;
    let spec = cfg.loss_spec()?;
    let constants = curvature_quadratic(&fed, &spec)?;

    let w0 = if cfg.init.is_empty() {
        ParamVector::zeros(spec.kind, fed.width())
    } else {
        ParamVector::new(spec.kind, cfg.init.clone())?
    };
    let (_, f_star) = optimal_params(&fed, &spec)?;
    let f0_gap = global_loss(&fed, &spec, &w0)? - f_star;
    let bound = ConvergenceBound::new(&constants, epsilon, f0_gap)?;

    let mut run_cfg = cfg.clone();
    run_cfg.strategy = AggregationStrategy::StaleReuse;
    run_cfg.eta = 1.0 / constants.l;
    run_cfg.tau = 1;
    run_cfg.force_first_round_error_free = true;
    let result = run_experiment(&run_cfg)?;

    let (_, delta_bar) = delta_metrics(&result.trajectory, &result.w_star);
    let mut rows = Vec::with_capacity(cfg.rounds);
    let mut holds_everywhere = true;
    for t in 1..=cfg.rounds {
        // delta_bar[t - 1] averages delta_0..delta_{t-1}, the quantity the
        // bound controls at round t.
        let db = delta_bar[t - 1];
        let b = bound.at(t)?;
        if db > b {
            holds_everywhere = false;
        }
        rows.push(BoundRow {
            t,
            delta_bar: db,
            bound: b,
        });
    }

    Ok(BoundOverlay {
        l: constants.l,
        mu: constants.mu,
        epsilon,
        beta_sq: bound.beta_sq,
        f0_gap,
        eta: run_cfg.eta,
        rows,
        holds_everywhere,
    })
}

/// Metrics CSV header (fixed column order).
pub const METRICS_CSV_HEADER: &str =
    "round,strategy,epsilon,mse_train,mse_test,delta,delta_bar,received_count,pattern_bits";

/// Render results as the metrics CSV (one block of rows per result, in
/// order). Floats carry 17 significant digits; reruns of an identical config
/// produce byte-identical output.
pub fn metrics_csv(results: &[ExperimentResult]) -> String {
    let mut out = String::from(METRICS_CSV_HEADER);
    out.push('\n');
    for result in results {
        for r in &result.rounds {
            let test = r.mse_test.map(fmt_float).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.round,
                result.strategy,
                fmt_float(result.epsilon),
                fmt_float(r.mse_train),
                test,
                fmt_float(r.delta),
                fmt_float(r.delta_bar),
                r.received_count,
                r.pattern.bits(),
            ));
        }
    }
    out
}
