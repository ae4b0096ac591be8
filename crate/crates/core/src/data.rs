//! Synthetic dataset generators, federated partitioners, and the CSV
//! interchange format.
//!
//! All generators consume a caller-supplied [`SimRng`] with a fixed draw
//! order (documented per generator), so a seed pins every sample. Feature
//! matrices always carry a trailing constant-1 bias column, appended at
//! generation or load time; the CSV files on disk never store it.

use std::fmt::Write as _;
use std::path::Path;

use crate::rng::{standard_normal, uniform01, SimRng};
use crate::{Error, Result};

/// What the targets mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Regression,
    Classification { classes: usize },
}

/// One device's dataset: a row-major feature matrix (bias column last) and a
/// target per row. Classification targets are class indices stored exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalDataset {
    width: usize,
    features: Vec<f64>,
    targets: Vec<f64>,
    task: TaskKind,
}

impl LocalDataset {
    /// Build a regression dataset from raw feature rows (without bias).
    pub fn new_regression(raw_rows: Vec<Vec<f64>>, targets: Vec<f64>) -> Result<Self> {
        Self::build(raw_rows, targets, TaskKind::Regression)
    }

    /// Build a classification dataset; `labels[i]` must lie in `0..classes`.
    pub fn new_classification(
        raw_rows: Vec<Vec<f64>>,
        labels: Vec<usize>,
        classes: usize,
    ) -> Result<Self> {
        if classes < 2 {
            return Err(Error::InvalidParameter(format!(
                "classification requires at least 2 classes (got {classes})"
            )));
        }
        for (i, &label) in labels.iter().enumerate() {
            if label >= classes {
                return Err(Error::InvalidParameter(format!(
                    "label {label} at row {i} is outside 0..{classes}"
                )));
            }
        }
        let targets = labels.into_iter().map(|l| l as f64).collect();
        Self::build(raw_rows, targets, TaskKind::Classification { classes })
    }

    fn build(raw_rows: Vec<Vec<f64>>, targets: Vec<f64>, task: TaskKind) -> Result<Self> {
        if raw_rows.is_empty() {
            return Err(Error::InvalidParameter(
                "dataset must contain at least one sample".into(),
            ));
        }
        if raw_rows.len() != targets.len() {
            return Err(Error::DimensionMismatch {
                context: "dataset rows vs targets",
                expected: raw_rows.len(),
                got: targets.len(),
            });
        }
        let raw_width = raw_rows[0].len();
        if raw_width == 0 {
            return Err(Error::InvalidParameter(
                "feature rows must have at least one column".into(),
            ));
        }
        let width = raw_width + 1;
        let mut features = Vec::with_capacity(raw_rows.len() * width);
        for (i, row) in raw_rows.iter().enumerate() {
            if row.len() != raw_width {
                return Err(Error::DimensionMismatch {
                    context: "feature row width",
                    expected: raw_width,
                    got: row.len(),
                });
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "non-finite feature value at row {i}"
                )));
            }
            features.extend_from_slice(row);
            features.push(1.0);
        }
        if targets.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite target value".into()));
        }
        Ok(LocalDataset {
            width,
            features,
            targets,
            task,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.targets.len()
    }

    /// Feature width including the bias column.
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn task(&self) -> TaskKind {
        self.task
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.width..(i + 1) * self.width]
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    #[inline]
    pub fn class_target(&self, i: usize) -> usize {
        debug_assert!(matches!(self.task, TaskKind::Classification { .. }));
        self.targets[i] as usize
    }

    /// Reinterpret regression targets as class labels. Targets must be exact
    /// integers in `0..classes`.
    pub fn into_classification(self, classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(Error::InvalidParameter(format!(
                "classification requires at least 2 classes (got {classes})"
            )));
        }
        for (i, &t) in self.targets.iter().enumerate() {
            if t.fract() != 0.0 || t < 0.0 || t >= classes as f64 {
                return Err(Error::InvalidParameter(format!(
                    "target {t} at row {i} is not a class index in 0..{classes}"
                )));
            }
        }
        Ok(LocalDataset {
            task: TaskKind::Classification { classes },
            ..self
        })
    }

    /// New dataset holding the given rows (in the given order).
    fn select(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::InvalidParameter(
                "cannot build an empty dataset part".into(),
            ));
        }
        let mut features = Vec::with_capacity(indices.len() * self.width);
        let mut targets = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            targets.push(self.targets[i]);
        }
        Ok(LocalDataset {
            width: self.width,
            features,
            targets,
            task: self.task,
        })
    }
}

/// How a [`FederatedDataset`] was split across devices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartitionKind {
    /// Random shuffle of a common pool: device distributions are identical.
    Uniform,
    /// Devices own disjoint regions of the generating process (contiguous
    /// input intervals, or per-device generator parameters).
    NonIidInterval,
    /// Each device holds a single class.
    PerClass,
}

/// The `N` device datasets making up one federated learning problem.
#[derive(Debug, Clone, PartialEq)]
pub struct FederatedDataset {
    parts: Vec<LocalDataset>,
    partition_kind: PartitionKind,
}

impl FederatedDataset {
    pub fn from_parts(parts: Vec<LocalDataset>, partition_kind: PartitionKind) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::InvalidParameter(
                "federated dataset requires at least one device".into(),
            ));
        }
        let width = parts[0].width;
        let task = parts[0].task;
        for (i, p) in parts.iter().enumerate() {
            if p.width != width {
                return Err(Error::DimensionMismatch {
                    context: "device feature width",
                    expected: width,
                    got: p.width,
                });
            }
            if p.task != task {
                return Err(Error::InvalidParameter(format!(
                    "device {i} task kind differs from device 0"
                )));
            }
        }
        Ok(FederatedDataset {
            parts,
            partition_kind,
        })
    }

    pub fn n_devices(&self) -> usize {
        self.parts.len()
    }

    pub fn parts(&self) -> &[LocalDataset] {
        &self.parts
    }

    pub fn part(&self, i: usize) -> &LocalDataset {
        &self.parts[i]
    }

    pub fn partition_kind(&self) -> PartitionKind {
        self.partition_kind
    }

    pub fn width(&self) -> usize {
        self.parts[0].width
    }

    pub fn task(&self) -> TaskKind {
        self.parts[0].task
    }

    /// Total sample count `D = sum_i D_i`.
    pub fn total_samples(&self) -> usize {
        self.parts.iter().map(|p| p.n_samples()).sum()
    }

    /// Per-device sizes `D_i`.
    pub fn sizes(&self) -> Vec<usize> {
        self.parts.iter().map(|p| p.n_samples()).collect()
    }
}

fn check_range(x_range: (f64, f64)) -> Result<()> {
    let (lo, hi) = x_range;
    if !lo.is_finite() || !hi.is_finite() || lo >= hi {
        return Err(Error::InvalidParameter(format!(
            "x range must be finite and non-degenerate (got [{lo}, {hi}])"
        )));
    }
    Ok(())
}

fn check_gen_params(n_samples: usize, noise_sigma: f64, x_range: (f64, f64)) -> Result<()> {
    if n_samples < 1 {
        return Err(Error::InvalidParameter(
            "generator requires n_samples >= 1".into(),
        ));
    }
    if !(noise_sigma >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "noise_sigma must be >= 0 (got {noise_sigma})"
        )));
    }
    check_range(x_range)
}

/// Shared scalar-input sampler: per sample draws x (one uniform) then noise
/// (one Box-Muller normal, two uniforms), in that order — three draws per
/// sample regardless of `noise_sigma`.
fn gen_scalar_model(
    n_samples: usize,
    noise_sigma: f64,
    x_range: (f64, f64),
    rng: &mut SimRng,
    f: impl Fn(f64) -> f64,
) -> (Vec<Vec<f64>>, Vec<f64>) {
    let (lo, hi) = x_range;
    let mut rows = Vec::with_capacity(n_samples);
    let mut ys = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let x = lo + uniform01(rng) * (hi - lo);
        let z = standard_normal(rng);
        rows.push(vec![x]);
        ys.push(f(x) + noise_sigma * z);
    }
    (rows, ys)
}

/// Samples `y = slope * x + intercept + z`, `z ~ N(0, noise_sigma^2)`, with
/// `x` uniform on `x_range`.
pub fn gen_linear(
    n_samples: usize,
    slope: f64,
    intercept: f64,
    noise_sigma: f64,
    x_range: (f64, f64),
    rng: &mut SimRng,
) -> Result<LocalDataset> {
    check_gen_params(n_samples, noise_sigma, x_range)?;
    let (rows, ys) = gen_scalar_model(n_samples, noise_sigma, x_range, rng, |x| {
        slope * x + intercept
    });
    LocalDataset::new_regression(rows, ys)
}

/// Samples the non-linear model `y = x^2 + z`, `z ~ N(0, noise_sigma^2)`,
/// with `x` uniform on `x_range`. The features stay linear in `x`, so a
/// fitted line's slope depends on where the interval sits.
pub fn gen_quadratic(
    n_samples: usize,
    noise_sigma: f64,
    x_range: (f64, f64),
    rng: &mut SimRng,
) -> Result<LocalDataset> {
    check_gen_params(n_samples, noise_sigma, x_range)?;
    let (rows, ys) = gen_scalar_model(n_samples, noise_sigma, x_range, rng, |x| x * x);
    LocalDataset::new_regression(rows, ys)
}

/// Splits `base_range` into `n_devices` equal-width contiguous sub-intervals
/// and gives device `i` quadratic-model samples from sub-interval `i`
/// (devices consume the stream in device order). Each device's least-squares
/// line then has a different slope.
pub fn partition_noniid_intervals(
    base_range: (f64, f64),
    n_devices: usize,
    per_device: usize,
    noise_sigma: f64,
    rng: &mut SimRng,
) -> Result<FederatedDataset> {
    if n_devices < 1 {
        return Err(Error::InvalidParameter(
            "partition requires at least one device".into(),
        ));
    }
    check_gen_params(per_device, noise_sigma, base_range)?;
    let (lo, hi) = base_range;
    let step = (hi - lo) / n_devices as f64;
    let mut parts = Vec::with_capacity(n_devices);
    for i in 0..n_devices {
        let sub = if n_devices == 1 {
            // Exactly the caller's range so a single device reproduces
            // gen_quadratic bit-for-bit.
            (lo, hi)
        } else {
            (lo + i as f64 * step, lo + (i + 1) as f64 * step)
        };
        parts.push(gen_quadratic(per_device, noise_sigma, sub, rng)?);
    }
    FederatedDataset::from_parts(parts, PartitionKind::NonIidInterval)
}

/// Randomly shuffles `pool` and deals it out across `n_devices`. Sizes are
/// `floor(P/N)` with the remainder distributed one extra sample per device
/// starting from device 1. Every pool sample appears exactly once.
pub fn partition_uniform(
    pool: &LocalDataset,
    n_devices: usize,
    rng: &mut SimRng,
) -> Result<FederatedDataset> {
    if n_devices < 1 {
        return Err(Error::InvalidParameter(
            "partition requires at least one device".into(),
        ));
    }
    let p = pool.n_samples();
    if n_devices > p {
        return Err(Error::InvalidParameter(format!(
            "cannot split {p} samples across {n_devices} devices"
        )));
    }
    let mut indices: Vec<usize> = (0..p).collect();
    // Fisher-Yates, back to front, one uniform draw per swap: the shuffle is
    // pinned to this crate rather than to the rand crate's internals.
    for i in (1..p).rev() {
        let j = (uniform01(rng) * (i + 1) as f64) as usize;
        indices.swap(i, j.min(i));
    }
    let base = p / n_devices;
    let remainder = p % n_devices;
    let mut parts = Vec::with_capacity(n_devices);
    let mut offset = 0;
    for i in 0..n_devices {
        let size = base + usize::from(i < remainder);
        parts.push(pool.select(&indices[offset..offset + size])?);
        offset += size;
    }
    FederatedDataset::from_parts(parts, PartitionKind::Uniform)
}

fn blob_centers(n_classes: usize, d: usize, separation: f64) -> Vec<Vec<f64>> {
    (0..n_classes)
        .map(|c| {
            let mut center = vec![0.0; d];
            if d == 1 {
                center[0] = c as f64 * separation;
            } else {
                // Regular polygon in the first two coordinates; circumradius
                // chosen so the minimum pairwise distance equals `separation`.
                let radius = separation / (2.0 * (std::f64::consts::PI / n_classes as f64).sin());
                let angle = std::f64::consts::TAU * c as f64 / n_classes as f64;
                center[0] = radius * angle.cos();
                center[1] = radius * angle.sin();
            }
            center
        })
        .collect()
}

/// One Gaussian blob per class, sampled class block by class block (d normals
/// per sample). Used for both device shards and held-out pools.
fn sample_blob_rows(
    n_classes: usize,
    per_class: usize,
    d: usize,
    separation: f64,
    noise_sigma: f64,
    rng: &mut SimRng,
) -> (Vec<Vec<f64>>, Vec<usize>) {
    let centers = blob_centers(n_classes, d, separation);
    let mut rows = Vec::with_capacity(n_classes * per_class);
    let mut labels = Vec::with_capacity(n_classes * per_class);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            let row: Vec<f64> = center
                .iter()
                .map(|&m| m + noise_sigma * standard_normal(rng))
                .collect();
            rows.push(row);
            labels.push(c);
        }
    }
    (rows, labels)
}

fn check_blob_params(
    n_classes: usize,
    per_class: usize,
    d: usize,
    separation: f64,
    noise_sigma: f64,
) -> Result<()> {
    if n_classes < 2 {
        return Err(Error::InvalidParameter(format!(
            "blobs require at least 2 classes (got {n_classes})"
        )));
    }
    if per_class < 1 || d < 1 {
        return Err(Error::InvalidParameter(
            "blobs require per_class >= 1 and d >= 1".into(),
        ));
    }
    if !(separation >= 0.0) || !(noise_sigma >= 0.0) {
        return Err(Error::InvalidParameter(
            "blobs require separation >= 0 and noise_sigma >= 0".into(),
        ));
    }
    Ok(())
}

/// Maximally non-iid classification data: device `i` holds only class `i`.
/// Class centers sit `separation` apart (minimum pairwise distance) with
/// isotropic Gaussian spread `noise_sigma`.
pub fn gen_classification_blobs(
    n_classes: usize,
    per_class: usize,
    d: usize,
    separation: f64,
    noise_sigma: f64,
    rng: &mut SimRng,
) -> Result<FederatedDataset> {
    check_blob_params(n_classes, per_class, d, separation, noise_sigma)?;
    let (rows, labels) = sample_blob_rows(n_classes, per_class, d, separation, noise_sigma, rng);
    let mut parts = Vec::with_capacity(n_classes);
    for c in 0..n_classes {
        let start = c * per_class;
        let class_rows = rows[start..start + per_class].to_vec();
        let class_labels = labels[start..start + per_class].to_vec();
        parts.push(LocalDataset::new_classification(
            class_rows,
            class_labels,
            n_classes,
        )?);
    }
    FederatedDataset::from_parts(parts, PartitionKind::PerClass)
}

/// A single mixed pool with `per_class` samples of every class, for held-out
/// evaluation at the central node.
pub fn gen_classification_pool(
    n_classes: usize,
    per_class: usize,
    d: usize,
    separation: f64,
    noise_sigma: f64,
    rng: &mut SimRng,
) -> Result<LocalDataset> {
    check_blob_params(n_classes, per_class, d, separation, noise_sigma)?;
    let (rows, labels) = sample_blob_rows(n_classes, per_class, d, separation, noise_sigma, rng);
    LocalDataset::new_classification(rows, labels, n_classes)
}

/// 17 significant digits: round-trips every finite f64 exactly.
pub(crate) fn fmt_float(x: f64) -> String {
    format!("{x:.16e}")
}

/// Write a dataset as CSV: header `x_0,...,x_{d-1},y`, UTF-8, LF endings,
/// floats at 17 significant digits. The bias column is not stored.
pub fn save_csv(dataset: &LocalDataset, path: &Path) -> Result<()> {
    let raw_width = dataset.width - 1;
    let mut out = String::new();
    for i in 0..raw_width {
        let _ = write!(out, "x_{i},");
    }
    out.push_str("y\n");
    for r in 0..dataset.n_samples() {
        let row = dataset.row(r);
        for &v in &row[..raw_width] {
            out.push_str(&fmt_float(v));
            out.push(',');
        }
        out.push_str(&fmt_float(dataset.targets[r]));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Load a CSV written by [`save_csv`] (or compatible). Targets are read as
/// regression values; use [`LocalDataset::into_classification`] for label
/// data. The bias column is appended here, so repeated save/load cycles never
/// duplicate it.
pub fn load_csv(path: &Path) -> Result<LocalDataset> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        message: "missing header row".into(),
    })?;
    let columns = header.split(',').count();
    if columns < 2 {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected at least 2 columns (x_0,...,y), got {columns}"),
        });
    }
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1; // 1-based for messages
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != columns {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected {columns} fields, got {}", fields.len()),
            });
        }
        let mut row = Vec::with_capacity(columns - 1);
        for (c, field) in fields.iter().enumerate() {
            let value: f64 = field.trim().parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("field {c} ({field:?}) is not a number"),
            })?;
            if !value.is_finite() {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("field {c} is not finite"),
                });
            }
            if c + 1 == columns {
                targets.push(value);
            } else {
                row.push(value);
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            line: 1,
            message: "file contains a header but no data rows".into(),
        });
    }
    LocalDataset::new_regression(rows, targets)
}
