//! The central node's aggregation rules.
//!
//! Three strategies for combining device updates into the next global
//! parameter:
//!
//! * error-free — the ideal size-weighted average over all `N` fresh updates;
//! * memoryless — the same average renormalized over the received set only;
//! * stale-reuse — the full-weight average with each missing device's slot
//!   filled from [`UpdateCache`], the most recent successfully received
//!   update for that device.
//!
//! All three share one combination kernel (weights normalized first, then a
//! pairwise-summed weighted sum in device order), so with an all-received
//! pattern they return bit-identical results.

use serde::{Deserialize, Serialize};

use crate::channel::ErasurePattern;
use crate::linalg::{pairwise_sum, pairwise_weighted_combination};
use crate::model::ParamVector;
use crate::{Error, Result};

/// Which aggregation rule the central node runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AggregationStrategy {
    ErrorFree,
    Memoryless,
    StaleReuse,
}

impl AggregationStrategy {
    pub const ALL: [AggregationStrategy; 3] = [
        AggregationStrategy::ErrorFree,
        AggregationStrategy::Memoryless,
        AggregationStrategy::StaleReuse,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AggregationStrategy::ErrorFree => "error-free",
            AggregationStrategy::Memoryless => "memoryless",
            AggregationStrategy::StaleReuse => "stale-reuse",
        }
    }
}

impl std::fmt::Display for AggregationStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for AggregationStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "error-free" => Ok(AggregationStrategy::ErrorFree),
            "memoryless" => Ok(AggregationStrategy::Memoryless),
            "stale-reuse" => Ok(AggregationStrategy::StaleReuse),
            other => Err(Error::InvalidParameter(format!(
                "unknown strategy {other:?} (expected error-free, memoryless, or stale-reuse)"
            ))),
        }
    }
}

/// The central node's memory of the last update it received from each
/// device, plus the round it arrived in (0 = the initialization value).
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateCache {
    last_seen: Vec<ParamVector>,
    last_round: Vec<usize>,
}

impl UpdateCache {
    /// Before round 1 every entry holds the global initialization.
    pub fn initial(w0: &ParamVector, n_devices: usize) -> Self {
        UpdateCache {
            last_seen: vec![w0.clone(); n_devices],
            last_round: vec![0; n_devices],
        }
    }

    pub fn n_devices(&self) -> usize {
        self.last_seen.len()
    }

    pub fn last_seen(&self, device: usize) -> &ParamVector {
        &self.last_seen[device]
    }

    pub fn last_round(&self, device: usize) -> usize {
        self.last_round[device]
    }
}

fn check_shapes(updates: &[ParamVector], sizes: &[usize]) -> Result<()> {
    if updates.is_empty() {
        return Err(Error::InvalidParameter(
            "aggregation requires at least one device".into(),
        ));
    }
    if updates.len() != sizes.len() {
        return Err(Error::DimensionMismatch {
            context: "updates vs sizes",
            expected: updates.len(),
            got: sizes.len(),
        });
    }
    let len = updates[0].len();
    let kind = updates[0].kind;
    for u in updates {
        if u.len() != len || u.kind != kind {
            return Err(Error::DimensionMismatch {
                context: "device update shapes",
                expected: len,
                got: u.len(),
            });
        }
    }
    Ok(())
}

/// Size-weighted average of `(size, vector)` entries in the order given.
/// Weights are normalized before combining, so a single entry passes its
/// vector through bit-exactly.
fn weighted_average(entries: &[(usize, &ParamVector)]) -> ParamVector {
    debug_assert!(!entries.is_empty());
    let sizes: Vec<f64> = entries.iter().map(|&(s, _)| s as f64).collect();
    let total = pairwise_sum(&sizes);
    let weighted: Vec<(f64, &[f64])> = entries
        .iter()
        .zip(&sizes)
        .map(|(&(_, v), &s)| (s / total, v.values()))
        .collect();
    let values = pairwise_weighted_combination(&weighted);
    ParamVector::new(entries[0].1.kind, values).expect("aggregation of finite inputs is finite")
}

/// Ideal aggregation over all devices: `w = (1/D) sum_i D_i w_i`.
pub fn aggregate_error_free(updates: &[ParamVector], sizes: &[usize]) -> Result<ParamVector> {
    check_shapes(updates, sizes)?;
    let entries: Vec<(usize, &ParamVector)> =
        sizes.iter().copied().zip(updates.iter()).collect();
    Ok(weighted_average(&entries))
}

/// Memoryless aggregation: average the received updates only, renormalized
/// over `S(t)`. When nothing is received the rule is 0/0; the previous global
/// parameter is retained for that round. Erased entries of `updates` are
/// never read.
pub fn aggregate_memoryless(
    updates: &[ParamVector],
    pattern: &ErasurePattern,
    sizes: &[usize],
    previous_global: &ParamVector,
) -> Result<ParamVector> {
    check_shapes(updates, sizes)?;
    if pattern.n_devices() != updates.len() {
        return Err(Error::DimensionMismatch {
            context: "pattern vs updates",
            expected: updates.len(),
            got: pattern.n_devices(),
        });
    }
    let entries: Vec<(usize, &ParamVector)> = pattern
        .received_set()
        .map(|i| (sizes[i], &updates[i]))
        .collect();
    if entries.is_empty() {
        return Ok(previous_global.clone());
    }
    Ok(weighted_average(&entries))
}

/// Stale-reuse aggregation: full-weight average with cache entries standing
/// in for erased devices, `w = (1/D)(sum_{i in S} D_i w_i + sum_{j in F} D_j
/// cache_j)`. The returned cache holds the fresh updates for `i in S` (tagged
/// with `round`); entries for erased devices are untouched.
pub fn aggregate_stale_reuse(
    updates: &[ParamVector],
    pattern: &ErasurePattern,
    sizes: &[usize],
    mut cache: UpdateCache,
    round: usize,
) -> Result<(ParamVector, UpdateCache)> {
    check_shapes(updates, sizes)?;
    if pattern.n_devices() != updates.len() || cache.n_devices() != updates.len() {
        return Err(Error::DimensionMismatch {
            context: "pattern/cache vs updates",
            expected: updates.len(),
            got: pattern.n_devices().min(cache.n_devices()),
        });
    }
    let entries: Vec<(usize, &ParamVector)> = (0..updates.len())
        .map(|i| {
            let v = if pattern.is_received(i) {
                &updates[i]
            } else {
                &cache.last_seen[i]
            };
            (sizes[i], v)
        })
        .collect();
    let aggregated = weighted_average(&entries);
    for i in pattern.received_set() {
        cache.last_seen[i] = updates[i].clone();
        cache.last_round[i] = round;
    }
    Ok((aggregated, cache))
}
