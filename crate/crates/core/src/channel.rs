//! Packet-erasure uplink model.
//!
//! Each device's upload is an independent Bernoulli erasure: received with
//! probability `1 - epsilon_i`, lost otherwise. For short packets the erasure
//! probability itself comes from the finite-blocklength normal approximation
//! evaluated by [`erasure_probability`].

use serde::{Deserialize, Serialize};

use crate::rng::{uniform01, SimRng};
use crate::{Error, Result};

/// Short-packet uplink parameters: `k` payload bits coded into `n` channel
/// uses at signal-to-noise ratio `gamma` (linear scale).
///
/// The code rate `k/n` may exceed capacity; the formula then simply yields an
/// erasure probability near one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShortPacketConfig {
    /// Payload length in bits.
    pub k: u64,
    /// Codeword length in channel uses.
    pub n: u64,
    /// Signal-to-noise ratio, linear scale.
    pub gamma: f64,
}

impl ShortPacketConfig {
    pub fn new(k: u64, n: u64, gamma: f64) -> Result<Self> {
        if k < 1 || n < 1 {
            return Err(Error::InvalidParameter(format!(
                "short-packet config requires k >= 1 and n >= 1 (got k={k}, n={n})"
            )));
        }
        if !(gamma > 0.0) || !gamma.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "short-packet config requires finite gamma > 0 (got {gamma})"
            )));
        }
        Ok(ShortPacketConfig { k, n, gamma })
    }

    /// Channel dispersion `V(gamma) = (1 - (1 + gamma)^-2) * log2(e)^2`.
    pub fn dispersion(&self) -> f64 {
        let g1 = 1.0 + self.gamma;
        (1.0 - 1.0 / (g1 * g1)) * std::f64::consts::LOG2_E * std::f64::consts::LOG2_E
    }
}

/// The Gaussian tail probability `Q(x) = P(Z > x)` for standard normal `Z`,
/// computed through the identity `Q(x) = erfc(x / sqrt(2)) / 2`.
pub fn q_function(x: f64) -> f64 {
    0.5 * libm::erfc(x / std::f64::consts::SQRT_2)
}

/// Short-packet erasure probability from the normal approximation:
///
/// `Q((n*log2(1+gamma) - k + log2(n)) / sqrt(n*V(gamma)))`
///
/// The result is clamped to `[0, 1]` to absorb floating-point spill at
/// extreme arguments.
pub fn erasure_probability(cfg: &ShortPacketConfig) -> Result<f64> {
    // Re-validate so values built via struct literals are still checked.
    let cfg = ShortPacketConfig::new(cfg.k, cfg.n, cfg.gamma)?;
    let n = cfg.n as f64;
    let k = cfg.k as f64;
    let numerator = n * (1.0 + cfg.gamma).log2() - k + n.log2();
    let denominator = (n * cfg.dispersion()).sqrt();
    let arg = numerator / denominator;
    if arg.is_nan() {
        // 0/0 can only happen when gamma underflows the dispersion while the
        // rate term is exactly balanced; the limit is Q(0).
        return Ok(0.5);
    }
    Ok(q_function(arg).clamp(0.0, 1.0))
}

/// Per-device erasure probabilities for the `N` uplinks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErasureChannelSet {
    epsilons: Vec<f64>,
}

impl ErasureChannelSet {
    pub fn new(epsilons: Vec<f64>) -> Result<Self> {
        if epsilons.is_empty() {
            return Err(Error::InvalidParameter(
                "erasure channel set requires at least one device".into(),
            ));
        }
        for (i, &e) in epsilons.iter().enumerate() {
            if !(0.0..=1.0).contains(&e) {
                return Err(Error::InvalidParameter(format!(
                    "epsilon[{i}] = {e} is outside [0, 1]"
                )));
            }
        }
        Ok(ErasureChannelSet { epsilons })
    }

    /// All devices share the same erasure probability.
    pub fn shared(epsilon: f64, n_devices: usize) -> Result<Self> {
        Self::new(vec![epsilon; n_devices])
    }

    pub fn n_devices(&self) -> usize {
        self.epsilons.len()
    }

    pub fn epsilons(&self) -> &[f64] {
        &self.epsilons
    }

    /// The common erasure probability, if all devices share one. The
    /// convergence-bound operations require this and reject mixed channels.
    pub fn common_epsilon(&self) -> Option<f64> {
        let first = self.epsilons[0];
        self.epsilons
            .iter()
            .all(|&e| e == first)
            .then_some(first)
    }
}

/// One round's channel realization: which devices' uploads arrived.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErasurePattern {
    received: Vec<bool>,
}

impl ErasurePattern {
    pub fn new(received: Vec<bool>) -> Self {
        ErasurePattern { received }
    }

    pub fn all_received(n_devices: usize) -> Self {
        ErasurePattern {
            received: vec![true; n_devices],
        }
    }

    pub fn n_devices(&self) -> usize {
        self.received.len()
    }

    #[inline]
    pub fn is_received(&self, device: usize) -> bool {
        self.received[device]
    }

    /// `S(t)`: indices of devices whose update arrived.
    pub fn received_set(&self) -> impl Iterator<Item = usize> + '_ {
        self.received
            .iter()
            .enumerate()
            .filter_map(|(i, &r)| r.then_some(i))
    }

    /// `F(t)`: indices of devices whose update was erased. Together with
    /// `received_set` this partitions the device indices.
    pub fn failed_set(&self) -> impl Iterator<Item = usize> + '_ {
        self.received
            .iter()
            .enumerate()
            .filter_map(|(i, &r)| (!r).then_some(i))
    }

    pub fn received_count(&self) -> usize {
        self.received.iter().filter(|&&r| r).count()
    }

    /// Pattern as a bit string, device 0 first, '1' meaning received.
    pub fn bits(&self) -> String {
        self.received
            .iter()
            .map(|&r| if r { '1' } else { '0' })
            .collect()
    }

    pub fn from_bits(bits: &str) -> Result<Self> {
        let received = bits
            .chars()
            .map(|c| match c {
                '1' => Ok(true),
                '0' => Ok(false),
                other => Err(Error::InvalidParameter(format!(
                    "pattern bit must be '0' or '1', got {other:?}"
                ))),
            })
            .collect::<Result<Vec<bool>>>()?;
        Ok(ErasurePattern { received })
    }
}

/// Sample one round's erasure pattern, one uniform draw per device in device
/// order: device `i` is received iff the draw is `>= epsilon_i`. Consumes
/// exactly `N` draws from the stream.
pub fn sample_pattern(channels: &ErasureChannelSet, rng: &mut SimRng) -> ErasurePattern {
    let received = channels
        .epsilons
        .iter()
        .map(|&eps| uniform01(rng) >= eps)
        .collect();
    ErasurePattern { received }
}
