//! The mathematical apparatus behind the convergence claims: curvature
//! constants of the global loss, the convexity/smoothness inequality
//! checkers, the subset-smoothness lemma check, the exact distribution of the
//! memoryless global parameter, the running-average bound, and the optimal
//! parameter oracle.
//!
//! The global loss throughout is `F(w) = (1/N) sum_i F_i(w)`; note this is
//! the plain device average, not the size-weighted aggregation average (the
//! two coincide when all devices hold the same number of samples).

use serde::{Deserialize, Serialize};

use crate::data::FederatedDataset;
use crate::linalg::{
    inverse_power_iteration_min, pairwise_sum, pairwise_weighted_combination,
    power_iteration_max, solve, SquareMat,
};
use crate::model::{local_gradient, local_loss, LossSpec, ModelKind, ParamVector};
use crate::rng::{standard_normal, SimRng};
use crate::{channel::ErasureChannelSet, Error, Result};

/// Curvature of the global loss: `l` is the smoothness constant (largest
/// Hessian eigenvalue for quadratics), `mu` the lower Lipschitz constant of
/// the gradient (smallest eigenvalue), and `per_device_l` the per-device
/// smoothness constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvatureConstants {
    pub l: f64,
    pub mu: f64,
    pub per_device_l: Vec<f64>,
}

impl CurvatureConstants {
    pub fn new(l: f64, mu: f64, per_device_l: Vec<f64>) -> Result<Self> {
        if !(l.is_finite() && mu.is_finite()) || mu < 0.0 || mu > l * (1.0 + 1e-12) {
            return Err(Error::InvalidParameter(format!(
                "curvature constants require 0 <= mu <= L (got mu={mu}, L={l})"
            )));
        }
        Ok(CurvatureConstants {
            l,
            mu: mu.min(l),
            per_device_l,
        })
    }

    /// An upper bound on every device's smoothness constant, as required by
    /// the subset-smoothness lemma.
    pub fn max_device_l(&self) -> f64 {
        self.per_device_l.iter().fold(self.l, |m, &x| m.max(x))
    }
}

/// Per-device Gram matrix `X_i' X_i / D_i` (bias column included).
fn gram_matrix(ds: &crate::data::LocalDataset) -> SquareMat {
    let d = ds.width();
    let mut g = SquareMat::zeros(d);
    for j in 0..ds.n_samples() {
        let row = ds.row(j);
        for r in 0..d {
            for c in r..d {
                g.add_to(r, c, row[r] * row[c]);
            }
        }
    }
    let scale = 1.0 / ds.n_samples() as f64;
    for r in 0..d {
        for c in r..d {
            let v = g.get(r, c) * scale;
            g.set(r, c, v);
            g.set(c, r, v);
        }
    }
    g
}

/// Hessian of the global quadratic loss:
/// `H = (1/N) sum_i X_i' X_i / D_i + lambda I`.
fn global_hessian(fed: &FederatedDataset, lambda: f64) -> SquareMat {
    let d = fed.width();
    let n = fed.n_devices() as f64;
    let mut h = SquareMat::zeros(d);
    for part in fed.parts() {
        let g = gram_matrix(part);
        for (hv, gv) in h.data.iter_mut().zip(&g.data) {
            *hv += gv / n;
        }
    }
    h.shift_diagonal(lambda);
    h
}

/// Exact curvature constants for the quadratic (linear-MSE) global loss:
/// `L` and `mu` are the extreme eigenvalues of the global Hessian, found by
/// power iteration and inverse-shift power iteration to 1e-10 relative.
pub fn curvature_quadratic(fed: &FederatedDataset, spec: &LossSpec) -> Result<CurvatureConstants> {
    if spec.kind != ModelKind::LinearMse {
        return Err(Error::InvalidParameter(
            "curvature_quadratic requires the linear-mse model (exact Hessian)".into(),
        ));
    }
    let h = global_hessian(fed, spec.lambda);
    let l = power_iteration_max(&h)?;
    let mu = inverse_power_iteration_min(&h, l)?;
    let per_device_l = fed
        .parts()
        .iter()
        .map(|p| {
            let mut g = gram_matrix(p);
            g.shift_diagonal(spec.lambda);
            power_iteration_max(&g)
        })
        .collect::<Result<Vec<f64>>>()?;
    CurvatureConstants::new(l, mu, per_device_l)
}

/// Global loss `F(w) = (1/N) sum_i F_i(w)` (pairwise-summed over devices).
pub fn global_loss(fed: &FederatedDataset, spec: &LossSpec, w: &ParamVector) -> Result<f64> {
    let losses = fed
        .parts()
        .iter()
        .map(|p| local_loss(w, p, spec))
        .collect::<Result<Vec<f64>>>()?;
    Ok(pairwise_sum(&losses) / fed.n_devices() as f64)
}

/// Gradient of the global loss.
pub fn global_gradient(
    fed: &FederatedDataset,
    spec: &LossSpec,
    w: &ParamVector,
) -> Result<ParamVector> {
    let grads = fed
        .parts()
        .iter()
        .map(|p| local_gradient(w, p, spec))
        .collect::<Result<Vec<ParamVector>>>()?;
    let weight = 1.0 / fed.n_devices() as f64;
    let entries: Vec<(f64, &[f64])> = grads.iter().map(|g| (weight, g.values())).collect();
    ParamVector::new(w.kind, pairwise_weighted_combination(&entries))
}

/// Gradient of the subset loss `F_G(w) = (1/N) sum_{i in G} F_i(w)`; the
/// normalizer stays the full device count.
pub fn subset_gradient(
    fed: &FederatedDataset,
    spec: &LossSpec,
    subset: &[usize],
    w: &ParamVector,
) -> Result<ParamVector> {
    for &i in subset {
        if i >= fed.n_devices() {
            return Err(Error::InvalidParameter(format!(
                "subset device index {i} out of range (N = {})",
                fed.n_devices()
            )));
        }
    }
    let weight = 1.0 / fed.n_devices() as f64;
    let grads = subset
        .iter()
        .map(|&i| local_gradient(w, fed.part(i), spec))
        .collect::<Result<Vec<ParamVector>>>()?;
    if grads.is_empty() {
        return Ok(ParamVector::zeros(w.kind, fed.width()));
    }
    let entries: Vec<(f64, &[f64])> = grads.iter().map(|g| (weight, g.values())).collect();
    ParamVector::new(w.kind, pairwise_weighted_combination(&entries))
}

const SLACK_TOL: f64 = 1e-9;

/// One inequality's outcome over the sampled pairs. `worst_slack` is the
/// largest normalized margin `(lhs - rhs) / scale` observed; anything above
/// `1e-9` counts as a violation.
#[derive(Debug, Clone, Serialize)]
pub struct InequalityCheck {
    pub name: String,
    pub worst_slack: f64,
    pub violations: usize,
    /// First violating pair, if any.
    pub witness: Option<(Vec<f64>, Vec<f64>)>,
}

impl InequalityCheck {
    fn new(name: &str) -> Self {
        InequalityCheck {
            name: name.to_string(),
            worst_slack: f64::NEG_INFINITY,
            violations: 0,
            witness: None,
        }
    }

    fn record(&mut self, lhs: f64, rhs: f64, x: &ParamVector, y: &ParamVector) {
        let scale = lhs.abs().max(rhs.abs()).max(1.0);
        let slack = (lhs - rhs) / scale;
        if slack > self.worst_slack {
            self.worst_slack = slack;
        }
        if slack > SLACK_TOL {
            self.violations += 1;
            if self.witness.is_none() {
                self.witness = Some((x.values().to_vec(), y.values().to_vec()));
            }
        }
    }
}

/// Report from [`check_inequalities`] or [`check_subset_smoothness`].
#[derive(Debug, Clone, Serialize)]
pub struct InequalityReport {
    pub pairs_checked: usize,
    pub checks: Vec<InequalityCheck>,
}

impl InequalityReport {
    pub fn total_violations(&self) -> usize {
        self.checks.iter().map(|c| c.violations).sum()
    }

    /// Fail with the violated inequality's name and witness pair.
    pub fn assert_clean(&self) -> Result<()> {
        for c in &self.checks {
            if c.violations > 0 {
                return Err(Error::Numeric(format!(
                    "inequality {:?} violated on {} pair(s); worst slack {:.3e}; witness {:?}",
                    c.name, c.violations, c.worst_slack, c.witness
                )));
            }
        }
        Ok(())
    }
}

/// Check the four convexity/smoothness relations of the global loss on the
/// given point pairs:
///
/// * descent lemma: `f(y) <= f(x) + <grad f(x), y - x> + (L/2)||y - x||^2`
/// * suboptimality: `f(x*) - f(x) <= -(1/2L)||grad f(x)||^2`
/// * gradient Lipschitz: `||grad f(x) - grad f(y)|| <= L ||x - y||`
/// * cocoercivity: `<grad f(x) - grad f(y), x - y> >= (1/L)||grad f(x) - grad f(y)||^2`
///
/// `optimum` supplies `(w*, f(w*))` for the suboptimality line.
pub fn check_inequalities(
    fed: &FederatedDataset,
    spec: &LossSpec,
    constants: &CurvatureConstants,
    optimum: (&ParamVector, f64),
    pairs: &[(ParamVector, ParamVector)],
) -> Result<InequalityReport> {
    let l = constants.l;
    let mut descent = InequalityCheck::new("descent-lemma");
    let mut subopt = InequalityCheck::new("suboptimality-gradient");
    let mut lipschitz = InequalityCheck::new("gradient-lipschitz");
    let mut cocoercive = InequalityCheck::new("cocoercivity");
    let (_, f_star) = optimum;

    for (x, y) in pairs {
        let fx = global_loss(fed, spec, x)?;
        let fy = global_loss(fed, spec, y)?;
        let gx = global_gradient(fed, spec, x)?;
        let gy = global_gradient(fed, spec, y)?;

        let diff_yx: Vec<f64> = y
            .values()
            .iter()
            .zip(x.values())
            .map(|(a, b)| a - b)
            .collect();
        let dist_sq: f64 = diff_yx.iter().map(|v| v * v).sum();
        let inner_gx_diff: f64 = gx.values().iter().zip(&diff_yx).map(|(g, d)| g * d).sum();
        descent.record(fy, fx + inner_gx_diff + 0.5 * l * dist_sq, x, y);

        let grad_norm_sq: f64 = gx.values().iter().map(|v| v * v).sum();
        subopt.record(f_star - fx, -grad_norm_sq / (2.0 * l), x, y);

        let grad_diff: Vec<f64> = gx
            .values()
            .iter()
            .zip(gy.values())
            .map(|(a, b)| a - b)
            .collect();
        let grad_diff_sq: f64 = grad_diff.iter().map(|v| v * v).sum();
        lipschitz.record(grad_diff_sq.sqrt(), l * dist_sq.sqrt(), x, y);

        // diff_yx is y - x; cocoercivity pairs grad f(x) - grad f(y) with x - y.
        let inner: f64 = grad_diff.iter().zip(&diff_yx).map(|(g, d)| g * -d).sum();
        cocoercive.record(grad_diff_sq / l, inner, x, y);
    }

    Ok(InequalityReport {
        pairs_checked: pairs.len(),
        checks: vec![descent, subopt, lipschitz, cocoercive],
    })
}

/// Check the subset-smoothness lemma: for `F_G = (1/N) sum_{i in G} F_i` and
/// a constant `l_common` valid for every device,
/// `||grad F_G(x) - grad F_G(y)|| <= (|G| l_common / N) ||x - y||`.
pub fn check_subset_smoothness(
    fed: &FederatedDataset,
    spec: &LossSpec,
    subset: &[usize],
    l_common: f64,
    pairs: &[(ParamVector, ParamVector)],
) -> Result<InequalityReport> {
    let bound_factor = subset.len() as f64 * l_common / fed.n_devices() as f64;
    let mut check = InequalityCheck::new("subset-gradient-lipschitz");
    for (x, y) in pairs {
        let gx = subset_gradient(fed, spec, subset, x)?;
        let gy = subset_gradient(fed, spec, subset, y)?;
        let grad_dist = gx.distance_sq(&gy).sqrt();
        let dist = x.distance_sq(y).sqrt();
        check.record(grad_dist, bound_factor * dist, x, y);
    }
    Ok(InequalityReport {
        pairs_checked: pairs.len(),
        checks: vec![check],
    })
}

/// Sample `count` random parameter pairs with i.i.d. normal components of
/// the given scale, for the inequality checkers.
pub fn sample_param_pairs(
    kind: ModelKind,
    width: usize,
    count: usize,
    scale: f64,
    rng: &mut SimRng,
) -> Vec<(ParamVector, ParamVector)> {
    let len = kind.param_len(width);
    (0..count)
        .map(|_| {
            let a: Vec<f64> = (0..len).map(|_| scale * standard_normal(rng)).collect();
            let b: Vec<f64> = (0..len).map(|_| scale * standard_normal(rng)).collect();
            (
                ParamVector::new(kind, a).expect("finite"),
                ParamVector::new(kind, b).expect("finite"),
            )
        })
        .collect()
}

/// The value of one atom of the memoryless global-parameter distribution.
/// The all-erased pattern has no defined numeric value (the aggregation rule
/// is 0/0 there); it stays symbolic and consumers must branch on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "point", rename_all = "kebab-case")]
pub enum AtomValue {
    Point(Vec<f64>),
    PreviousGlobal,
}

/// One atom: an erasure pattern (bit `i` set means device `i` received), its
/// probability, and the resulting global parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct PmfAtom {
    pub pattern: u32,
    pub probability: f64,
    pub value: AtomValue,
}

impl PmfAtom {
    pub fn received_count(&self) -> u32 {
        self.pattern.count_ones()
    }

    pub fn bits(&self, n_devices: usize) -> String {
        (0..n_devices)
            .map(|i| if self.pattern >> i & 1 == 1 { '1' } else { '0' })
            .collect()
    }

    /// Averaging weights over devices defining the atom's value
    /// (`I_i / |S|`, all zero for the all-erased atom).
    pub fn weights(&self, n_devices: usize) -> Vec<f64> {
        let s = self.pattern.count_ones() as f64;
        (0..n_devices)
            .map(|i| {
                if self.pattern >> i & 1 == 1 {
                    1.0 / s
                } else {
                    0.0
                }
            })
            .collect()
    }
}

/// Exact distribution of the memoryless global parameter over all `2^N`
/// erasure patterns, in pattern-mask order (no merging of equal atoms).
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalParamPmf {
    pub n_devices: usize,
    pub atoms: Vec<PmfAtom>,
}

impl GlobalParamPmf {
    pub fn total_mass(&self) -> f64 {
        let ps: Vec<f64> = self.atoms.iter().map(|a| a.probability).collect();
        pairwise_sum(&ps)
    }

    pub fn atom_for_pattern(&self, pattern: u32) -> &PmfAtom {
        &self.atoms[pattern as usize]
    }

    /// Serializable view with human-readable pattern strings (device 0 is
    /// the leftmost bit).
    pub fn report(&self) -> PmfReport {
        PmfReport {
            n_devices: self.n_devices,
            total_mass: self.total_mass(),
            atoms: self
                .atoms
                .iter()
                .map(|a| PmfAtomReport {
                    pattern: a.bits(self.n_devices),
                    probability: a.probability,
                    value: a.value.clone(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PmfAtomReport {
    pub pattern: String,
    pub probability: f64,
    #[serde(flatten)]
    pub value: AtomValue,
}

#[derive(Debug, Clone, Serialize)]
pub struct PmfReport {
    pub n_devices: usize,
    pub total_mass: f64,
    pub atoms: Vec<PmfAtomReport>,
}

const PMF_MAX_DEVICES: usize = 24;

/// Enumerate the distribution of the memoryless global parameter
/// `w = (sum_i I_i w_i) / (sum_i I_i)` with
/// `P(pattern) = prod_i eps_i^(1 - I_i) * (1 - eps_i)^(I_i)`.
///
/// `local_params` are the per-device parameters being averaged (the regime
/// where local iterations have converged). Guarded at `N <= 24` since the
/// enumeration has `2^N` atoms.
pub fn memoryless_pmf(
    local_params: &[ParamVector],
    channels: &ErasureChannelSet,
) -> Result<GlobalParamPmf> {
    let n = local_params.len();
    if n == 0 || n != channels.n_devices() {
        return Err(Error::DimensionMismatch {
            context: "local params vs channels",
            expected: channels.n_devices(),
            got: n,
        });
    }
    if n > PMF_MAX_DEVICES {
        return Err(Error::InvalidParameter(format!(
            "pmf enumeration is limited to N <= {PMF_MAX_DEVICES} (2^N atoms); got N = {n}"
        )));
    }
    let dim = local_params[0].len();
    let kind = local_params[0].kind;
    for p in local_params {
        if p.len() != dim || p.kind != kind {
            return Err(Error::DimensionMismatch {
                context: "local parameter shapes",
                expected: dim,
                got: p.len(),
            });
        }
    }
    let eps = channels.epsilons();
    let mut atoms = Vec::with_capacity(1usize << n);
    for pattern in 0u32..(1u32 << n) {
        let mut probability = 1.0;
        for (i, &e) in eps.iter().enumerate() {
            probability *= if pattern >> i & 1 == 1 { 1.0 - e } else { e };
        }
        let received = pattern.count_ones();
        let value = if received == 0 {
            AtomValue::PreviousGlobal
        } else {
            let mut acc = vec![0.0; dim];
            for (i, p) in local_params.iter().enumerate() {
                if pattern >> i & 1 == 1 {
                    for (a, v) in acc.iter_mut().zip(p.values()) {
                        *a += v;
                    }
                }
            }
            let s = received as f64;
            AtomValue::Point(acc.into_iter().map(|v| v / s).collect())
        };
        atoms.push(PmfAtom {
            pattern,
            probability,
            value,
        });
    }
    Ok(GlobalParamPmf {
        n_devices: n,
        atoms,
    })
}

/// The running-average convergence bound together with its applicability
/// conditions: requires a common erasure probability `epsilon <= mu/(2L)`
/// with strictly positive `beta^2 = mu^2/(2L) - 2L epsilon^2`, and applies to
/// stale-reuse runs at `eta = 1/L` with one local step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvergenceBound {
    pub beta_sq: f64,
    pub f0_gap: f64,
    pub epsilon: f64,
    pub l: f64,
    pub mu: f64,
}

impl ConvergenceBound {
    pub fn new(constants: &CurvatureConstants, epsilon: f64, f0_gap: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(Error::InvalidParameter(format!(
                "epsilon must be in [0, 1] (got {epsilon})"
            )));
        }
        if !(f0_gap >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "initial loss gap must be >= 0 (got {f0_gap})"
            )));
        }
        let (l, mu) = (constants.l, constants.mu);
        let threshold = mu / (2.0 * l);
        if epsilon > threshold {
            return Err(Error::NotApplicable {
                condition: format!(
                    "epsilon <= mu/(2L) fails: epsilon = {epsilon}, mu/(2L) = {threshold}"
                ),
            });
        }
        let beta_sq = mu * mu / (2.0 * l) - 2.0 * l * epsilon * epsilon;
        if beta_sq <= 0.0 {
            return Err(Error::NotApplicable {
                condition: format!("beta^2 > 0 fails: beta^2 = {beta_sq}"),
            });
        }
        Ok(ConvergenceBound {
            beta_sq,
            f0_gap,
            epsilon,
            l,
            mu,
        })
    }

    /// `f0_gap / (t beta^2)` for round `t >= 1`.
    pub fn at(&self, t: usize) -> Result<f64> {
        if t < 1 {
            return Err(Error::InvalidParameter(
                "the bound is defined for t >= 1".into(),
            ));
        }
        Ok(self.f0_gap / (t as f64 * self.beta_sq))
    }
}

/// One-shot evaluation of the running-average bound at round `t`.
pub fn running_average_bound(
    constants: &CurvatureConstants,
    epsilon: f64,
    f0_gap: f64,
    t: usize,
) -> Result<f64> {
    ConvergenceBound::new(constants, epsilon, f0_gap)?.at(t)
}

/// Minimizer of the global loss and its value.
///
/// Linear-MSE is solved by the normal equations of the pooled, size-weighted
/// problem (`H w = (1/N) sum_i X_i' y_i / D_i`). Softmax is solved by
/// centralized full-batch gradient descent at step `1/L_hat` (with `L_hat`
/// from the quadratic upper bound on the softmax Hessian) down to gradient
/// norm `1e-10`. Either way the returned point satisfies
/// `||grad F(w*)|| < 1e-9`.
pub fn optimal_params(fed: &FederatedDataset, spec: &LossSpec) -> Result<(ParamVector, f64)> {
    let w_star = match spec.kind {
        ModelKind::LinearMse => {
            let h = global_hessian(fed, spec.lambda);
            let d = fed.width();
            let n = fed.n_devices() as f64;
            let mut b = vec![0.0; d];
            for part in fed.parts() {
                let scale = 1.0 / (part.n_samples() as f64 * n);
                for j in 0..part.n_samples() {
                    let row = part.row(j);
                    let y = part.targets()[j];
                    for (bv, &x) in b.iter_mut().zip(row) {
                        *bv += x * y * scale;
                    }
                }
            }
            ParamVector::new(spec.kind, solve(&h, &b)?)?
        }
        ModelKind::SoftmaxXent { .. } => {
            // Per-sample softmax Hessians are bounded by (1/2) x x', so
            // eta = 1/(0.5 lambda_max(Gram) + lambda) is a safe descent step.
            let gram = global_hessian(fed, 0.0);
            let l_hat = 0.5 * power_iteration_max(&gram)? + spec.lambda;
            let eta = 1.0 / l_hat;
            let mut w = ParamVector::zeros(spec.kind, fed.width());
            let mut converged = false;
            const MAX_ITERS: usize = 10_000_000;
            for _ in 0..MAX_ITERS {
                let g = global_gradient(fed, spec, &w)?;
                if g.norm() < 1e-10 {
                    converged = true;
                    break;
                }
                let values: Vec<f64> = w
                    .values()
                    .iter()
                    .zip(g.values())
                    .map(|(wv, gv)| wv - eta * gv)
                    .collect();
                w = ParamVector::new(spec.kind, values)?;
            }
            if !converged {
                return Err(Error::Numeric(format!(
                    "centralized softmax GD did not reach gradient norm 1e-10 \
                     within {MAX_ITERS} iterations (is lambda 0?)"
                )));
            }
            w
        }
    };
    let grad_norm = global_gradient(fed, spec, &w_star)?.norm();
    if grad_norm >= 1e-9 {
        return Err(Error::Numeric(format!(
            "optimal parameter check failed: ||grad F(w*)|| = {grad_norm:.3e} >= 1e-9"
        )));
    }
    let f_star = global_loss(fed, spec, &w_star)?;
    Ok((w_star, f_star))
}

/// Squared distances to the optimum and their running average:
/// `delta[t] = ||w^(t) - w*||^2` and `delta_bar[t] = mean(delta[0..=t])`
/// (`delta_bar[t]` is the running average the bound controls at round `t + 1`).
pub fn delta_metrics(trajectory: &[ParamVector], w_star: &ParamVector) -> (Vec<f64>, Vec<f64>) {
    let delta: Vec<f64> = trajectory.iter().map(|w| w.distance_sq(w_star)).collect();
    let mut delta_bar = Vec::with_capacity(delta.len());
    let mut running = 0.0;
    for (t, &d) in delta.iter().enumerate() {
        running += d;
        delta_bar.push(running / (t + 1) as f64);
    }
    (delta, delta_bar)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{
        gen_linear, gen_quadratic, partition_noniid_intervals, partition_uniform,
        FederatedDataset, PartitionKind,
    };
    use crate::rng::{seeded, uniform01};

    fn quadratic_fed(seed: u64, n_devices: usize) -> FederatedDataset {
        let mut rng = seeded(seed);
        partition_noniid_intervals((0.0, 2.0), n_devices, 200, 0.1, &mut rng).unwrap()
    }

    /// Closed-form eigenvalues of a symmetric 2x2 matrix.
    fn eig2(m: &SquareMat) -> (f64, f64) {
        assert_eq!(m.dim, 2);
        let (a, b, c) = (m.get(0, 0), m.get(0, 1), m.get(1, 1));
        let mean = 0.5 * (a + c);
        let disc = (0.25 * (a - c) * (a - c) + b * b).sqrt();
        (mean + disc, mean - disc)
    }

    #[test]
    fn curvature_matches_2x2_closed_form() {
        let fed = quadratic_fed(1, 4);
        let spec = LossSpec::linear();
        let constants = curvature_quadratic(&fed, &spec).unwrap();
        let h = global_hessian(&fed, 0.0);
        let (hi, lo) = eig2(&h);
        assert!((constants.l - hi).abs() <= 1e-10 * hi);
        assert!((constants.mu - lo).abs() <= 1e-10 * hi);
        assert!(constants.mu <= constants.l);
    }

    #[test]
    fn ridge_shifts_both_eigenvalues_exactly() {
        let fed = quadratic_fed(2, 3);
        let base = curvature_quadratic(&fed, &LossSpec::linear()).unwrap();
        let c = 0.75;
        let shifted =
            curvature_quadratic(&fed, &LossSpec::new(ModelKind::LinearMse, c).unwrap()).unwrap();
        assert!((shifted.l - (base.l + c)).abs() <= 1e-9 * (base.l + c));
        assert!((shifted.mu - (base.mu + c)).abs() <= 1e-9 * (base.l + c));
    }

    #[test]
    fn identical_devices_match_single_device_constant() {
        let mut rng = seeded(3);
        let ds = gen_quadratic(150, 0.2, (0.0, 1.0), &mut rng).unwrap();
        let fed = FederatedDataset::from_parts(
            vec![ds.clone(), ds.clone(), ds],
            PartitionKind::Uniform,
        )
        .unwrap();
        let constants = curvature_quadratic(&fed, &LossSpec::linear()).unwrap();
        assert!((constants.l - constants.per_device_l[0]).abs() <= 1e-12 * constants.l);
    }

    #[test]
    fn curvature_requires_quadratic_model() {
        let fed = quadratic_fed(30, 2);
        let spec = LossSpec::new(ModelKind::SoftmaxXent { classes: 2 }, 0.1).unwrap();
        assert!(curvature_quadratic(&fed, &spec).is_err());
    }

    #[test]
    fn inequalities_hold_on_quadratics() {
        let fed = quadratic_fed(4, 3);
        let spec = LossSpec::linear();
        let constants = curvature_quadratic(&fed, &spec).unwrap();
        let (w_star, f_star) = optimal_params(&fed, &spec).unwrap();
        let mut rng = seeded(40);
        let pairs = sample_param_pairs(spec.kind, fed.width(), 1000, 2.0, &mut rng);
        let report =
            check_inequalities(&fed, &spec, &constants, (&w_star, f_star), &pairs).unwrap();
        assert_eq!(report.total_violations(), 0, "{report:?}");
        report.assert_clean().unwrap();
    }

    #[test]
    fn degenerate_pair_has_zero_slack() {
        let fed = quadratic_fed(5, 2);
        let spec = LossSpec::linear();
        let constants = curvature_quadratic(&fed, &spec).unwrap();
        let (w_star, f_star) = optimal_params(&fed, &spec).unwrap();
        let w = ParamVector::new(ModelKind::LinearMse, vec![0.3, -0.4]).unwrap();
        let pairs = vec![(w.clone(), w)];
        let report =
            check_inequalities(&fed, &spec, &constants, (&w_star, f_star), &pairs).unwrap();
        assert_eq!(report.total_violations(), 0);
        for check in &report.checks {
            assert!(check.worst_slack <= SLACK_TOL, "{check:?}");
        }
    }

    #[test]
    fn halved_l_is_caught_with_witness() {
        let fed = quadratic_fed(6, 3);
        let spec = LossSpec::linear();
        let exact = curvature_quadratic(&fed, &spec).unwrap();
        let halved = CurvatureConstants::new(
            exact.l / 2.0,
            exact.mu.min(exact.l / 2.0),
            exact.per_device_l.clone(),
        )
        .unwrap();
        let (w_star, f_star) = optimal_params(&fed, &spec).unwrap();
        let mut rng = seeded(60);
        let pairs = sample_param_pairs(spec.kind, fed.width(), 200, 2.0, &mut rng);
        let report =
            check_inequalities(&fed, &spec, &halved, (&w_star, f_star), &pairs).unwrap();
        let lipschitz = report
            .checks
            .iter()
            .find(|c| c.name == "gradient-lipschitz")
            .unwrap();
        assert!(lipschitz.violations > 0);
        assert!(lipschitz.witness.is_some());
        assert!(report.assert_clean().is_err());
    }

    #[test]
    fn subset_smoothness_empty_and_full_subsets() {
        let fed = quadratic_fed(7, 4);
        let spec = LossSpec::linear();
        let constants = curvature_quadratic(&fed, &spec).unwrap();
        let l_common = constants.max_device_l();
        let mut rng = seeded(70);
        let pairs = sample_param_pairs(spec.kind, fed.width(), 100, 1.5, &mut rng);
        // Empty subset: F_G is identically zero.
        let empty = check_subset_smoothness(&fed, &spec, &[], l_common, &pairs).unwrap();
        assert_eq!(empty.total_violations(), 0);
        // Full subset: reduces to the gradient-Lipschitz bound for F.
        let full = check_subset_smoothness(&fed, &spec, &[0, 1, 2, 3], l_common, &pairs).unwrap();
        assert_eq!(full.total_violations(), 0);
    }

    #[test]
    fn subset_smoothness_random_half_subsets() {
        let fed = quadratic_fed(8, 6);
        let spec = LossSpec::linear();
        let constants = curvature_quadratic(&fed, &spec).unwrap();
        let l_common = constants.max_device_l();
        let mut rng = seeded(80);
        let pairs = sample_param_pairs(spec.kind, fed.width(), 1000, 2.0, &mut rng);
        for subset in [&[0usize, 2, 4][..], &[1, 3, 5], &[0, 1, 5]] {
            let report = check_subset_smoothness(&fed, &spec, subset, l_common, &pairs).unwrap();
            assert_eq!(report.total_violations(), 0, "{report:?}");
        }
        assert!(check_subset_smoothness(&fed, &spec, &[9], l_common, &pairs).is_err());
    }

    fn scalar_params(values: &[f64]) -> Vec<ParamVector> {
        values
            .iter()
            .map(|&v| ParamVector::new(ModelKind::LinearMse, vec![v]).unwrap())
            .collect()
    }

    #[test]
    fn pmf_no_erasures_is_a_single_atom() {
        let params = scalar_params(&[1.0, 2.0, 4.0]);
        let channels = ErasureChannelSet::shared(0.0, 3).unwrap();
        let pmf = memoryless_pmf(&params, &channels).unwrap();
        assert_eq!(pmf.atoms.len(), 8);
        assert!((pmf.total_mass() - 1.0).abs() <= 1e-12);
        let full = pmf.atom_for_pattern(0b111);
        assert_eq!(full.probability, 1.0);
        match &full.value {
            AtomValue::Point(v) => assert!((v[0] - 7.0 / 3.0).abs() <= 1e-15),
            other => panic!("unexpected {other:?}"),
        }
        for atom in &pmf.atoms {
            if atom.pattern != 0b111 {
                assert_eq!(atom.probability, 0.0);
            }
        }
    }

    #[test]
    fn pmf_single_device_reads_off_the_erasure_probability() {
        let params = scalar_params(&[5.0]);
        let channels = ErasureChannelSet::shared(0.3, 1).unwrap();
        let pmf = memoryless_pmf(&params, &channels).unwrap();
        assert_eq!(pmf.atoms.len(), 2);
        assert_eq!(pmf.atoms[0].value, AtomValue::PreviousGlobal);
        assert!((pmf.atoms[0].probability - 0.3).abs() <= 1e-15);
        assert!((pmf.atoms[1].probability - 0.7).abs() <= 1e-15);
        assert_eq!(pmf.atoms[1].value, AtomValue::Point(vec![5.0]));
    }

    #[test]
    fn pmf_matches_product_oracle_and_monte_carlo() {
        let params = scalar_params(&[0.5, 1.5, 2.25]);
        let eps = 0.3;
        let channels = ErasureChannelSet::shared(eps, 3).unwrap();
        let pmf = memoryless_pmf(&params, &channels).unwrap();

        // Independent product-formula oracle.
        for atom in &pmf.atoms {
            let s = atom.pattern.count_ones();
            let expected = (1.0 - eps).powi(s as i32) * eps.powi(3 - s as i32);
            assert!((atom.probability - expected).abs() <= 1e-15);
        }

        // Monte Carlo frequencies within 4 standard errors per atom.
        let mut rng = seeded(90);
        let trials = 200_000usize;
        let mut counts = [0usize; 8];
        for _ in 0..trials {
            let p = crate::channel::sample_pattern(&channels, &mut rng);
            let mask = p.received_set().fold(0u32, |acc, i| acc | (1 << i));
            counts[mask as usize] += 1;
        }
        for atom in &pmf.atoms {
            let freq = counts[atom.pattern as usize] as f64 / trials as f64;
            let se = (atom.probability * (1.0 - atom.probability) / trials as f64).sqrt();
            assert!(
                (freq - atom.probability).abs() <= 4.0 * se,
                "pattern {:03b}: freq {freq} vs p {}",
                atom.pattern,
                atom.probability
            );
        }
    }

    #[test]
    fn pmf_probabilities_are_exchangeable_for_shared_epsilon() {
        let params = scalar_params(&[0.0, 1.0, 2.0, 3.0]);
        let channels = ErasureChannelSet::shared(0.42, 4).unwrap();
        let pmf = memoryless_pmf(&params, &channels).unwrap();
        for a in &pmf.atoms {
            for b in &pmf.atoms {
                if a.received_count() == b.received_count() {
                    assert!((a.probability - b.probability).abs() <= 1e-15);
                }
            }
        }
    }

    #[test]
    fn pmf_guards_enumeration_size() {
        let params = scalar_params(&[0.0; 25]);
        let channels = ErasureChannelSet::shared(0.1, 25).unwrap();
        assert!(matches!(
            memoryless_pmf(&params, &channels),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn bound_reduces_cleanly_at_zero_epsilon() {
        let constants = CurvatureConstants::new(2.0, 1.0, vec![2.0]).unwrap();
        let bound = running_average_bound(&constants, 0.0, 3.0, 10).unwrap();
        // beta^2 = mu^2/(2L), so the bound is f0 * 2L / (t mu^2).
        let expected = 3.0 * 2.0 * 2.0 / (10.0 * 1.0);
        assert!((bound - expected).abs() <= 1e-15 * expected);
    }

    #[test]
    fn bound_boundary_epsilon_is_not_applicable() {
        let constants = CurvatureConstants::new(2.0, 1.0, vec![2.0]).unwrap();
        // epsilon = mu/(2L) makes beta^2 exactly zero.
        let err = running_average_bound(&constants, 0.25, 3.0, 10).unwrap_err();
        match err {
            Error::NotApplicable { condition } => {
                assert!(condition.contains("beta^2"), "{condition}")
            }
            other => panic!("unexpected {other:?}"),
        }
        let err = running_average_bound(&constants, 0.3, 3.0, 10).unwrap_err();
        match err {
            Error::NotApplicable { condition } => {
                assert!(condition.contains("mu/(2L)"), "{condition}")
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bound_hand_arithmetic() {
        // L = 2, mu = 1, eps = 0.1, f0_gap = 8, t = 100:
        // beta^2 = 0.25 - 0.04 = 0.21, bound = 8/21.
        let constants = CurvatureConstants::new(2.0, 1.0, vec![2.0]).unwrap();
        let bound = running_average_bound(&constants, 0.1, 8.0, 100).unwrap();
        let expected = 8.0 / 21.0;
        assert!((bound - expected).abs() <= 1e-15 * expected, "{bound}");
    }

    #[test]
    fn optimum_recovers_noiseless_coefficients() {
        let mut rng = seeded(10);
        let parts = vec![
            gen_linear(100, 2.0, 1.0, 0.0, (-1.0, 1.0), &mut rng).unwrap(),
            gen_linear(100, 2.0, 1.0, 0.0, (0.0, 2.0), &mut rng).unwrap(),
        ];
        let fed = FederatedDataset::from_parts(parts, PartitionKind::NonIidInterval).unwrap();
        let (w_star, f_star) = optimal_params(&fed, &LossSpec::linear()).unwrap();
        assert!((w_star.values()[0] - 2.0).abs() <= 1e-12);
        assert!((w_star.values()[1] - 1.0).abs() <= 1e-12);
        assert!(f_star.abs() <= 1e-20);
    }

    #[test]
    fn optimum_agrees_with_per_device_fits_on_uniform_split() {
        // Uniform split: every device estimates the same pooled line.
        let mut rng = seeded(11);
        let pool = gen_linear(300, 1.5, -0.5, 0.4, (-1.0, 1.0), &mut rng).unwrap();
        let fed = partition_uniform(&pool, 3, &mut rng).unwrap();
        let (w_star, _) = optimal_params(&fed, &LossSpec::linear()).unwrap();
        for part in fed.parts() {
            // Per-device closed-form OLS oracle with standard errors.
            let n = part.n_samples() as f64;
            let xs: Vec<f64> = (0..part.n_samples()).map(|i| part.row(i)[0]).collect();
            let ys = part.targets();
            let mx = xs.iter().sum::<f64>() / n;
            let my = ys.iter().sum::<f64>() / n;
            let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
            let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
            let slope = sxy / sxx;
            let intercept = my - slope * mx;
            let rss: f64 = xs
                .iter()
                .zip(ys)
                .map(|(x, y)| (y - slope * x - intercept).powi(2))
                .sum();
            let sigma2 = rss / (n - 2.0);
            let se_slope = (sigma2 / sxx).sqrt();
            let se_intercept = (sigma2 * (1.0 / n + mx * mx / sxx)).sqrt();
            assert!((w_star.values()[0] - slope).abs() <= 5.0 * se_slope);
            assert!((w_star.values()[1] - intercept).abs() <= 5.0 * se_intercept);
        }
    }

    #[test]
    fn heavy_ridge_shrinks_optimum_to_zero() {
        let fed = quadratic_fed(12, 2);
        let spec = LossSpec::new(ModelKind::LinearMse, 1e6).unwrap();
        let (w_star, _) = optimal_params(&fed, &spec).unwrap();
        assert!(w_star.norm() < 1e-3, "norm {}", w_star.norm());
    }

    #[test]
    fn singular_normal_equations_advise_ridge() {
        // A constant feature column duplicates the bias: rank deficient.
        let rows: Vec<Vec<f64>> = (0..10).map(|_| vec![2.0]).collect();
        let ys: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let ds = crate::data::LocalDataset::new_regression(rows, ys).unwrap();
        let fed = FederatedDataset::from_parts(vec![ds], PartitionKind::Uniform).unwrap();
        match optimal_params(&fed, &LossSpec::linear()) {
            Err(Error::RankDeficient) => {}
            other => panic!("expected rank deficiency, got {other:?}"),
        }
    }

    #[test]
    fn softmax_optimum_has_tiny_gradient() {
        let mut rng = seeded(13);
        let fed = crate::data::gen_classification_blobs(3, 60, 2, 2.5, 0.8, &mut rng).unwrap();
        let kind = ModelKind::SoftmaxXent { classes: 3 };
        let spec = LossSpec::new(kind, 1e-2).unwrap();
        let (w_star, f_star) = optimal_params(&fed, &spec).unwrap();
        assert!(global_gradient(&fed, &spec, &w_star).unwrap().norm() < 1e-9);
        assert!(f_star > 0.0);
    }

    #[test]
    fn indistinct_blobs_train_to_chance_accuracy() {
        // separation = 0: all classes share one distribution, so a trained
        // classifier cannot beat chance on held-out data.
        let mut rng = seeded(20);
        let fed = crate::data::gen_classification_blobs(4, 80, 2, 0.0, 0.5, &mut rng).unwrap();
        let holdout =
            crate::data::gen_classification_pool(4, 100, 2, 0.0, 0.5, &mut rng).unwrap();
        let spec = LossSpec::new(ModelKind::SoftmaxXent { classes: 4 }, 1e-2).unwrap();
        let (w_star, _) = optimal_params(&fed, &spec).unwrap();
        let acc = crate::model::accuracy_on(&holdout, &w_star).unwrap();
        assert!((acc - 0.25).abs() <= 0.08, "accuracy {acc} not near chance");
    }

    #[test]
    fn well_separated_blobs_train_to_high_accuracy() {
        // separation = 10 noise sigmas: centralized training is near-perfect.
        let mut rng = seeded(21);
        let fed = crate::data::gen_classification_blobs(4, 80, 2, 5.0, 0.5, &mut rng).unwrap();
        let holdout =
            crate::data::gen_classification_pool(4, 100, 2, 5.0, 0.5, &mut rng).unwrap();
        let spec = LossSpec::new(ModelKind::SoftmaxXent { classes: 4 }, 1e-3).unwrap();
        let (w_star, _) = optimal_params(&fed, &spec).unwrap();
        let acc = crate::model::accuracy_on(&holdout, &w_star).unwrap();
        assert!(acc > 0.99, "accuracy {acc}");
    }

    #[test]
    fn delta_metrics_constant_trajectory_is_zero() {
        let w = ParamVector::new(ModelKind::LinearMse, vec![1.0, 2.0]).unwrap();
        let (delta, delta_bar) = delta_metrics(&[w.clone(), w.clone(), w.clone()], &w);
        assert!(delta.iter().all(|&d| d == 0.0));
        assert!(delta_bar.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn delta_metrics_two_step_example() {
        let w_star = ParamVector::new(ModelKind::LinearMse, vec![0.0, 0.0]).unwrap();
        let off = ParamVector::new(ModelKind::LinearMse, vec![2.0, 0.0]).unwrap();
        let (delta, delta_bar) = delta_metrics(&[w_star.clone(), off], &w_star);
        assert_eq!(delta, vec![0.0, 4.0]);
        assert_eq!(delta_bar, vec![0.0, 2.0]);
    }

    #[test]
    fn delta_bar_matches_naive_resummation() {
        let mut rng = seeded(14);
        let w_star = ParamVector::new(ModelKind::LinearMse, vec![0.5, -0.5]).unwrap();
        let trajectory: Vec<ParamVector> = (0..10)
            .map(|_| {
                ParamVector::new(
                    ModelKind::LinearMse,
                    vec![uniform01(&mut rng), uniform01(&mut rng)],
                )
                .unwrap()
            })
            .collect();
        let (delta, delta_bar) = delta_metrics(&trajectory, &w_star);
        for t in 0..delta.len() {
            let naive: f64 = delta[..=t].iter().sum::<f64>() / (t + 1) as f64;
            assert!((delta_bar[t] - naive).abs() <= 1e-15 * naive.max(1.0));
        }
    }
}
