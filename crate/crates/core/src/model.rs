//! Convex local models and the device-side gradient descent update.
//!
//! Two model families: linear regression under half-mean-squared-error loss
//! and softmax regression under mean cross-entropy, both with an optional
//! ridge term. Losses are normalized per device,
//! `F_i(w) = (1/(2 D_i)) sum_j (y_j - x_j w)^2 + (lambda/2) ||w||^2`
//! for the linear case, which makes the Hessian `X'X / D_i + lambda I` and
//! keeps the curvature constants clean eigenvalues. The mean squared error
//! reported by the simulator is `2 F(w)` at `lambda = 0`.

use serde::{Deserialize, Serialize};

use crate::data::{LocalDataset, TaskKind};
use crate::{Error, Result};

/// Which loss family a parameter vector belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    /// Linear regression with half-MSE loss.
    LinearMse,
    /// Softmax (multinomial logistic) regression with cross-entropy loss.
    SoftmaxXent { classes: usize },
}

impl ModelKind {
    /// Flattened parameter length for feature width `width` (bias included).
    pub fn param_len(&self, width: usize) -> usize {
        match self {
            ModelKind::LinearMse => width,
            ModelKind::SoftmaxXent { classes } => width * classes,
        }
    }

    fn check_task(&self, task: TaskKind) -> Result<()> {
        match (self, task) {
            (ModelKind::LinearMse, TaskKind::Regression) => Ok(()),
            (ModelKind::SoftmaxXent { classes }, TaskKind::Classification { classes: have })
                if *classes == have =>
            {
                Ok(())
            }
            _ => Err(Error::InvalidParameter(format!(
                "model kind {self:?} does not match dataset task {task:?}"
            ))),
        }
    }
}

/// Loss specification shared by every device: model family plus ridge
/// coefficient `lambda >= 0` (default 0; the softmax bound checks need
/// `lambda > 0` for a strictly positive curvature floor).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: ModelKind,
    pub lambda: f64,
}

impl LossSpec {
    pub fn new(kind: ModelKind, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "lambda must be >= 0 (got {lambda})"
            )));
        }
        Ok(LossSpec { kind, lambda })
    }

    pub fn linear() -> Self {
        LossSpec {
            kind: ModelKind::LinearMse,
            lambda: 0.0,
        }
    }
}

/// A model parameter vector: the weight vector for regression, or the
/// flattened `width x classes` matrix (feature-major) for softmax.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub kind: ModelKind,
    values: Vec<f64>,
}

impl ParamVector {
    pub fn new(kind: ModelKind, values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(
                "parameter vector must be finite".into(),
            ));
        }
        Ok(ParamVector { kind, values })
    }

    pub fn zeros(kind: ModelKind, width: usize) -> Self {
        ParamVector {
            kind,
            values: vec![0.0; kind.param_len(width)],
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Squared Euclidean distance to another vector of the same shape.
    pub fn distance_sq(&self, other: &ParamVector) -> f64 {
        debug_assert_eq!(self.kind, other.kind);
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn check_dataset(&self, ds: &LocalDataset, spec: &LossSpec) -> Result<()> {
        if self.kind != spec.kind {
            return Err(Error::InvalidParameter(format!(
                "parameter kind {:?} does not match loss spec {:?}",
                self.kind, spec.kind
            )));
        }
        spec.kind.check_task(ds.task())?;
        let expected = self.kind.param_len(ds.width());
        if self.values.len() != expected {
            return Err(Error::DimensionMismatch {
                context: "parameter vector vs dataset width",
                expected,
                got: self.values.len(),
            });
        }
        Ok(())
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Class scores `x W` for one sample (softmax layout `w[f * C + c]`).
#[inline]
fn logits(row: &[f64], w: &[f64], classes: usize) -> Vec<f64> {
    let mut out = vec![0.0; classes];
    for (f, &x) in row.iter().enumerate() {
        let base = f * classes;
        for (c, o) in out.iter_mut().enumerate() {
            *o += x * w[base + c];
        }
    }
    out
}

/// Softmax probabilities, shifted by the max logit for stability.
fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().fold(f64::NEG_INFINITY, |m, &s| m.max(s));
    let exps: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Device-local loss `F_i(w)`.
pub fn local_loss(w: &ParamVector, ds: &LocalDataset, spec: &LossSpec) -> Result<f64> {
    w.check_dataset(ds, spec)?;
    let d_i = ds.n_samples() as f64;
    let data_term = match spec.kind {
        ModelKind::LinearMse => {
            let mut acc = 0.0;
            for j in 0..ds.n_samples() {
                let r = ds.targets()[j] - dot(ds.row(j), w.values());
                acc += r * r;
            }
            acc / (2.0 * d_i)
        }
        ModelKind::SoftmaxXent { classes } => {
            let mut acc = 0.0;
            for j in 0..ds.n_samples() {
                let p = softmax(&logits(ds.row(j), w.values(), classes));
                acc -= p[ds.class_target(j)].max(f64::MIN_POSITIVE).ln();
            }
            acc / d_i
        }
    };
    let ridge = 0.5 * spec.lambda * w.values().iter().map(|v| v * v).sum::<f64>();
    Ok(data_term + ridge)
}

/// Exact analytic gradient of [`local_loss`]. For the linear model this is
/// `(1/D_i) X'(Xw - y) + lambda w`.
pub fn local_gradient(w: &ParamVector, ds: &LocalDataset, spec: &LossSpec) -> Result<ParamVector> {
    ParamVector::new(w.kind, gradient_values(w, ds, spec)?)
}

/// Raw gradient components, without the finiteness check — the GD loop wants
/// to see overflow as divergence rather than an invalid-parameter error.
fn gradient_values(w: &ParamVector, ds: &LocalDataset, spec: &LossSpec) -> Result<Vec<f64>> {
    w.check_dataset(ds, spec)?;
    let d_i = ds.n_samples() as f64;
    let mut grad = vec![0.0; w.len()];
    match spec.kind {
        ModelKind::LinearMse => {
            for j in 0..ds.n_samples() {
                let row = ds.row(j);
                let r = dot(row, w.values()) - ds.targets()[j];
                for (g, &x) in grad.iter_mut().zip(row) {
                    *g += r * x;
                }
            }
        }
        ModelKind::SoftmaxXent { classes } => {
            for j in 0..ds.n_samples() {
                let row = ds.row(j);
                let mut p = softmax(&logits(row, w.values(), classes));
                p[ds.class_target(j)] -= 1.0;
                for (f, &x) in row.iter().enumerate() {
                    let base = f * classes;
                    for (c, &pc) in p.iter().enumerate() {
                        grad[base + c] += x * pc;
                    }
                }
            }
        }
    }
    for (g, &wv) in grad.iter_mut().zip(w.values()) {
        *g = *g / d_i + spec.lambda * wv;
    }
    Ok(grad)
}

/// The device update: `tau` full-batch gradient descent steps
/// `w <- w - eta * grad F_i(w)` starting from the broadcast global parameter.
/// `tau = 0` returns the input unchanged; there is no early stopping, exactly
/// `tau` steps are performed.
pub fn local_update(
    w_global: &ParamVector,
    ds: &LocalDataset,
    spec: &LossSpec,
    eta: f64,
    tau: usize,
) -> Result<ParamVector> {
    if !(eta > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "learning rate must be > 0 (got {eta})"
        )));
    }
    w_global.check_dataset(ds, spec)?;
    let mut w = w_global.clone();
    for iteration in 1..=tau {
        let grad = gradient_values(&w, ds, spec)?;
        for (wv, gv) in w.values.iter_mut().zip(&grad) {
            *wv -= eta * gv;
        }
        if w.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { iteration });
        }
    }
    Ok(w)
}

/// Mean squared residual (plain MSE, no 1/2) of a regression dataset.
pub fn mse_on(ds: &LocalDataset, w: &ParamVector) -> Result<f64> {
    let spec = LossSpec {
        kind: ModelKind::LinearMse,
        lambda: 0.0,
    };
    w.check_dataset(ds, &spec)?;
    let mut acc = 0.0;
    for j in 0..ds.n_samples() {
        let r = ds.targets()[j] - dot(ds.row(j), w.values());
        acc += r * r;
    }
    Ok(acc / ds.n_samples() as f64)
}

/// Classification accuracy under argmax prediction (ties break toward the
/// lowest class index).
pub fn accuracy_on(ds: &LocalDataset, w: &ParamVector) -> Result<f64> {
    let classes = match w.kind {
        ModelKind::SoftmaxXent { classes } => classes,
        _ => {
            return Err(Error::InvalidParameter(
                "accuracy requires a softmax parameter vector".into(),
            ))
        }
    };
    let spec = LossSpec {
        kind: w.kind,
        lambda: 0.0,
    };
    w.check_dataset(ds, &spec)?;
    let mut correct = 0usize;
    for j in 0..ds.n_samples() {
        let scores = logits(ds.row(j), w.values(), classes);
        let mut best = 0;
        for (c, &s) in scores.iter().enumerate() {
            if s > scores[best] {
                best = c;
            }
        }
        if best == ds.class_target(j) {
            correct += 1;
        }
    }
    Ok(correct as f64 / ds.n_samples() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_classification_blobs, gen_linear, gen_quadratic};
    use crate::rng::{seeded, standard_normal, uniform01, SimRng};

    fn random_params(kind: ModelKind, width: usize, rng: &mut SimRng) -> ParamVector {
        let values = (0..kind.param_len(width))
            .map(|_| standard_normal(rng))
            .collect();
        ParamVector::new(kind, values).unwrap()
    }

    /// Test-local normal-equations oracle for a single-feature-plus-bias
    /// regression device: solves the 2x2 system (X'X/D) w = X'y/D directly.
    fn device_ols(ds: &LocalDataset) -> ParamVector {
        assert_eq!(ds.width(), 2);
        let d = ds.n_samples() as f64;
        let (mut sxx, mut sx, mut sxy, mut sy) = (0.0, 0.0, 0.0, 0.0);
        for j in 0..ds.n_samples() {
            let x = ds.row(j)[0];
            let y = ds.targets()[j];
            sxx += x * x;
            sx += x;
            sxy += x * y;
            sy += y;
        }
        let (a, b, c) = (sxx / d, sx / d, 1.0);
        let (r0, r1) = (sxy / d, sy / d);
        let det = a * c - b * b;
        let w0 = (c * r0 - b * r1) / det;
        let w1 = (a * r1 - b * r0) / det;
        ParamVector::new(ModelKind::LinearMse, vec![w0, w1]).unwrap()
    }

    /// Largest eigenvalue of the 2x2 per-device Gram matrix X'X/D.
    fn gram_lambda_max(ds: &LocalDataset) -> f64 {
        let d = ds.n_samples() as f64;
        let (mut sxx, mut sx) = (0.0, 0.0);
        for j in 0..ds.n_samples() {
            let x = ds.row(j)[0];
            sxx += x * x;
            sx += x;
        }
        let (a, b, c) = (sxx / d, sx / d, 1.0);
        let mean = 0.5 * (a + c);
        mean + (0.25 * (a - c) * (a - c) + b * b).sqrt()
    }

    #[test]
    fn noiseless_line_has_zero_loss_at_truth() {
        let mut rng = seeded(1);
        let ds = gen_linear(100, 2.0, 1.0, 0.0, (-1.0, 1.0), &mut rng).unwrap();
        let w = ParamVector::new(ModelKind::LinearMse, vec![2.0, 1.0]).unwrap();
        let spec = LossSpec::linear();
        let loss = local_loss(&w, &ds, &spec).unwrap();
        assert!(loss < 1e-28, "loss {loss}");
    }

    #[test]
    fn zero_params_loss_is_half_mean_y_squared() {
        let mut rng = seeded(2);
        let ds = gen_linear(257, 1.5, -0.5, 1.0, (-2.0, 2.0), &mut rng).unwrap();
        let w = ParamVector::zeros(ModelKind::LinearMse, 2);
        let loss = local_loss(&w, &ds, &LossSpec::linear()).unwrap();
        let expected = ds.targets().iter().map(|y| y * y).sum::<f64>()
            / (2.0 * ds.n_samples() as f64);
        assert!((loss - expected).abs() <= 1e-12 * expected.abs().max(1.0));
    }

    #[test]
    fn loss_matches_naive_summation_oracle() {
        let mut rng = seeded(3);
        let ds = gen_quadratic(311, 0.4, (0.0, 2.0), &mut rng).unwrap();
        let spec = LossSpec::new(ModelKind::LinearMse, 0.05).unwrap();
        for _ in 0..10 {
            let w = random_params(ModelKind::LinearMse, 2, &mut rng);
            // Independent straightforward reimplementation.
            let mut acc = 0.0;
            for j in 0..ds.n_samples() {
                let pred = ds.row(j)[0] * w.values()[0] + ds.row(j)[1] * w.values()[1];
                let r = ds.targets()[j] - pred;
                acc += r * r;
            }
            let naive = acc / (2.0 * ds.n_samples() as f64)
                + 0.5 * 0.05 * (w.values()[0].powi(2) + w.values()[1].powi(2));
            let got = local_loss(&w, &ds, &spec).unwrap();
            assert!(
                (got - naive).abs() <= 1e-12 * naive.abs().max(1.0),
                "got {got}, naive {naive}"
            );
        }
    }

    #[test]
    fn gradient_vanishes_at_device_ols() {
        let mut rng = seeded(4);
        let ds = gen_linear(500, -1.0, 2.0, 0.3, (0.0, 1.0), &mut rng).unwrap();
        let w_star = device_ols(&ds);
        let g = local_gradient(&w_star, &ds, &LossSpec::linear()).unwrap();
        assert!(g.norm() < 1e-9, "grad norm {}", g.norm());
    }

    fn finite_difference_check(ds: &LocalDataset, spec: &LossSpec, kind: ModelKind, seed: u64) {
        let mut rng = seeded(seed);
        let width = ds.width();
        for _ in 0..10 {
            let w = random_params(kind, width, &mut rng);
            let grad = local_gradient(&w, ds, spec).unwrap();
            let step = 1e-6;
            for i in 0..w.len() {
                let mut plus = w.values().to_vec();
                let mut minus = plus.clone();
                plus[i] += step;
                minus[i] -= step;
                let fp = local_loss(&ParamVector::new(kind, plus).unwrap(), ds, spec).unwrap();
                let fm = local_loss(&ParamVector::new(kind, minus).unwrap(), ds, spec).unwrap();
                let fd = (fp - fm) / (2.0 * step);
                assert!(
                    (fd - grad.values()[i]).abs() < 1e-5,
                    "component {i}: fd {fd} vs analytic {}",
                    grad.values()[i]
                );
            }
        }
    }

    #[test]
    fn gradient_matches_central_differences_linear() {
        let mut rng = seeded(5);
        let ds = gen_quadratic(64, 0.2, (-1.0, 1.5), &mut rng).unwrap();
        finite_difference_check(&ds, &LossSpec::linear(), ModelKind::LinearMse, 50);
    }

    #[test]
    fn gradient_matches_central_differences_softmax() {
        let mut rng = seeded(6);
        let fed = gen_classification_blobs(3, 20, 2, 2.0, 0.6, &mut rng).unwrap();
        let kind = ModelKind::SoftmaxXent { classes: 3 };
        let spec = LossSpec::new(kind, 1e-3).unwrap();
        finite_difference_check(fed.part(1), &spec, kind, 60);
    }

    #[test]
    fn doubling_targets_doubles_gradient_at_zero() {
        let mut rng = seeded(7);
        let ds = gen_linear(40, 2.0, 0.0, 0.5, (0.0, 1.0), &mut rng).unwrap();
        let doubled = LocalDataset::new_regression(
            (0..ds.n_samples()).map(|i| vec![ds.row(i)[0]]).collect(),
            ds.targets().iter().map(|y| 2.0 * y).collect(),
        )
        .unwrap();
        let w = ParamVector::zeros(ModelKind::LinearMse, 2);
        let g1 = local_gradient(&w, &ds, &LossSpec::linear()).unwrap();
        let g2 = local_gradient(&w, &doubled, &LossSpec::linear()).unwrap();
        for (a, b) in g1.values().iter().zip(g2.values()) {
            assert_eq!((2.0 * a).to_bits(), b.to_bits());
        }
    }

    #[test]
    fn update_with_zero_steps_is_identity() {
        let mut rng = seeded(8);
        let ds = gen_linear(16, 1.0, 0.0, 0.1, (0.0, 1.0), &mut rng).unwrap();
        let w = random_params(ModelKind::LinearMse, 2, &mut rng);
        let out = local_update(&w, &ds, &LossSpec::linear(), 0.1, 0).unwrap();
        assert_eq!(w, out);
    }

    #[test]
    fn update_matches_manual_steps() {
        // eta = 0.005 with ten local iterations per round.
        let mut rng = seeded(9);
        let ds = gen_linear(100, 2.0, -1.0, 0.3, (-1.0, 1.0), &mut rng).unwrap();
        let spec = LossSpec::linear();
        let start = ParamVector::zeros(ModelKind::LinearMse, 2);
        let got = local_update(&start, &ds, &spec, 0.005, 10).unwrap();
        let mut w = start;
        for _ in 0..10 {
            let g = local_gradient(&w, &ds, &spec).unwrap();
            let values: Vec<f64> = w
                .values()
                .iter()
                .zip(g.values())
                .map(|(wv, gv)| wv - 0.005 * gv)
                .collect();
            w = ParamVector::new(ModelKind::LinearMse, values).unwrap();
        }
        assert_eq!(w, got);
    }

    #[test]
    fn long_gd_run_reaches_device_ols() {
        let mut rng = seeded(10);
        let ds = gen_quadratic(200, 0.3, (0.5, 2.0), &mut rng).unwrap();
        let eta = 1.0 / gram_lambda_max(&ds);
        let start = ParamVector::zeros(ModelKind::LinearMse, 2);
        let w = local_update(&start, &ds, &LossSpec::linear(), eta, 4000).unwrap();
        let w_star = device_ols(&ds);
        assert!(
            w.distance_sq(&w_star).sqrt() < 1e-8,
            "distance {}",
            w.distance_sq(&w_star).sqrt()
        );
    }

    #[test]
    fn divergence_reports_iteration() {
        let mut rng = seeded(11);
        let ds = gen_linear(50, 5.0, 0.0, 0.0, (10.0, 20.0), &mut rng).unwrap();
        let start = ParamVector::zeros(ModelKind::LinearMse, 2);
        match local_update(&start, &ds, &LossSpec::linear(), 1e12, 10_000) {
            Err(Error::Divergence { iteration }) => assert!(iteration >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn losses_are_convex_along_segments() {
        let mut rng = seeded(12);
        let ds = gen_quadratic(80, 0.2, (0.0, 1.0), &mut rng).unwrap();
        let fed = gen_classification_blobs(3, 30, 2, 2.0, 0.7, &mut rng).unwrap();
        let softmax_kind = ModelKind::SoftmaxXent { classes: 3 };
        let cases: Vec<(&LocalDataset, LossSpec)> = vec![
            (&ds, LossSpec::linear()),
            (fed.part(0), LossSpec::new(softmax_kind, 1e-3).unwrap()),
        ];
        for (data, spec) in cases {
            for _ in 0..50 {
                let x = random_params(spec.kind, data.width(), &mut rng);
                let y = random_params(spec.kind, data.width(), &mut rng);
                let alpha = uniform01(&mut rng);
                let mid_values: Vec<f64> = x
                    .values()
                    .iter()
                    .zip(y.values())
                    .map(|(a, b)| alpha * a + (1.0 - alpha) * b)
                    .collect();
                let mid = ParamVector::new(spec.kind, mid_values).unwrap();
                let lhs = local_loss(&mid, data, &spec).unwrap();
                let rhs = alpha * local_loss(&x, data, &spec).unwrap()
                    + (1.0 - alpha) * local_loss(&y, data, &spec).unwrap();
                assert!(lhs <= rhs + 1e-9 * rhs.abs().max(1.0), "{lhs} > {rhs}");
            }
        }
    }

    #[test]
    fn gradient_is_lipschitz_with_gram_constant() {
        let mut rng = seeded(13);
        let ds = gen_quadratic(120, 0.3, (0.0, 2.0), &mut rng).unwrap();
        let lambda = 0.01;
        let spec = LossSpec::new(ModelKind::LinearMse, lambda).unwrap();
        let l_i = gram_lambda_max(&ds) + lambda;
        for _ in 0..200 {
            let x = random_params(ModelKind::LinearMse, 2, &mut rng);
            let y = random_params(ModelKind::LinearMse, 2, &mut rng);
            let gx = local_gradient(&x, &ds, &spec).unwrap();
            let gy = local_gradient(&y, &ds, &spec).unwrap();
            let grad_dist = gx.distance_sq(&gy).sqrt();
            let dist = x.distance_sq(&y).sqrt();
            assert!(grad_dist <= l_i * dist * (1.0 + 1e-12));
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let mut rng = seeded(14);
        let ds = gen_linear(10, 1.0, 0.0, 0.1, (0.0, 1.0), &mut rng).unwrap();
        let w = ParamVector::new(ModelKind::LinearMse, vec![1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(
            local_loss(&w, &ds, &LossSpec::linear()),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn accuracy_counts_argmax_hits() {
        let mut rng = seeded(15);
        let fed = gen_classification_blobs(2, 25, 2, 20.0, 0.1, &mut rng).unwrap();
        // Hand-made separator along the first axis: class 0 sits at +x,
        // class 1 at -x (layout w[f * C + c]).
        let kind = ModelKind::SoftmaxXent { classes: 2 };
        let w = ParamVector::new(kind, vec![1.0, -1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let acc0 = accuracy_on(fed.part(0), &w).unwrap();
        let acc1 = accuracy_on(fed.part(1), &w).unwrap();
        assert!(acc0 > 0.95 && acc1 > 0.95, "acc {acc0} {acc1}");
    }
}
