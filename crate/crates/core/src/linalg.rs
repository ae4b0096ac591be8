//! Small dense linear algebra used by the aggregation rules and the
//! curvature / normal-equation machinery. Parameter dimensions here are tiny
//! (a handful of features, at most a few dozen softmax weights), so
//! everything is written for determinism and clarity rather than speed.

use crate::{Error, Result};

/// Pairwise (cascade) summation. Deterministic for a fixed input order and
/// far better conditioned than a left fold.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        n => {
            let mid = n / 2;
            pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
        }
    }
}

/// Pairwise-summed convex combination of vectors: `sum_i weights[i] * vs[i]`.
///
/// All vectors must share a length. The recursion splits on the entry index,
/// so the float operation tree depends only on the number of entries and
/// their order — the aggregation rules rely on that for bit-reproducibility.
pub fn pairwise_weighted_combination(entries: &[(f64, &[f64])]) -> Vec<f64> {
    fn rec(entries: &[(f64, &[f64])]) -> Vec<f64> {
        match entries.len() {
            0 => Vec::new(),
            1 => {
                let (w, v) = entries[0];
                v.iter().map(|x| w * x).collect()
            }
            n => {
                let mid = n / 2;
                let mut left = rec(&entries[..mid]);
                let right = rec(&entries[mid..]);
                for (l, r) in left.iter_mut().zip(right.iter()) {
                    *l += r;
                }
                left
            }
        }
    }
    debug_assert!(entries.windows(2).all(|w| w[0].1.len() == w[1].1.len()));
    rec(entries)
}

/// Dense square matrix in row-major storage.
#[derive(Debug, Clone, PartialEq)]
pub struct SquareMat {
    pub dim: usize,
    pub data: Vec<f64>,
}

impl SquareMat {
    pub fn zeros(dim: usize) -> Self {
        SquareMat {
            dim,
            data: vec![0.0; dim * dim],
        }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.dim + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.dim + c] = v;
    }

    #[inline]
    pub fn add_to(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.dim + c] += v;
    }

    /// Add `v` to every diagonal entry.
    pub fn shift_diagonal(&mut self, v: f64) {
        for i in 0..self.dim {
            self.data[i * self.dim + i] += v;
        }
    }

    pub fn mat_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.dim);
        (0..self.dim)
            .map(|r| {
                let row = &self.data[r * self.dim..(r + 1) * self.dim];
                row.iter().zip(x).map(|(a, b)| a * b).sum()
            })
            .collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
    }
}

/// Solve `A x = b` by Gaussian elimination with partial pivoting.
///
/// Returns [`Error::RankDeficient`] when a pivot falls below
/// `1e-12 * max|A|`, which for the normal equations means the Gram matrix is
/// singular at `lambda = 0`.
pub fn solve(a: &SquareMat, b: &[f64]) -> Result<Vec<f64>> {
    let n = a.dim;
    assert_eq!(b.len(), n);
    let mut m = a.clone();
    let mut rhs = b.to_vec();
    let tol = 1e-12 * m.max_abs().max(f64::MIN_POSITIVE);

    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&i, &j| {
                m.get(i, col)
                    .abs()
                    .partial_cmp(&m.get(j, col).abs())
                    .expect("non-finite pivot")
            })
            .unwrap();
        if m.get(pivot_row, col).abs() <= tol {
            return Err(Error::RankDeficient);
        }
        if pivot_row != col {
            for c in 0..n {
                let tmp = m.get(col, c);
                m.set(col, c, m.get(pivot_row, c));
                m.set(pivot_row, c, tmp);
            }
            rhs.swap(col, pivot_row);
        }
        let pivot = m.get(col, col);
        for row in col + 1..n {
            let factor = m.get(row, col) / pivot;
            if factor == 0.0 {
                continue;
            }
            for c in col..n {
                let v = m.get(row, c) - factor * m.get(col, c);
                m.set(row, c, v);
            }
            rhs[row] -= factor * rhs[col];
        }
    }

    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = rhs[row];
        for (c, xv) in x.iter().enumerate().skip(row + 1) {
            acc -= m.get(row, c) * xv;
        }
        x[row] = acc / m.get(row, row);
    }
    Ok(x)
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn rayleigh(a: &SquareMat, v: &[f64]) -> f64 {
    let av = a.mat_vec(v);
    let num: f64 = v.iter().zip(&av).map(|(a, b)| a * b).sum();
    let den: f64 = v.iter().map(|x| x * x).sum();
    num / den
}

/// Fixed deterministic start vector: no randomness in the eigen-iterations.
fn start_vector(dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|i| 1.0 / (i + 1) as f64).collect();
    let n = norm(&v);
    v.into_iter().map(|x| x / n).collect()
}

const EIGEN_REL_TOL: f64 = 1e-10;
const EIGEN_MAX_ITERS: usize = 100_000;

/// Largest eigenvalue of a symmetric positive semidefinite matrix by power
/// iteration, converged to `1e-10` relative on the Rayleigh quotient.
pub fn power_iteration_max(a: &SquareMat) -> Result<f64> {
    if a.dim == 1 {
        return Ok(a.get(0, 0));
    }
    let mut v = start_vector(a.dim);
    let mut lambda = rayleigh(a, &v);
    for _ in 0..EIGEN_MAX_ITERS {
        let av = a.mat_vec(&v);
        let n = norm(&av);
        if n == 0.0 {
            // v is in the null space; for a PSD matrix that can only hide a
            // larger eigenvalue if v was unluckily orthogonal to it, which
            // the fixed start vector avoids for the matrices built here.
            return Ok(0.0);
        }
        v = av.into_iter().map(|x| x / n).collect();
        let next = rayleigh(a, &v);
        let scale = next.abs().max(lambda.abs()).max(f64::MIN_POSITIVE);
        let done = (next - lambda).abs() <= EIGEN_REL_TOL * scale;
        lambda = next;
        if done {
            return Ok(lambda);
        }
    }
    Err(Error::Numeric(format!(
        "power iteration did not converge within {EIGEN_MAX_ITERS} iterations"
    )))
}

/// Smallest eigenvalue of a symmetric positive semidefinite matrix by
/// inverse-shift power iteration.
///
/// Iterates `v <- (A + delta I)^-1 v` with a small positive shift `delta`
/// (which leaves eigenvectors unchanged), then reads the eigenvalue of `A`
/// off the Rayleigh quotient of the converged vector.
pub fn inverse_power_iteration_min(a: &SquareMat, lambda_max: f64) -> Result<f64> {
    if a.dim == 1 {
        return Ok(a.get(0, 0));
    }
    let delta = (1e-6 * lambda_max.abs()).max(1e-300);
    let mut shifted = a.clone();
    shifted.shift_diagonal(delta);

    let mut v = start_vector(a.dim);
    let mut lambda = rayleigh(a, &v);
    for _ in 0..EIGEN_MAX_ITERS {
        let u = solve(&shifted, &v).map_err(|_| {
            Error::Numeric("inverse iteration: shifted matrix is singular".into())
        })?;
        let n = norm(&u);
        if !n.is_finite() || n == 0.0 {
            return Err(Error::Numeric("inverse iteration produced a degenerate vector".into()));
        }
        v = u.into_iter().map(|x| x / n).collect();
        let next = rayleigh(a, &v);
        let scale = next.abs().max(lambda.abs()).max(f64::MIN_POSITIVE);
        let done = (next - lambda).abs() <= EIGEN_REL_TOL * scale;
        lambda = next;
        if done {
            return Ok(lambda.max(0.0));
        }
    }
    Err(Error::Numeric(format!(
        "inverse power iteration did not converge within {EIGEN_MAX_ITERS} iterations"
    )))
}
