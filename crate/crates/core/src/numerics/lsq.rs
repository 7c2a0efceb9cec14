//! Sum-to-one constrained least squares over a local neighborhood.

use ndarray::Array2;

use super::linalg;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Default Tikhonov factor applied as `ridge · trace(G) / K` on the Gram diagonal.
pub const DEFAULT_RIDGE: f64 = 1e-6;

fn residual<T: Scalar>(target: &[T], neighbors: &[&[T]], w: &[T]) -> T {
    (0..target.len())
        .map(|j| {
            let r = neighbors
                .iter()
                .zip(w)
                .fold(target[j], |acc, (n, &wk)| acc - wk * n[j]);
            r * r
        })
        .sum::<T>()
        .sqrt()
}

/// Weights `w` minimizing `‖target − Σ w_k·neighbor_k‖²` subject to `Σ w_k = 1`.
///
/// Solves `(G + ridge·tr(G)/K·I) w = 1` on the local Gram matrix
/// `G_jk = (target − n_j)·(target − n_k)` and normalizes. The result is then
/// compared against the best single neighbor and the uniform combination, and
/// the smallest residual wins, so the returned weights never do worse than
/// either.
pub fn constrained_lsq_weights<T: Scalar>(
    target: &[T],
    neighbors: &[&[T]],
    ridge: T,
) -> Result<Vec<T>> {
    let k = neighbors.len();
    if k == 0 {
        return Err(Error::argument(
            "constrained least squares needs at least one neighbor",
        ));
    }
    if neighbors.iter().any(|n| n.len() != target.len()) {
        return Err(Error::argument("neighbor dimension differs from target"));
    }
    if ridge < T::zero() {
        return Err(Error::argument("ridge must be nonnegative"));
    }
    if k == 1 {
        return Ok(vec![T::one()]);
    }
    let diffs: Vec<Vec<T>> = neighbors
        .iter()
        .map(|n| target.iter().zip(n.iter()).map(|(&t, &v)| t - v).collect())
        .collect();
    let mut gram = Array2::from_shape_fn((k, k), |(a, b)| {
        diffs[a]
            .iter()
            .zip(&diffs[b])
            .map(|(&x, &y)| x * y)
            .sum::<T>()
    });
    let trace: T = (0..k).map(|i| gram[[i, i]]).sum();
    let uniform = vec![T::one() / T::c(k as f64); k];
    if trace == T::zero() {
        return Ok(uniform);
    }
    let reg = ridge * trace / T::c(k as f64);
    for i in 0..k {
        gram[[i, i]] = gram[[i, i]] + reg;
    }

    let mut candidates: Vec<Vec<T>> = Vec::with_capacity(3);
    if let Ok(raw) = linalg::solve(&gram, &vec![T::one(); k]) {
        let s: T = raw.iter().cloned().sum();
        if s != T::zero() && raw.iter().all(|v| v.is_finite()) {
            candidates.push(raw.iter().map(|&v| v / s).collect());
        }
    }
    // nearest single neighbor: smallest diagonal of the unregularized Gram
    let nearest = (0..k)
        .min_by(|&a, &b| {
            (gram[[a, a]] - reg)
                .partial_cmp(&(gram[[b, b]] - reg))
                .unwrap()
        })
        .unwrap();
    let mut one_hot = vec![T::zero(); k];
    one_hot[nearest] = T::one();
    candidates.push(one_hot);
    candidates.push(uniform);

    let best = candidates
        .into_iter()
        .map(|w| (residual(target, neighbors, &w), w))
        .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal))
        .unwrap();
    Ok(best.1)
}

/// `Σ w_k · neighbor_k`
pub fn reconstruct<T: Scalar>(neighbors: &[&[T]], weights: &[T]) -> Vec<T> {
    let d = neighbors[0].len();
    let mut out = vec![T::zero(); d];
    for (n, &w) in neighbors.iter().zip(weights) {
        for j in 0..d {
            out[j] = out[j] + w * n[j];
        }
    }
    out
}
