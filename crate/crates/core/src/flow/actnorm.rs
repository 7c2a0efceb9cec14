use ndarray::Array2;

use crate::numerics::{Bound, ParamSet, Var};
use crate::scalar::Scalar;

/// Per-class affine normalization `h = (x − μ_e) / δ_e` with `δ = exp(logs)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActNorm {
    pub mu: String,
    pub logs: String,
    pub classes: usize,
    pub dim: usize,
}

impl ActNorm {
    pub fn new(prefix: &str, classes: usize, dim: usize) -> Self {
        Self {
            mu: format!("{prefix}.mu"),
            logs: format!("{prefix}.logs"),
            classes,
            dim,
        }
    }

    /// μ = 0, δ = 1 for every class.
    pub fn init<T: Scalar>(&self, params: &mut ParamSet<T>) {
        params.insert(self.mu.clone(), Array2::zeros((self.classes, self.dim)));
        params.insert(self.logs.clone(), Array2::zeros((self.classes, self.dim)));
    }

    fn stats<T: Scalar>(&self, b: &Bound<'_, T>, classes: &[usize]) -> (Var, Var) {
        let g = b.tape;
        (
            g.gather_rows(b.p(&self.mu), classes),
            g.gather_rows(b.p(&self.logs), classes),
        )
    }

    /// Returns `(h, logdet)` with `logdet` of shape `(rows, 1)`.
    pub fn forward<T: Scalar>(&self, b: &Bound<'_, T>, x: Var, classes: &[usize]) -> (Var, Var) {
        let g = b.tape;
        let (mu, logs) = self.stats(b, classes);
        let h = g.mul(g.sub(x, mu), g.exp(g.neg(logs)));
        (h, g.neg(g.sum_cols(logs)))
    }

    pub fn inverse<T: Scalar>(&self, b: &Bound<'_, T>, h: Var, classes: &[usize]) -> Var {
        let g = b.tape;
        let (mu, logs) = self.stats(b, classes);
        g.add(g.mul(h, g.exp(logs)), mu)
    }
}
