use rand::Rng;

use crate::nn::{Activation, Init, Mlp};
use crate::numerics::{Bound, ParamSet, Var};
use crate::scalar::Scalar;

/// Raw log-scales are clamped to this magnitude before exponentiation.
pub const SCALE_CLAMP: f64 = 5.0;

/// Affine coupling: one half of the input passes through, the other becomes
/// `(x + t) ⊙ s` with `(t, log s)` predicted from the passive half and the
/// context.
#[derive(Debug, Clone, PartialEq)]
pub struct Coupling {
    pub net: Mlp,
    pub dim: usize,
    /// When set the first half is transformed and the second conditions.
    pub swap: bool,
}

impl Coupling {
    pub fn new(prefix: &str, dim: usize, ctx_dim: usize, hidden: usize, swap: bool) -> Self {
        assert!(dim % 2 == 0, "coupling needs an even dimension");
        let half = dim / 2;
        Self {
            net: Mlp::new(
                &format!("{prefix}.net"),
                &[half + ctx_dim, hidden, hidden, dim],
                Activation::Tanh,
            ),
            dim,
            swap,
        }
    }

    /// Final layer zeroed, so a fresh coupling is the identity.
    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, params: &mut ParamSet<T>, rng: &mut R) {
        self.net.init(params, rng, Init::Zero);
    }

    fn split<T: Scalar>(&self, b: &Bound<'_, T>, x: Var) -> (Var, Var) {
        let half = self.dim / 2;
        let (lo, hi) = (
            b.tape.slice_cols(x, 0, half),
            b.tape.slice_cols(x, half, half),
        );
        if self.swap {
            (hi, lo)
        } else {
            (lo, hi)
        }
    }

    fn join<T: Scalar>(&self, b: &Bound<'_, T>, passive: Var, active: Var) -> Var {
        if self.swap {
            b.tape.concat_cols(&[active, passive])
        } else {
            b.tape.concat_cols(&[passive, active])
        }
    }

    /// Shift and clamped log-scale for each row.
    fn conditioner<T: Scalar>(&self, b: &Bound<'_, T>, passive: Var, ctx: Var) -> (Var, Var) {
        let g = b.tape;
        let half = self.dim / 2;
        let out = self.net.forward(b, g.concat_cols(&[passive, ctx]));
        let t = g.slice_cols(out, 0, half);
        let raw = g.slice_cols(out, half, half);
        (t, g.clamp(raw, T::c(-SCALE_CLAMP), T::c(SCALE_CLAMP)))
    }

    pub fn forward<T: Scalar>(&self, b: &Bound<'_, T>, x: Var, ctx: Var) -> (Var, Var) {
        let g = b.tape;
        let (passive, active) = self.split(b, x);
        let (t, logs) = self.conditioner(b, passive, ctx);
        let y = g.mul(g.add(active, t), g.exp(logs));
        (self.join(b, passive, y), g.sum_cols(logs))
    }

    pub fn inverse<T: Scalar>(&self, b: &Bound<'_, T>, y: Var, ctx: Var) -> Var {
        let g = b.tape;
        let (passive, active) = self.split(b, y);
        let (t, logs) = self.conditioner(b, passive, ctx);
        let x = g.sub(g.mul(active, g.exp(g.neg(logs))), t);
        self.join(b, passive, x)
    }
}
