use std::rc::Rc;

use ndarray::Array2;

use crate::error::Result;
use crate::numerics::linalg::Lu;
use crate::numerics::{Bound, ParamSet, Var, PAD};
use crate::scalar::Scalar;

/// `h'' = W·h'` with `W = P·L·(U + diag(sign·exp(logs)))`.
///
/// `L` is unit lower triangular and `U` strictly upper triangular; only the
/// relevant triangles of the stored matrices are read. The permutation and
/// the signs are non-trainable buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct InvLinear {
    pub lower: String,
    pub upper: String,
    pub logs: String,
    pub sign: String,
    pub perm: String,
    pub dim: usize,
}

impl InvLinear {
    pub fn new(prefix: &str, dim: usize) -> Self {
        Self {
            lower: format!("{prefix}.lower"),
            upper: format!("{prefix}.upper"),
            logs: format!("{prefix}.logs"),
            sign: format!("{prefix}.sign"),
            perm: format!("{prefix}.perm"),
            dim,
        }
    }

    /// Stores the factorization of an arbitrary invertible `w`.
    pub fn init_from<T: Scalar>(&self, params: &mut ParamSet<T>, w: &Array2<T>) -> Result<()> {
        let d = self.dim;
        let lu = Lu::decompose(w)?;
        let upper = lu.upper();
        let strict_upper =
            Array2::from_shape_fn(
                (d, d),
                |(i, j)| if j > i { upper[[i, j]] } else { T::zero() },
            );
        let diag = (0..d).map(|i| upper[[i, i]]);
        params.insert(self.lower.clone(), lu.lower() - Array2::eye(d));
        params.insert(self.upper.clone(), strict_upper);
        params.insert(
            self.logs.clone(),
            Array2::from_shape_vec((1, d), diag.clone().map(|u| u.abs().ln()).collect()).unwrap(),
        );
        params.insert_buffer(
            self.sign.clone(),
            Array2::from_shape_vec((1, d), diag.map(|u| u.signum()).collect()).unwrap(),
        );
        // row i of W is row q[i] of L·U, with q the inverse of the pivot order
        let mut q = vec![0usize; d];
        for (i, &p) in lu.perm.iter().enumerate() {
            q[p] = i;
        }
        params.insert_buffer(
            self.perm.clone(),
            Array2::from_shape_vec((1, d), q.iter().map(|&i| T::c(i as f64)).collect()).unwrap(),
        );
        Ok(())
    }

    /// Dense `W` recorded on the tape.
    pub fn weight<T: Scalar>(&self, b: &Bound<'_, T>) -> Var {
        let g = b.tape;
        let d = self.dim;
        let tri = |keep: fn(usize, usize) -> bool| {
            Rc::new(
                (0..d * d)
                    .map(|k| if keep(k / d, k % d) { k } else { PAD })
                    .collect::<Vec<_>>(),
            )
        };
        let lower = g.add(
            g.gather(b.p(&self.lower), tri(|i, j| i > j), (d, d)),
            g.constant(Array2::eye(d)),
        );
        let diag_vals = g.mul(g.exp(b.p(&self.logs)), b.p(&self.sign));
        let diag_idx = Rc::new(
            (0..d * d)
                .map(|k| if k / d == k % d { k % d } else { PAD })
                .collect(),
        );
        let upper = g.add(
            g.gather(b.p(&self.upper), tri(|i, j| j > i), (d, d)),
            g.gather(diag_vals, diag_idx, (d, d)),
        );
        let q: Vec<usize> = b
            .params()
            .expect(&self.perm)
            .iter()
            .map(|v| v.to_usize().expect("permutation buffer"))
            .collect();
        g.gather_rows(g.matmul(lower, upper), &q)
    }

    /// `log|det W|` as a `(1, 1)` value.
    pub fn logdet<T: Scalar>(&self, b: &Bound<'_, T>) -> Var {
        b.tape.sum_all(b.p(&self.logs))
    }

    pub fn forward<T: Scalar>(&self, b: &Bound<'_, T>, h: Var) -> (Var, Var) {
        let w = self.weight(b);
        (b.tape.matmul_nt(h, w), self.logdet(b))
    }

    pub fn inverse<T: Scalar>(&self, b: &Bound<'_, T>, h: Var) -> Var {
        let g = b.tape;
        g.matmul_nt(h, g.inverse(self.weight(b)))
    }
}
