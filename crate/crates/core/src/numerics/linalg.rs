//! Small dense linear algebra on `Array2`: pivoted LU, solves, inverses and
//! random rotations. Sizes here are at most a few hundred.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `P·A = L·U` with `L` unit lower triangular, packed into one matrix.
#[derive(Debug, Clone)]
pub struct Lu<T> {
    pub packed: Array2<T>,
    /// Row `i` of `P·A` is row `perm[i]` of `A`.
    pub perm: Vec<usize>,
    /// Parity of the permutation, ±1.
    pub parity: T,
}

impl<T: Scalar> Lu<T> {
    pub fn decompose(a: &Array2<T>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::argument("LU of a non-square matrix"));
        }
        let mut m = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut parity = T::one();
        for k in 0..n {
            let (piv, best) = (k..n)
                .map(|i| (i, m[[i, k]].abs()))
                .fold((k, -T::one()), |acc, x| if x.1 > acc.1 { x } else { acc });
            if best == T::zero() {
                return Err(Error::numeric("singular matrix in LU decomposition"));
            }
            if piv != k {
                for j in 0..n {
                    m.swap([k, j], [piv, j]);
                }
                perm.swap(k, piv);
                parity = -parity;
            }
            let pivot = m[[k, k]];
            for i in k + 1..n {
                let f = m[[i, k]] / pivot;
                m[[i, k]] = f;
                if f != T::zero() {
                    for j in k + 1..n {
                        let v = m[[k, j]];
                        m[[i, j]] = m[[i, j]] - f * v;
                    }
                }
            }
        }
        Ok(Self {
            packed: m,
            perm,
            parity,
        })
    }

    pub fn lower(&self) -> Array2<T> {
        let n = self.packed.nrows();
        Array2::from_shape_fn((n, n), |(i, j)| match i.cmp(&j) {
            std::cmp::Ordering::Greater => self.packed[[i, j]],
            std::cmp::Ordering::Equal => T::one(),
            std::cmp::Ordering::Less => T::zero(),
        })
    }

    pub fn upper(&self) -> Array2<T> {
        let n = self.packed.nrows();
        Array2::from_shape_fn((n, n), |(i, j)| {
            if i <= j {
                self.packed[[i, j]]
            } else {
                T::zero()
            }
        })
    }

    pub fn det(&self) -> T {
        let n = self.packed.nrows();
        (0..n).fold(self.parity, |acc, i| acc * self.packed[[i, i]])
    }

    pub fn log_abs_det(&self) -> T {
        let n = self.packed.nrows();
        (0..n).map(|i| self.packed[[i, i]].abs().ln()).sum()
    }

    pub fn solve_vec(&self, b: &[T]) -> Vec<T> {
        let n = self.packed.nrows();
        let mut y: Vec<T> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let mut s = y[i];
            for j in 0..i {
                s = s - self.packed[[i, j]] * y[j];
            }
            y[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for j in i + 1..n {
                s = s - self.packed[[i, j]] * y[j];
            }
            y[i] = s / self.packed[[i, i]];
        }
        y
    }
}

pub fn inverse<T: Scalar>(a: &Array2<T>) -> Result<Array2<T>> {
    let lu = Lu::decompose(a)?;
    let n = a.nrows();
    let mut inv = Array2::zeros((n, n));
    let mut e = vec![T::zero(); n];
    for j in 0..n {
        e.iter_mut().for_each(|v| *v = T::zero());
        e[j] = T::one();
        let col = lu.solve_vec(&e);
        for i in 0..n {
            inv[[i, j]] = col[i];
        }
    }
    Ok(inv)
}

pub fn solve<T: Scalar>(a: &Array2<T>, b: &[T]) -> Result<Array1<T>> {
    Ok(Array1::from(Lu::decompose(a)?.solve_vec(b)))
}

pub fn det<T: Scalar>(a: &Array2<T>) -> T {
    match Lu::decompose(a) {
        Ok(lu) => lu.det(),
        Err(_) => T::zero(),
    }
}

/// Haar-ish random orthogonal matrix: Gram–Schmidt on a Gaussian matrix with
/// the column signs fixed so that R's diagonal is positive.
pub fn random_rotation<T: Scalar, R: Rng + ?Sized>(n: usize, rng: &mut R) -> Array2<T> {
    loop {
        let g: Array2<f64> = Array2::from_shape_fn((n, n), |_| rng.sample(StandardNormal));
        let mut q = Array2::<f64>::zeros((n, n));
        let mut ok = true;
        for j in 0..n {
            let mut v = g.column(j).to_owned();
            // two passes of modified Gram-Schmidt for stability
            for _ in 0..2 {
                for k in 0..j {
                    let qk = q.column(k);
                    let d = qk.dot(&v);
                    v.scaled_add(-d, &qk);
                }
            }
            let norm = v.dot(&v).sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            q.column_mut(j).assign(&(v / norm));
        }
        if ok {
            return q.mapv(T::c);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lu_reconstructs_permuted_matrix() {
        let a: Array2<f64> = array![[0.0, 2.0, 1.0], [1.0, 1.0, 0.0], [3.0, 0.0, 4.0]];
        let lu = Lu::decompose(&a).unwrap();
        let pa = Array2::from_shape_fn((3, 3), |(i, j)| a[[lu.perm[i], j]]);
        let prod = lu.lower().dot(&lu.upper());
        for (x, y) in pa.iter().zip(prod.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
        // cofactor expansion: 0*(4) - 2*(4) + 1*(-3) = -11
        assert!((lu.det() + 11.0).abs() < 1e-12);
    }

    #[test]
    fn inverse_times_matrix_is_identity() {
        let a: Array2<f64> = array![[4.0, 1.0], [2.0, 3.0]];
        let inv = inverse(&a).unwrap();
        let id = a.dot(&inv);
        assert!((id[[0, 0]] - 1.0).abs() < 1e-12 && id[[0, 1]].abs() < 1e-12);
        assert!(inverse(&array![[1.0f64, 2.0], [2.0, 4.0]]).is_err());
    }

    #[test]
    fn rotation_is_orthonormal_with_unit_determinant_magnitude() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q: Array2<f64> = random_rotation(8, &mut rng);
        let qtq = q.t().dot(&q);
        for i in 0..8 {
            for j in 0..8 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((qtq[[i, j]] - e).abs() < 1e-12);
            }
        }
        assert!(Lu::decompose(&q).unwrap().log_abs_det().abs() < 1e-12);
    }
}
