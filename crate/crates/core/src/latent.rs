//! Latent densities: a Student's-t mixture with one identity-covariance
//! component per class, and the standard normal.

use std::f64::consts::PI;

use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::numerics::{Tape, Var};
use crate::scalar::Scalar;

/// `log Γ((ν+D)/2) − log Γ(ν/2) − (D/2)·log(νπ)`.
pub fn t_log_norm(nu: f64, dim: usize) -> Result<f64> {
    if !(nu > 0.0) {
        return Err(Error::argument(format!(
            "degrees of freedom must be positive, got {nu}"
        )));
    }
    let d = dim as f64;
    Ok(ln_gamma((nu + d) / 2.0) - ln_gamma(nu / 2.0) - d / 2.0 * (nu * PI).ln())
}

/// Multivariate t log-density with identity scale matrix.
pub fn t_logpdf<T: Scalar>(z: ArrayView1<T>, mean: ArrayView1<T>, nu: f64) -> Result<T> {
    if z.len() != mean.len() {
        return Err(Error::argument("t_logpdf dimension mismatch"));
    }
    let d = z.len() as f64;
    let r2: f64 = z
        .iter()
        .zip(mean.iter())
        .map(|(a, b)| (*a - *b).f64().powi(2))
        .sum();
    Ok(T::c(
        t_log_norm(nu, z.len())? - (nu + d) / 2.0 * (r2 / nu).ln_1p(),
    ))
}

/// `log N(z; 0, I)`.
pub fn gaussian_logpdf<T: Scalar>(z: ArrayView1<T>) -> T {
    let d = z.len() as f64;
    let r2: f64 = z.iter().map(|v| v.f64().powi(2)).sum();
    T::c(-d / 2.0 * (2.0 * PI).ln() - r2 / 2.0)
}

/// Mixture of `C` t components with weights `1/C` and shared `ν`.
#[derive(Debug, Clone, PartialEq)]
pub struct Smm<T> {
    /// One mean per row.
    pub means: Array2<T>,
    pub nu: f64,
}

impl<T: Scalar> Smm<T> {
    pub fn new(means: Array2<T>, nu: f64) -> Result<Self> {
        if means.nrows() == 0 {
            return Err(Error::argument("mixture needs at least one component"));
        }
        t_log_norm(nu, means.ncols())?;
        Ok(Self { means, nu })
    }

    /// Means drawn from `N(0, I)`.
    pub fn init_means(classes: usize, dim: usize, nu: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::new(random_means(classes, dim, &mut rng), nu)
    }

    pub fn classes(&self) -> usize {
        self.means.nrows()
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    fn check_class(&self, class: usize) -> Result<()> {
        if class >= self.classes() {
            return Err(Error::argument(format!(
                "class {class} out of range for {} components",
                self.classes()
            )));
        }
        Ok(())
    }

    pub fn class_logpdf(&self, z: ArrayView1<T>, class: usize) -> Result<T> {
        self.check_class(class)?;
        t_logpdf(z, self.means.row(class), self.nu)
    }

    /// `log Σ_i (1/C)·t(z | μ_i)`, max-shifted.
    pub fn logpdf(&self, z: ArrayView1<T>) -> Result<T> {
        let logs = (0..self.classes())
            .map(|i| t_logpdf(z, self.means.row(i), self.nu).map(|v| v.f64()))
            .collect::<Result<Vec<f64>>>()?;
        let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = logs.iter().map(|l| (l - m).exp()).sum();
        Ok(T::c(m + (s / self.classes() as f64).ln()))
    }

    /// `μ_e + g·sqrt(ν/u)` with `g ~ N(0, I)` and `u ~ χ²_ν`.
    pub fn sample_class<R: Rng + ?Sized>(&self, class: usize, rng: &mut R) -> Result<Array1<T>> {
        self.check_class(class)?;
        let chi = ChiSquared::new(self.nu).map_err(|e| Error::argument(e.to_string()))?;
        let u: f64 = chi.sample(rng);
        let k = (self.nu / u).sqrt();
        Ok(self
            .means
            .row(class)
            .mapv(|m| m + T::c(k * rng.sample::<f64, _>(StandardNormal))))
    }
}

pub fn random_means<T: Scalar, R: Rng + ?Sized>(
    classes: usize,
    dim: usize,
    rng: &mut R,
) -> Array2<T> {
    Array2::from_shape_fn((classes, dim), |_| {
        T::c(rng.sample::<f64, _>(StandardNormal))
    })
}

pub fn sample_gaussian<T: Scalar, R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Array1<T> {
    Array1::from_shape_fn(dim, |_| T::c(rng.sample::<f64, _>(StandardNormal)))
}

/// Per-row `log t(z_r | μ_{class_r})` on the tape, shape `(rows, 1)`.
pub fn class_logpdf_tape<T: Scalar>(
    tape: &Tape<T>,
    z: Var,
    means: Var,
    classes: &[usize],
    nu: f64,
) -> Result<Var> {
    let (_, d) = tape.shape(z);
    let c = tape.shape(means).0;
    crate::flow::check_classes(classes, c)?;
    let mu = tape.gather_rows(means, classes);
    let r2 = tape.sum_cols(tape.square(tape.sub(z, mu)));
    let core = tape.scale(
        tape.log1p(tape.scale(r2, T::c(1.0 / nu))),
        T::c(-(nu + d as f64) / 2.0),
    );
    Ok(tape.add_scalar(core, T::c(t_log_norm(nu, d)?)))
}

/// Per-row standard-normal log-density on the tape, shape `(rows, 1)`.
pub fn gaussian_logpdf_tape<T: Scalar>(tape: &Tape<T>, z: Var) -> Var {
    let d = tape.shape(z).1 as f64;
    let r2 = tape.sum_cols(tape.square(z));
    tape.add_scalar(tape.scale(r2, T::c(-0.5)), T::c(-d / 2.0 * (2.0 * PI).ln()))
}
