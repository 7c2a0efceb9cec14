//! Dense layers expressed against a [`Bound`] parameter set.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::numerics::{Bound, ParamSet, Var};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Glorot-scaled normal.
    Xavier,
    Zero,
    Normal(f64),
}

impl Init {
    pub fn sample<T: Scalar, R: Rng + ?Sized>(
        self,
        rows: usize,
        cols: usize,
        rng: &mut R,
    ) -> Array2<T> {
        match self {
            Init::Zero => Array2::zeros((rows, cols)),
            Init::Xavier => {
                let std = (2.0 / (rows + cols) as f64).sqrt();
                Array2::from_shape_fn((rows, cols), |_| {
                    T::c(std * rng.sample::<f64, _>(StandardNormal))
                })
            }
            Init::Normal(std) => Array2::from_shape_fn((rows, cols), |_| {
                T::c(std * rng.sample::<f64, _>(StandardNormal))
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Silu,
    Identity,
}

impl Activation {
    pub fn apply<T: Scalar>(self, b: &Bound<'_, T>, x: Var) -> Var {
        match self {
            Activation::Tanh => b.tape.tanh(x),
            Activation::Silu => b.tape.silu(x),
            Activation::Identity => x,
        }
    }
}

/// `y = x·W + b` with `W` stored as `(in, out)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: String,
    pub bias: Option<String>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(prefix: &str, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        Self {
            weight: format!("{prefix}.w"),
            bias: bias.then(|| format!("{prefix}.b")),
            in_dim,
            out_dim,
        }
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(
        &self,
        params: &mut ParamSet<T>,
        rng: &mut R,
        init: Init,
    ) {
        params.insert(
            self.weight.clone(),
            init.sample(self.in_dim, self.out_dim, rng),
        );
        if let Some(b) = &self.bias {
            params.insert(b.clone(), Array2::zeros((1, self.out_dim)));
        }
    }

    pub fn forward<T: Scalar>(&self, b: &Bound<'_, T>, x: Var) -> Var {
        let y = b.tape.matmul(x, b.p(&self.weight));
        match &self.bias {
            Some(name) => b.tape.add(y, b.p(name)),
            None => y,
        }
    }
}

/// Stack of [`Linear`] layers with a shared hidden activation; the last
/// layer is linear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    pub fn new(prefix: &str, dims: &[usize], activation: Activation) -> Self {
        assert!(
            dims.len() >= 2,
            "an MLP needs at least input and output widths"
        );
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(&format!("{prefix}.{i}"), w[0], w[1], true))
            .collect();
        Self { layers, activation }
    }

    /// Hidden layers Xavier-initialized, last layer per `last`.
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        &self,
        params: &mut ParamSet<T>,
        rng: &mut R,
        last: Init,
    ) {
        let n = self.layers.len();
        for (i, l) in self.layers.iter().enumerate() {
            l.init(params, rng, if i + 1 == n { last } else { Init::Xavier });
        }
    }

    pub fn forward<T: Scalar>(&self, b: &Bound<'_, T>, x: Var) -> Var {
        let n = self.layers.len();
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(b, h);
            if i + 1 < n {
                h = self.activation.apply(b, h);
            }
        }
        h
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }
}
