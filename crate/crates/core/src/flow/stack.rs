use std::ops::Range;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_classes, ActNorm, Coupling, InvLinear};
use crate::error::{Error, Result};
use crate::numerics::linalg::random_rotation;
use crate::numerics::{Bound, ParamSet, Tape, Var};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    pub dim: usize,
    pub ctx_dim: usize,
    /// Number of actnorm parameter sets (emotion classes, or 1).
    pub classes: usize,
    pub steps: usize,
    pub hidden: usize,
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.dim % 2 != 0 {
            return Err(Error::config(format!(
                "flow dimension must be even and positive, got {}",
                self.dim
            )));
        }
        if self.steps == 0 {
            return Err(Error::config("flow needs at least one step"));
        }
        if self.classes == 0 || self.hidden == 0 {
            return Err(Error::config(
                "flow classes and hidden width must be positive",
            ));
        }
        Ok(())
    }
}

/// How the invertible linear maps start out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinearInit {
    Rotation,
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowStep {
    pub actnorm: ActNorm,
    pub linear: InvLinear,
    pub coupling: Coupling,
}

/// `K` steps of actnorm → invertible linear → coupling.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowStack {
    pub config: FlowConfig,
    pub steps: Vec<FlowStep>,
}

impl FlowStack {
    pub fn new(prefix: &str, config: FlowConfig) -> Result<Self> {
        config.validate()?;
        let steps = (0..config.steps)
            .map(|k| FlowStep {
                actnorm: ActNorm::new(&format!("{prefix}.{k}.an"), config.classes, config.dim),
                linear: InvLinear::new(&format!("{prefix}.{k}.inv"), config.dim),
                coupling: Coupling::new(
                    &format!("{prefix}.{k}.cp"),
                    config.dim,
                    config.ctx_dim,
                    config.hidden,
                    k % 2 == 1,
                ),
            })
            .collect();
        Ok(Self { config, steps })
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(
        &self,
        params: &mut ParamSet<T>,
        rng: &mut R,
        linear: LinearInit,
    ) -> Result<()> {
        for step in &self.steps {
            step.actnorm.init(params);
            let w = match linear {
                LinearInit::Rotation => random_rotation(self.config.dim, rng),
                LinearInit::Identity => Array2::eye(self.config.dim),
            };
            step.linear.init_from(params, &w)?;
            step.coupling.init(params, rng);
        }
        Ok(())
    }

    /// Data → latent over `range` of the steps. Returns `(z, logdet)` with
    /// one logdet per row.
    pub fn forward_range<T: Scalar>(
        &self,
        b: &Bound<'_, T>,
        x: Var,
        ctx: Var,
        classes: &[usize],
        range: Range<usize>,
    ) -> Result<(Var, Var)> {
        check_classes(classes, self.config.classes)?;
        let g = b.tape;
        let mut h = x;
        let mut logdet = g.constant(Array2::zeros((g.shape(x).0, 1)));
        for step in &self.steps[range] {
            let (a, ld_a) = step.actnorm.forward(b, h, classes);
            let (l, ld_l) = step.linear.forward(b, a);
            let (c, ld_c) = step.coupling.forward(b, l, ctx);
            logdet = g.add(g.add(g.add(logdet, ld_a), ld_l), ld_c);
            h = c;
        }
        Ok((h, logdet))
    }

    pub fn forward<T: Scalar>(
        &self,
        b: &Bound<'_, T>,
        x: Var,
        ctx: Var,
        classes: &[usize],
    ) -> Result<(Var, Var)> {
        self.forward_range(b, x, ctx, classes, 0..self.steps.len())
    }

    /// Latent → data over `range`, undoing [`forward_range`](Self::forward_range).
    pub fn inverse_range<T: Scalar>(
        &self,
        b: &Bound<'_, T>,
        z: Var,
        ctx: Var,
        classes: &[usize],
        range: Range<usize>,
    ) -> Result<Var> {
        check_classes(classes, self.config.classes)?;
        let mut h = z;
        for step in self.steps[range].iter().rev() {
            h = step.coupling.inverse(b, h, ctx);
            h = step.linear.inverse(b, h);
            h = step.actnorm.inverse(b, h, classes);
        }
        Ok(h)
    }

    pub fn inverse<T: Scalar>(
        &self,
        b: &Bound<'_, T>,
        z: Var,
        ctx: Var,
        classes: &[usize],
    ) -> Result<Var> {
        self.inverse_range(b, z, ctx, classes, 0..self.steps.len())
    }

    /// Array-level forward pass on a private tape.
    pub fn eval_forward<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        x: &Array2<T>,
        ctx: &Array2<T>,
        classes: &[usize],
    ) -> Result<(Array2<T>, Array2<T>)> {
        self.check_shapes(x, ctx, classes)?;
        let g = Tape::new();
        let b = Bound::new(&g, params);
        let (z, ld) = self.forward(&b, g.constant(x.clone()), g.constant(ctx.clone()), classes)?;
        Ok((g.value(z), g.value(ld)))
    }

    pub fn eval_inverse<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        z: &Array2<T>,
        ctx: &Array2<T>,
        classes: &[usize],
    ) -> Result<Array2<T>> {
        self.check_shapes(z, ctx, classes)?;
        let g = Tape::new();
        let b = Bound::new(&g, params);
        let x = self.inverse(&b, g.constant(z.clone()), g.constant(ctx.clone()), classes)?;
        Ok(g.value(x))
    }

    fn check_shapes<T: Scalar>(
        &self,
        x: &Array2<T>,
        ctx: &Array2<T>,
        classes: &[usize],
    ) -> Result<()> {
        let rows = x.nrows();
        if x.ncols() != self.config.dim
            || ctx.dim() != (rows, self.config.ctx_dim)
            || classes.len() != rows
        {
            return Err(Error::argument(format!(
                "flow input shapes x {:?}, ctx {:?}, {} classes do not match dim {} / ctx {}",
                x.dim(),
                ctx.dim(),
                classes.len(),
                self.config.dim,
                self.config.ctx_dim
            )));
        }
        Ok(())
    }
}
