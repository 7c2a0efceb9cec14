//! Central-difference gradients and the analytic-vs-numeric gradient check.

use super::params::ParamSet;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Central-difference gradient of `loss` at `params` for every trainable scalar.
/// Non-trainable entries get a zero gradient.
pub fn finite_diff_grad<T, F>(mut loss: F, params: &ParamSet<T>, h: T) -> Result<ParamSet<T>>
where
    T: Scalar,
    F: FnMut(&ParamSet<T>) -> Result<T>,
{
    if !(h > T::zero()) {
        return Err(Error::argument("finite-difference step must be positive"));
    }
    let mut out = params.zeros_like();
    let mut probe = params.clone();
    let names: Vec<String> = params.trainable_names().map(str::to_owned).collect();
    for name in names {
        let n = params.expect(&name).len();
        for k in 0..n {
            let base = flat_get(&probe, &name, k);
            flat_set(&mut probe, &name, k, base + h);
            let up = loss(&probe)?;
            flat_set(&mut probe, &name, k, base - h);
            let down = loss(&probe)?;
            flat_set(&mut probe, &name, k, base);
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite loss probing {name}[{k}] with step {h}"
                )));
            }
            let g = (up - down) / (h + h);
            flat_set(&mut out, &name, k, g);
        }
    }
    Ok(out)
}

fn flat_get<T: Scalar>(p: &ParamSet<T>, name: &str, k: usize) -> T {
    let a = p.expect(name);
    a[[k / a.ncols(), k % a.ncols()]]
}

fn flat_set<T: Scalar>(p: &mut ParamSet<T>, name: &str, k: usize, v: T) {
    let a = p.get_mut(name).unwrap();
    let c = a.ncols();
    a[[k / c, k % c]] = v;
}

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    /// Flat index of the worst entry within the parameter.
    pub worst_index: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport<T> {
    pub entries: Vec<GradCheckEntry>,
    pub point: ParamSet<T>,
    pub h: f64,
    pub tol: f64,
    pub passed: bool,
}

impl<T: Scalar> GradCheckReport<T> {
    pub fn max_rel_err(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }

    /// Names of parameters whose error exceeds the tolerance.
    pub fn failures(&self) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|e| e.max_rel_err > self.tol)
            .map(|e| e.name.as_str())
            .collect()
    }
}

/// Relative error with a `max(|a|, |b|, 1e-8)` denominator.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares a supplied analytic gradient with the central-difference oracle.
pub fn grad_check_against<T, F>(
    loss: F,
    analytic: &ParamSet<T>,
    params: &ParamSet<T>,
    h: T,
    tol: f64,
) -> Result<GradCheckReport<T>>
where
    T: Scalar,
    F: FnMut(&ParamSet<T>) -> Result<T>,
{
    params.same_shapes(analytic)?;
    let numeric = finite_diff_grad(loss, params, h)?;
    let mut entries = Vec::new();
    for name in params.trainable_names() {
        let (a, n) = (analytic.expect(name), numeric.expect(name));
        let (mut worst, mut worst_index) = (0.0, 0);
        for (k, (x, y)) in a.iter().zip(n.iter()).enumerate() {
            let e = rel_err(x.f64(), y.f64());
            if e > worst || e.is_nan() {
                worst = if e.is_nan() { f64::INFINITY } else { e };
                worst_index = k;
            }
        }
        entries.push(GradCheckEntry {
            name: name.to_owned(),
            max_rel_err: worst,
            worst_index,
        });
    }
    let passed = entries.iter().all(|e| e.max_rel_err <= tol);
    Ok(GradCheckReport {
        entries,
        point: params.clone(),
        h: h.f64(),
        tol,
        passed,
    })
}

/// Gradient check for a loss that reports its own analytic gradient.
pub fn grad_check<T, F>(
    mut loss_and_grad: F,
    params: &ParamSet<T>,
    h: T,
    tol: f64,
) -> Result<GradCheckReport<T>>
where
    T: Scalar,
    F: FnMut(&ParamSet<T>) -> Result<(T, ParamSet<T>)>,
{
    let (_, analytic) = loss_and_grad(params)?;
    grad_check_against(|p| loss_and_grad(p).map(|r| r.0), &analytic, params, h, tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn point(vals: &[f64]) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.insert(
            "x",
            ndarray::Array2::from_shape_vec((1, vals.len()), vals.to_vec()).unwrap(),
        );
        p
    }

    #[test]
    fn square_derivative() {
        let g =
            finite_diff_grad(|p| Ok(p.expect("x")[[0, 0]].powi(2)), &point(&[3.0]), 1e-4).unwrap();
        assert!((g.expect("x")[[0, 0]] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let g = finite_diff_grad(|_| Ok(4.2), &point(&[1.0, -2.0, 0.5]), 1e-4).unwrap();
        assert!(g.expect("x").iter().all(|&v| v == 0.0));
    }

    #[test]
    fn product_gradient() {
        let f = |p: &ParamSet<f64>| {
            let x = p.expect("x");
            Ok(x[[0, 0]] * x[[0, 1]])
        };
        let g = finite_diff_grad(f, &point(&[2.0, 5.0]), 1e-4).unwrap();
        assert!((g.expect("x")[[0, 0]] - 5.0).abs() < 1e-6);
        assert!((g.expect("x")[[0, 1]] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn non_finite_probe_names_location() {
        let f = |p: &ParamSet<f64>| Ok(p.expect("x")[[0, 0]].ln());
        match finite_diff_grad(f, &point(&[0.0]), 1e-4) {
            Err(Error::Numeric(msg)) => assert!(msg.contains("x[0]")),
            other => panic!("{other:?}"),
        }
        assert!(finite_diff_grad(|_| Ok(0.0), &point(&[0.0]), 0.0).is_err());
    }

    #[test]
    fn exact_analytic_gradient_has_zero_error() {
        let loss = |p: &ParamSet<f64>| {
            let x = p.expect("x");
            let v = x[[0, 0]] * x[[0, 1]];
            let mut g = p.zeros_like();
            g.get_mut("x")
                .unwrap()
                .assign(&array![[x[[0, 1]], x[[0, 0]]]]);
            Ok((v, g))
        };
        let report = grad_check(loss, &point(&[2.0, 5.0]), 1e-4, 1e-3).unwrap();
        assert!(report.passed);
        assert!(report.max_rel_err() < 1e-9);
    }

    #[test]
    fn injected_fault_is_reported_by_name() {
        let mut params = point(&[2.0, 5.0]);
        params.insert("y", array![[1.5]]);
        let loss = |p: &ParamSet<f64>| {
            let x = p.expect("x");
            Ok(x[[0, 0]] * x[[0, 1]] + p.expect("y")[[0, 0]].powi(2))
        };
        let mut analytic = params.zeros_like();
        analytic.get_mut("x").unwrap().assign(&array![[5.0, 2.0]]);
        analytic.get_mut("y").unwrap()[[0, 0]] = 3.0 * 1.1;
        let report = grad_check_against(loss, &analytic, &params, 1e-4, 1e-3).unwrap();
        assert!(!report.passed);
        assert_eq!(report.failures(), vec!["y"]);
        assert_eq!(report.worst().unwrap().name, "y");
    }
}
