use std::f64::consts::PI;

use ndarray::{array, Array1, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use talkflow_core::latent::{
    class_logpdf_tape, gaussian_logpdf, gaussian_logpdf_tape, t_logpdf, Smm,
};
use talkflow_core::numerics::Tape;

#[test]
fn cauchy_closed_forms() {
    let mu = array![0.0];
    let at0 = t_logpdf(array![0.0].view(), mu.view(), 1.0).unwrap();
    let at1 = t_logpdf(array![1.0].view(), mu.view(), 1.0).unwrap();
    assert!((at0 - (1.0 / PI).ln()).abs() < 1e-12);
    assert!((at1 - (1.0 / (2.0 * PI)).ln()).abs() < 1e-12);
    assert!((at0 + 1.14473).abs() < 1e-5);
    assert!((at1 + 1.83788).abs() < 1e-5);
}

#[test]
fn nonpositive_nu_is_rejected() {
    let z = array![0.0, 0.0];
    assert!(t_logpdf(z.view(), z.view(), 0.0).is_err());
    assert!(t_logpdf(z.view(), z.view(), -1.0).is_err());
    assert!(Smm::new(Array2::<f64>::zeros((1, 2)), 0.0).is_err());
}

#[test]
fn large_nu_approaches_the_gaussian() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mu = array![0.0, 0.0];
    for _ in 0..10 {
        let z = array![rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
        let t = t_logpdf(z.view(), mu.view(), 1e6).unwrap();
        let n: f64 = -(2.0 * PI).ln() - z.dot(&z) / 2.0;
        assert!((t - n).abs() < 1e-3, "{t} vs {n}");
    }
}

#[test]
fn gaussian_at_origin() {
    let z = Array1::<f64>::zeros(64);
    assert!((gaussian_logpdf(z.view()) + 32.0 * (2.0 * PI).ln()).abs() < 1e-9);
    assert!((gaussian_logpdf(z.view()) + 58.812066).abs() < 1e-5);
}

#[test]
fn mixture_of_identical_components_and_single_component() {
    let one = Smm::new(array![[0.5f64, -1.0]], 2.0).unwrap();
    let two = Smm::new(array![[0.5f64, -1.0], [0.5, -1.0]], 2.0).unwrap();
    let z = array![1.0, 2.0];
    let t = t_logpdf(z.view(), array![0.5, -1.0].view(), 2.0).unwrap();
    assert!((one.logpdf(z.view()).unwrap() - t).abs() < 1e-12);
    assert!((two.logpdf(z.view()).unwrap() - t).abs() < 1e-12);
    assert_eq!(two.class_logpdf(z.view(), 1).unwrap(), t);
}

/// Trapezoid rule over a uniform grid.
fn trapezoid(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let inner: f64 = (1..n).map(|i| f(a + i as f64 * h)).sum();
    h * (inner + 0.5 * (f(a) + f(b)))
}

#[test]
fn one_dimensional_mixture_integrates_to_one() {
    let m = Smm::new(array![[-1.5], [2.0]], 2.0).unwrap();
    let total = trapezoid(
        |x| m.logpdf(array![x].view()).unwrap().exp(),
        -50.0,
        50.0,
        200_000,
    );
    assert!((total - 1.0).abs() < 1e-3, "{total}");
}

#[test]
fn two_dimensional_mixture_integrates_to_one() {
    // x = tan θ maps the whole plane onto a bounded square
    let m = Smm::new(array![[-1.0, 0.5], [1.5, -0.5]], 2.0).unwrap();
    let n = 1200;
    let lim = PI / 2.0;
    let h = 2.0 * lim / n as f64;
    let mut total = 0.0;
    for i in 1..n {
        let a = -lim + i as f64 * h;
        let (x, jx) = (a.tan(), 1.0 / a.cos().powi(2));
        for j in 1..n {
            let b = -lim + j as f64 * h;
            let (y, jy) = (b.tan(), 1.0 / b.cos().powi(2));
            total += m.logpdf(array![x, y].view()).unwrap().exp() * jx * jy;
        }
    }
    // the integrand vanishes on the boundary, so the trapezoid sum is the interior sum
    total *= h * h;
    assert!((total - 1.0).abs() < 1e-3, "{total}");
}

#[test]
fn class_density_peaks_at_its_mean_and_prefers_the_nearer_class() {
    let m = Smm::new(array![[0.0, 0.0], [8.0, 8.0]], 2.0).unwrap();
    let mode = m.class_logpdf(array![0.0, 0.0].view(), 0).unwrap();
    let off = m.class_logpdf(array![0.1, -0.2].view(), 0).unwrap();
    assert!(mode > off);
    let z = array![8.0, 8.0];
    assert!(m.class_logpdf(z.view(), 1).unwrap() > m.class_logpdf(z.view(), 0).unwrap());
    assert!(m.class_logpdf(z.view(), 2).is_err());
}

#[test]
fn large_inputs_stay_finite() {
    let m = Smm::new(array![[0.0f64, 0.0], [3.0, 1.0]], 2.0).unwrap();
    for r in [1.0, 1e2, 1e3] {
        assert!(m.logpdf(array![r, -r].view()).unwrap().is_finite());
    }
}

#[test]
fn sample_moments_match_the_t_distribution() {
    let m = Smm::new(array![[1.0f64, -2.0]], 5.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 100_000;
    let draws: Vec<Array1<f64>> = (0..n)
        .map(|_| m.sample_class(0, &mut rng).unwrap())
        .collect();
    let mean: Array1<f64> = draws.iter().fold(Array1::zeros(2), |acc, d| acc + d) / n as f64;
    assert!(
        (mean[0] - 1.0).abs() < 0.05 && (mean[1] + 2.0).abs() < 0.05,
        "{mean}"
    );
    let expected = 5.0 / 3.0;
    for k in 0..2 {
        let var = draws.iter().map(|d| (d[k] - mean[k]).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(
            (var - expected).abs() < 0.1 * expected,
            "coordinate {k}: {var}"
        );
    }
}

#[test]
fn sampling_and_init_are_seeded() {
    let a = Smm::<f64>::init_means(9, 64, 2.0, 3).unwrap();
    let b = Smm::<f64>::init_means(9, 64, 2.0, 3).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.classes(), 9);
    let mut min_dist = f64::INFINITY;
    for i in 0..9 {
        for j in 0..i {
            let d = (&a.means.row(i) - &a.means.row(j))
                .mapv(|v| v * v)
                .sum()
                .sqrt();
            min_dist = min_dist.min(d);
        }
    }
    assert!(min_dist > 0.0);
    let mut r1 = ChaCha8Rng::seed_from_u64(5);
    let mut r2 = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..5 {
        assert_eq!(
            a.sample_class(4, &mut r1).unwrap(),
            a.sample_class(4, &mut r2).unwrap()
        );
    }
}

#[test]
fn tape_densities_match_the_array_versions() {
    let m = Smm::new(array![[0.0f64, 1.0, -1.0], [2.0, 0.0, 0.5]], 2.0).unwrap();
    let z = array![[0.3, 0.2, 0.1], [1.0, -1.0, 2.0], [5.0, 5.0, 5.0]];
    let classes = [1, 0, 1];
    let g = Tape::new();
    let lp = g.value(
        class_logpdf_tape(
            &g,
            g.constant(z.clone()),
            g.constant(m.means.clone()),
            &classes,
            2.0,
        )
        .unwrap(),
    );
    let gl = g.value(gaussian_logpdf_tape(&g, g.constant(z.clone())));
    for r in 0..3 {
        assert!((lp[[r, 0]] - m.class_logpdf(z.row(r), classes[r]).unwrap()).abs() < 1e-12);
        assert!((gl[[r, 0]] - gaussian_logpdf(z.row(r))).abs() < 1e-12);
    }
    assert!(class_logpdf_tape(&g, g.constant(z), g.constant(m.means), &[2, 0, 0], 2.0).is_err());
}

proptest! {
    #[test]
    fn t_density_decreases_with_distance(
        nu in 0.5f64..20.0,
        dir in prop::collection::vec(-1.0f64..1.0, 3),
        r1 in 0.0f64..10.0,
        dr in 0.01f64..10.0,
    ) {
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assume!(norm > 1e-3);
        let mu = array![0.2, -0.4, 1.0];
        let at = |r: f64| {
            let z = Array1::from_shape_fn(3, |k| mu[k] + r * dir[k] / norm);
            t_logpdf(z.view(), mu.view(), nu).unwrap()
        };
        prop_assert!(at(r1) > at(r1 + dr));
    }
}
