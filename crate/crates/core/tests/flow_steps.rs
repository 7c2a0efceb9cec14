use ndarray::{array, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use talkflow_core::flow::{ActNorm, Coupling, FlowConfig, FlowStack, InvLinear, LinearInit};
use talkflow_core::numerics::{Bound, ParamSet, Tape};

fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.random_range(-scale..scale))
}

/// Laplace expansion along the first row.
fn cofactor_det(m: &Array2<f64>) -> f64 {
    let n = m.nrows();
    if n == 1 {
        return m[[0, 0]];
    }
    (0..n)
        .map(|j| {
            let minor = Array2::from_shape_fn((n - 1, n - 1), |(r, c)| {
                m[[r + 1, if c < j { c } else { c + 1 }]]
            });
            let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
            sign * m[[0, j]] * cofactor_det(&minor)
        })
        .sum()
}

/// Adds noise to every trainable entry so no step is the identity.
fn jitter(params: &mut ParamSet<f64>, rng: &mut ChaCha8Rng, scale: f64) {
    let names: Vec<String> = params.trainable_names().map(str::to_owned).collect();
    for name in names {
        params
            .get_mut(&name)
            .unwrap()
            .mapv_inplace(|v| v + rng.random_range(-scale..scale));
    }
}

fn stack(
    dim: usize,
    ctx_dim: usize,
    classes: usize,
    steps: usize,
    seed: u64,
    linear: LinearInit,
) -> (FlowStack, ParamSet<f64>) {
    let cfg = FlowConfig {
        dim,
        ctx_dim,
        classes,
        steps,
        hidden: 16,
    };
    let flow = FlowStack::new("flow", cfg).unwrap();
    let mut params = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    flow.init(&mut params, &mut rng, linear).unwrap();
    (flow, params)
}

#[test]
fn actnorm_hand_example_and_roundtrip() {
    let an = ActNorm::new("an", 1, 2);
    let mut params = ParamSet::new();
    an.init(&mut params);
    params.get_mut("an.mu").unwrap().fill(1.0);
    params.get_mut("an.logs").unwrap().fill(2f64.ln());
    let g = Tape::new();
    let b = Bound::new(&g, &params);
    let x = g.constant(array![[3.0, 5.0]]);
    let (h, ld) = an.forward(&b, x, &[0]);
    assert_eq!(g.value(h), array![[1.0, 2.0]]);
    assert!((g.scalar(ld) + 2.0 * 2f64.ln()).abs() < 1e-12);
    let back = g.value(an.inverse(&b, h, &[0]));
    assert!((back - array![[3.0, 5.0]]).iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn actnorm_identity_at_init() {
    let an = ActNorm::new("an", 3, 4);
    let mut params = ParamSet::new();
    an.init(&mut params);
    let g = Tape::new();
    let b = Bound::new(&g, &params);
    let x = array![[0.3, -1.0, 2.0, 4.0], [1.0, 1.0, 1.0, 1.0]];
    let (h, ld) = an.forward(&b, g.constant(x.clone()), &[2, 0]);
    assert_eq!(g.value(h), x);
    assert!(g.value(ld).iter().all(|&v| v == 0.0));
}

#[test]
fn invlinear_diagonal_example() {
    let lin = InvLinear::new("w", 2);
    let mut params = ParamSet::new();
    lin.init_from(&mut params, &array![[2.0f64, 0.0], [0.0, 0.5]])
        .unwrap();
    let g = Tape::new();
    let b = Bound::new(&g, &params);
    let (h, ld) = lin.forward(&b, g.constant(array![[1.0, 2.0]]));
    assert!((g.value(h) - array![[2.0, 1.0]])
        .iter()
        .all(|v| v.abs() < 1e-12));
    assert!(g.scalar(ld).abs() < 1e-12);
}

#[test]
fn invlinear_rotation_has_zero_logdet_and_reconstructs_w() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let w: Array2<f64> = talkflow_core::numerics::linalg::random_rotation(6, &mut rng);
    let lin = InvLinear::new("w", 6);
    let mut params = ParamSet::new();
    lin.init_from(&mut params, &w).unwrap();
    let g = Tape::new();
    let b = Bound::new(&g, &params);
    let rebuilt = g.value(lin.weight(&b));
    assert!((rebuilt - &w).iter().all(|v| v.abs() < 1e-12));
    assert!(g.scalar(lin.logdet(&b)).abs() < 1e-8);
}

#[test]
fn invlinear_logdet_matches_cofactor_determinant() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let w = rand_mat(&mut rng, 4, 4, 1.0) + Array2::<f64>::eye(4);
    let lin = InvLinear::new("w", 4);
    let mut params = ParamSet::new();
    lin.init_from(&mut params, &w).unwrap();
    jitter(&mut params, &mut rng, 0.2);
    let g = Tape::new();
    let b = Bound::new(&g, &params);
    let dense = g.value(lin.weight(&b));
    let oracle = cofactor_det(&dense).abs().ln();
    assert!((g.scalar(lin.logdet(&b)) - oracle).abs() < 1e-10);
    let x = rand_mat(&mut rng, 3, 4, 1.0);
    let (y, _) = lin.forward(&b, g.constant(x.clone()));
    assert!((g.value(lin.inverse(&b, y)) - x)
        .iter()
        .all(|v| v.abs() < 1e-10));
}

#[test]
fn coupling_identity_at_init_and_hand_example() {
    let cp = Coupling::new("cp", 2, 1, 4, false);
    let mut params = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    cp.init(&mut params, &mut rng);
    let g = Tape::new();
    let b = Bound::new(&g, &params);
    let x = g.constant(array![[1.0, 3.0]]);
    let c = g.constant(array![[0.7]]);
    let (h, ld) = cp.forward(&b, x, c);
    assert_eq!(g.value(h), array![[1.0, 3.0]]);
    assert_eq!(g.scalar(ld), 0.0);

    // zero weights, output bias fixes t = 0.5 and s = 2
    params
        .get_mut("cp.net.2.b")
        .unwrap()
        .assign(&array![[0.5, 2f64.ln()]]);
    let g = Tape::new();
    let b = Bound::new(&g, &params);
    let (h, ld) = cp.forward(
        &b,
        g.constant(array![[1.0, 3.0]]),
        g.constant(array![[0.7]]),
    );
    assert!((g.value(h) - array![[1.0, 7.0]])
        .iter()
        .all(|v| v.abs() < 1e-12));
    assert!((g.scalar(ld) - 2f64.ln()).abs() < 1e-12);
}

#[test]
fn coupling_scale_is_clamped() {
    let cp = Coupling::new("cp", 2, 1, 4, true);
    let mut params = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    cp.init(&mut params, &mut rng);
    params
        .get_mut("cp.net.2.b")
        .unwrap()
        .assign(&array![[0.0, 40.0]]);
    let g = Tape::new();
    let b = Bound::new(&g, &params);
    let (h, ld) = cp.forward(
        &b,
        g.constant(array![[1.0, 3.0]]),
        g.constant(array![[0.0]]),
    );
    assert_eq!(g.scalar(ld), 5.0);
    // swapped: the first coordinate is the transformed one
    assert!((g.value(h)[[0, 0]] - 5f64.exp()).abs() < 1e-9);
    assert_eq!(g.value(h)[[0, 1]], 3.0);
}

#[test]
fn stack_identity_init_is_identity() {
    let (flow, params) = stack(8, 3, 2, 3, 1, LinearInit::Identity);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = rand_mat(&mut rng, 5, 8, 2.0);
    let c = rand_mat(&mut rng, 5, 3, 1.0);
    let (z, ld) = flow
        .eval_forward(&params, &x, &c, &[0, 1, 1, 0, 1])
        .unwrap();
    assert!((&z - &x).iter().all(|v| v.abs() < 1e-14));
    assert!(ld.iter().all(|&v| v == 0.0));
    let back = flow
        .eval_inverse(&params, &x, &c, &[0, 1, 1, 0, 1])
        .unwrap();
    assert!((back - &x).iter().all(|v| v.abs() < 1e-14));
}

#[test]
fn stack_roundtrip_at_full_size() {
    let cfg = FlowConfig {
        dim: 64,
        ctx_dim: 20,
        classes: 4,
        steps: 8,
        hidden: 128,
    };
    let flow = FlowStack::new("flow", cfg).unwrap();
    let mut params = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    flow.init(&mut params, &mut rng, LinearInit::Rotation)
        .unwrap();
    jitter(&mut params, &mut rng, 0.05);
    let x = rand_mat(&mut rng, 50, 64, 3.0);
    let c = rand_mat(&mut rng, 50, 20, 1.0);
    let classes: Vec<usize> = (0..50).map(|i| i % 4).collect();
    let (z, _) = flow.eval_forward(&params, &x, &c, &classes).unwrap();
    let back = flow.eval_inverse(&params, &z, &c, &classes).unwrap();
    let err = (back - &x).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(err < 1e-6, "roundtrip error {err}");
}

/// Total logdet against `log|det J|` of a central-difference Jacobian.
fn logdet_vs_jacobian(dim: usize, seed: u64) {
    let (flow, mut params) = stack(dim, 2, 3, 2, seed, LinearInit::Rotation);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    jitter(&mut params, &mut rng, 0.3);
    let x = rand_mat(&mut rng, 1, dim, 1.5);
    let c = rand_mat(&mut rng, 1, 2, 1.0);
    let (_, ld) = flow.eval_forward(&params, &x, &c, &[1]).unwrap();
    let h = 1e-5;
    let mut jac = Array2::zeros((dim, dim));
    for j in 0..dim {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[[0, j]] += h;
        xm[[0, j]] -= h;
        let zp = flow.eval_forward(&params, &xp, &c, &[1]).unwrap().0;
        let zm = flow.eval_forward(&params, &xm, &c, &[1]).unwrap().0;
        for i in 0..dim {
            jac[[i, j]] = (zp[[0, i]] - zm[[0, i]]) / (2.0 * h);
        }
    }
    let oracle = cofactor_det(&jac).abs().ln();
    let analytic = ld[[0, 0]];
    let rel = (analytic - oracle).abs() / analytic.abs().max(oracle.abs()).max(1e-8);
    assert!(
        rel < 1e-3,
        "dim {dim}: analytic {analytic} vs oracle {oracle}"
    );
}

#[test]
fn logdet_matches_finite_difference_jacobian() {
    for (dim, seed) in [(4, 1), (6, 2), (8, 3)] {
        logdet_vs_jacobian(dim, seed);
    }
}

#[test]
fn context_changes_the_inverse() {
    let (flow, mut params) = stack(6, 2, 1, 2, 4, LinearInit::Rotation);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    jitter(&mut params, &mut rng, 0.2);
    let z = rand_mat(&mut rng, 1, 6, 1.0);
    let a = flow
        .eval_inverse(&params, &z, &array![[0.0, 1.0]], &[0])
        .unwrap();
    let b = flow
        .eval_inverse(&params, &z, &array![[1.0, -1.0]], &[0])
        .unwrap();
    assert!((a - b).iter().fold(0.0f64, |m, v| m.max(v.abs())) > 0.0);
}

#[test]
fn splitting_the_stack_preserves_the_total() {
    let (flow, mut params) = stack(6, 2, 2, 4, 5, LinearInit::Rotation);
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    jitter(&mut params, &mut rng, 0.2);
    let x = rand_mat(&mut rng, 3, 6, 1.0);
    let c = rand_mat(&mut rng, 3, 2, 1.0);
    let classes = [0, 1, 0];
    let g = Tape::new();
    let b = Bound::new(&g, &params);
    let (xv, cv) = (g.constant(x), g.constant(c));
    let (z, ld) = flow.forward(&b, xv, cv, &classes).unwrap();
    for split in 1..4 {
        let (mid, ld1) = flow.forward_range(&b, xv, cv, &classes, 0..split).unwrap();
        let (z2, ld2) = flow.forward_range(&b, mid, cv, &classes, split..4).unwrap();
        assert!((g.value(z2) - g.value(z)).iter().all(|v| v.abs() < 1e-12));
        let total = g.value(ld1) + g.value(ld2);
        assert!((total - g.value(ld)).iter().all(|v| v.abs() < 1e-12));
    }
}

#[test]
fn out_of_range_class_is_rejected() {
    let (flow, params) = stack(4, 1, 2, 1, 6, LinearInit::Identity);
    let x = Array2::zeros((1, 4));
    let c = Array2::zeros((1, 1));
    assert!(flow.eval_forward(&params, &x, &c, &[2]).is_err());
    assert!(flow.eval_inverse(&params, &x, &c, &[5]).is_err());
}

#[test]
fn odd_dimension_is_a_config_error() {
    let cfg = FlowConfig {
        dim: 5,
        ctx_dim: 1,
        classes: 1,
        steps: 1,
        hidden: 4,
    };
    assert!(FlowStack::new("f", cfg).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn roundtrip_for_random_inputs(seed in 0u64..10_000, class in 0usize..3, scale in 0.1f64..4.0) {
        let (flow, mut params) = stack(8, 3, 3, 3, seed, LinearInit::Rotation);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        jitter(&mut params, &mut rng, 0.2);
        let x = rand_mat(&mut rng, 4, 8, scale);
        let c = rand_mat(&mut rng, 4, 3, 1.0);
        let classes = [class; 4];
        let (z, _) = flow.eval_forward(&params, &x, &c, &classes).unwrap();
        let back = flow.eval_inverse(&params, &z, &c, &classes).unwrap();
        prop_assert!((back - &x).iter().all(|v| v.abs() < 1e-9));
    }
}
