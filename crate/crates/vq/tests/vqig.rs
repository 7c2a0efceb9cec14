use ndarray::{array, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use talkflow_core::generators::{TrainConfig, Trainer};
use talkflow_core::numerics::{grad_check, Bound, ParamSet, Tape};
use talkflow_core::Error;
use talkflow_vq::autoencoder::*;
use talkflow_vq::codebook::lookup;
use talkflow_vq::patches::*;
use talkflow_vq::train::VqigObjective;
use talkflow_vq::vqig::*;

fn ae_config() -> AeConfig {
    AeConfig {
        resolution: 8,
        grid: 2,
        code_dim: 4,
        codebook_size: 6,
        base_channels: 3,
        max_channels: 4,
        lambda_feat: 0.25,
        lambda_adv: 0.0,
        perceptual: PerceptualKind::RandomConv,
    }
}

fn config() -> VqigConfig {
    VqigConfig {
        sigma_dim: 3,
        beta_dim: 4,
        pose_dim: 2,
        warp_grid: 2,
        max_disp: 0.25,
        heads: 2,
        layers: 1,
        hidden: 6,
        lambda_feat: 0.25,
        lambda_adv: 0.0,
        image_weight: 1.0,
        warmup: 0,
    }
}

fn model(cfg: VqigConfig) -> VqigModel<f64> {
    let mut ae = PatchAutoencoder::<f64>::new(ae_config(), 3).unwrap();
    ae.init_codebook_from(&stack_images(&patch_corpus(6, 8, 4, 1)), 1)
        .unwrap();
    VqigModel::new(cfg, &ae, 5).unwrap()
}

fn pairs(n: usize, seed: u64) -> Vec<PatchPair> {
    pair_corpus(n, 8, 4, 4, 2, seed)
}

fn randomize(params: &mut ParamSet<f64>, prefix: &str, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, v) in params.iter_mut() {
        if name.starts_with(prefix) {
            v.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        }
    }
}

#[test]
fn zero_mapper_gives_zero_motion() {
    let mut m = model(config());
    for (name, v) in m.params.iter_mut() {
        if name.starts_with("vqig.map") {
            v.fill(0.0);
        }
    }
    let sigma = m.map_motion(&[0.3, -1.0, 2.0, 0.1], &[0.5, -0.5]).unwrap();
    assert!(sigma.iter().all(|&v| v == 0.0));
}

#[test]
fn zero_motion_warp_is_identity() {
    let m = model(config());
    let img = render(
        &FaceIdentity::sample(&mut ChaCha8Rng::seed_from_u64(2)),
        &Motion::neutral(),
        1,
        8,
    );
    let out = m.warp_image(&img, &Array2::zeros((1, 3))).unwrap();
    assert!((out - &img).iter().all(|v| v.abs() <= 1e-6));
}

#[test]
fn unit_shift_samples_the_neighbour_with_clamped_border() {
    let g = Tape::<f64>::new();
    let img = Array2::from_shape_fn((16, 1), |(r, _)| r as f64);
    let mut disp = Array2::zeros((16, 2));
    disp.column_mut(0).fill(1.0);
    let out = g.value(g.grid_sample(g.constant(img), g.constant(disp), 4, 4));
    for y in 0..4 {
        for x in 0..4 {
            assert_eq!(out[[y * 4 + x, 0]], (y * 4 + (x + 1).min(3)) as f64);
        }
    }
}

#[test]
fn warp_and_mapper_gradients_match_differences() {
    let mut m = model(config());
    randomize(&mut m.params, "vqig.warp", 7);
    let img = render(
        &FaceIdentity::sample(&mut ChaCha8Rng::seed_from_u64(3)),
        &Motion::neutral(),
        2,
        8,
    );
    let coeffs = array![[0.4, -0.3, 0.8, 0.1, 0.6, -0.2]];
    let weights =
        Array2::from_shape_fn((64, 3), |(r, c)| ((r * 7 + c * 3) % 11) as f64 / 11.0 - 0.5);
    let mut subset = m.params.clone();
    for name in m.params.names() {
        if !(name.starts_with("vqig.warp") || name.starts_with("vqig.map")) {
            subset.set_trainable(name, false).unwrap();
        }
    }
    let report = grad_check(
        |p: &ParamSet<f64>| {
            let g = Tape::new();
            let b = Bound::new(&g, p);
            let sigma = m.sigma_tape(&b, g.constant(coeffs.clone()));
            let w = m.warp_tape(&b, g.constant(img.clone()), sigma, 1);
            let loss = g.sum_all(g.mul(w, g.constant(weights.clone())));
            let v = g.scalar(loss);
            Ok((v, b.grads(&g.backward(loss))))
        },
        &subset,
        1e-6,
        1e-3,
    )
    .unwrap();
    assert!(report.passed, "{:?}", report.worst());
}

#[test]
fn attention_rows_are_distributions() {
    let m = model(config());
    let vb = VqigBatch::new(&m, &pairs(2, 4).iter().collect::<Vec<_>>()).unwrap();
    let g = Tape::new();
    let b = Bound::new(&g, &m.params);
    let f = m
        .forward(
            &b,
            g.constant(vb.source.clone()),
            g.constant(vb.z_c.clone()),
            g.constant(vb.coeffs.clone()),
            2,
        )
        .unwrap();
    assert_eq!(f.attn_probs.len(), 2);
    for p in f.attn_probs {
        let p = g.value(p);
        assert_eq!(p.dim(), (8, 4));
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }
}

#[test]
fn single_cell_attention_returns_the_value_projection() {
    let att = CrossAttention::new("a", 4, 2);
    let mut params = ParamSet::new();
    att.init(&mut params, &mut ChaCha8Rng::seed_from_u64(1));
    let g = Tape::<f64>::new();
    let b = Bound::new(&g, &params);
    let query = g.constant(array![[0.3, -0.1, 0.5, 2.0]]);
    let context = g.constant(array![[1.0, 0.2, -0.7, 0.4]]);
    let (out, _) = att.forward(&b, query, context, 1);
    let want = att.o.forward(&b, att.v.forward(&b, context));
    assert!((g.value(out) - g.value(want))
        .iter()
        .all(|v| v.abs() < 1e-12));
}

#[test]
fn adain_passes_through_at_init_and_sets_statistics() {
    let ada = AdaIn::new("n", 2, 3);
    let mut params = ParamSet::new();
    ada.init(&mut params, &mut ChaCha8Rng::seed_from_u64(0));
    let x = Array2::from_shape_fn((8, 3), |(r, c)| ((r * 5 + c * 2) % 7) as f64 - 3.0);
    let g = Tape::<f64>::new();
    let b = Bound::new(&g, &params);
    let out = ada.forward(
        &b,
        g.constant(x.clone()),
        g.constant(array![[0.4, -1.2], [2.0, 0.3]]),
        4,
    );
    assert!((g.value(out) - &x).iter().all(|v| v.abs() < 1e-15));

    let gamma = array![[2.0, 0.5, 1.0], [3.0, 1.0, 0.0]];
    let beta = array![[1.0, -1.0, 0.0], [0.0, 0.5, 2.0]];
    let y = g.value(adain_apply(
        &g,
        g.constant(x.clone()),
        g.constant(gamma.clone()),
        g.constant(beta.clone()),
        4,
    ));
    for s in 0..2 {
        for c in 0..3 {
            let xs: Vec<f64> = (0..4).map(|r| x[[s * 4 + r, c]]).collect();
            let ys: Vec<f64> = (0..4).map(|r| y[[s * 4 + r, c]]).collect();
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            let std = |v: &[f64]| {
                (v.iter().map(|a| (a - mean(v)).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
            };
            assert!((mean(&ys) - mean(&xs) - beta[[s, c]]).abs() < 1e-3);
            assert!((std(&ys) - gamma[[s, c]].abs() * std(&xs)).abs() < 1e-3);
        }
    }
}

#[test]
fn argmax_and_lookup() {
    assert_eq!(
        argmax_rows(&array![[0.5, 0.5, 0.1], [0.0, 0.0, 0.0]]),
        vec![0, 0]
    );
    let mut onehot = Array2::<f64>::zeros((4, 64));
    onehot.column_mut(7).fill(1.0);
    assert_eq!(argmax_rows(&onehot), vec![7; 4]);
    let book = Array2::from_shape_fn((64, 3), |(r, c)| (r * 3 + c) as f64 * 0.1);
    let codes = lookup(book.view(), &argmax_rows(&onehot)).unwrap();
    for row in codes.rows() {
        assert_eq!(row, book.row(7));
    }
}

#[test]
fn code_cross_entropy_values() {
    let uniform = Array2::<f64>::zeros((3, 64));
    let ce = code_cross_entropy(&uniform, &[0, 5, 63]).unwrap();
    assert!((ce - 64f64.ln()).abs() < 1e-12);
    assert!((ce - 4.15888).abs() < 1e-5);
    let mut peaked = Array2::<f64>::zeros((1, 64));
    peaked[[0, 9]] = 60.0;
    assert!(code_cross_entropy(&peaked, &[9]).unwrap() < 1e-20);
    assert!(matches!(
        code_cross_entropy(&uniform, &[0, 1, 64]),
        Err(Error::Argument(_))
    ));
}

#[test]
fn feature_loss_vanishes_on_exact_match() {
    let g = Tape::<f64>::new();
    let z = g.constant(array![[0.3, 1.0], [-2.0, 0.5]]);
    let v = cell_mean(&g, g.square(g.sub(z, z)));
    assert_eq!(g.scalar(v), 0.0);
}

fn check_vqig(cfg: VqigConfig) {
    let mut m = model(cfg);
    randomize(&mut m.params, "vqig.adain", 8);
    randomize(&mut m.params, "vqig.img_adain", 9);
    let train = pairs(2, 6);
    let vb = VqigBatch::new(&m, &train.iter().collect::<Vec<_>>()).unwrap();
    let frozen = m.frozen_lookup(&m.params, &vb).unwrap();
    let (_, live) = m.loss_and_grads(&m.params, &vb, 1.0, None).unwrap();
    let (_, surrogate) = m
        .loss_and_grads(&m.params, &vb, 1.0, Some(&frozen))
        .unwrap();
    assert!(live.max_abs_diff(&surrogate) < 1e-12);

    let is_disc = |n: &str| n.starts_with("vqig.disc");
    let mut gen_side = m.params.clone();
    let mut critic_side = m.params.clone();
    for name in m.params.trainable_names() {
        if is_disc(name) {
            gen_side.set_trainable(name, false).unwrap();
        } else {
            critic_side.set_trainable(name, false).unwrap();
        }
    }
    let report = grad_check(
        |p: &ParamSet<f64>| {
            let (t, g) = m.loss_and_grads(p, &vb, 1.0, Some(&frozen))?;
            Ok((t.total + t.adv_disc, g))
        },
        &gen_side,
        1e-4,
        1e-3,
    )
    .unwrap();
    assert!(report.passed, "{:?}", report.worst());
    if cfg.lambda_adv > 0.0 {
        let report = grad_check(
            |p: &ParamSet<f64>| {
                let (t, g) = m.loss_and_grads(p, &vb, 1.0, Some(&frozen))?;
                Ok((-t.adv_disc, g))
            },
            &critic_side,
            1e-4,
            1e-3,
        )
        .unwrap();
        assert!(report.passed, "{:?}", report.worst());
    }
}

#[test]
fn vqig_gradients_match_differences() {
    check_vqig(config());
}

#[test]
fn vqig_adversarial_gradients_match_differences() {
    check_vqig(VqigConfig {
        lambda_adv: 0.8,
        ..config()
    });
}

#[test]
fn invalid_code_targets_are_rejected() {
    let m = model(config());
    let mut vb = VqigBatch::new(&m, &pairs(1, 2).iter().collect::<Vec<_>>()).unwrap();
    vb.s_gt[0] = 6;
    assert!(matches!(
        m.loss_and_grads(&m.params, &vb, 0.0, None),
        Err(Error::Argument(_))
    ));
}

#[test]
fn grid_mismatch_is_rejected() {
    let m = model(config());
    let g = Tape::new();
    let b = Bound::new(&g, &m.params);
    let r = m.fuse_and_attend(
        &b,
        g.constant(Array2::zeros((4, 4))),
        g.constant(Array2::zeros((5, 4))),
        g.constant(Array2::zeros((1, 3))),
        1,
    );
    assert!(matches!(r, Err(Error::Argument(_))));
}

#[test]
fn warmup_gates_image_terms() {
    let m = model(VqigConfig {
        warmup: 10,
        ..config()
    });
    assert_eq!(m.image_weight(9), 0.0);
    assert_eq!(m.image_weight(10), 1.0);
}

#[test]
fn training_leaves_frozen_parts_untouched_and_is_seeded() {
    let run = || {
        let m = model(config());
        let before = m.frozen_params();
        let obj = VqigObjective::new(m, pairs(8, 11)).unwrap();
        let cfg = TrainConfig {
            steps: 8,
            batch: 2,
            seed: 4,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(obj, cfg).unwrap();
        t.run().unwrap();
        (before, t)
    };
    let (before, a) = run();
    let (_, b) = run();
    assert_eq!(a.history, b.history);
    let after = a.objective.model.frozen_params();
    for ((n, x), (_, y)) in before.iter().zip(after.iter()) {
        assert_eq!(x, y, "{n}");
    }
    assert_ne!(
        a.objective.model.params.expect("vqig.map.w"),
        model(config()).params.expect("vqig.map.w")
    );
}

#[test]
fn animation_is_deterministic_and_checks_resolution() {
    let m = model(config());
    let src = render(
        &FaceIdentity::sample(&mut ChaCha8Rng::seed_from_u64(1)),
        &Motion::neutral(),
        0,
        8,
    );
    let betas = array![
        [0.1, 0.2, 0.3, 0.4],
        [0.1, 0.2, 0.3, 0.4],
        [-1.0, 0.0, 1.0, 0.5]
    ];
    let rhos = array![[0.0, 0.0], [0.0, 0.0], [0.3, -0.2]];
    let a = m.animate(&src, &betas, &rhos).unwrap();
    assert_eq!(a.len(), 3);
    assert_eq!(a[0], a[1]);
    assert_eq!(a, m.animate(&src, &betas, &rhos).unwrap());
    let big = Array2::zeros((256, 3));
    assert!(matches!(
        m.animate(&big, &betas, &rhos),
        Err(Error::Config(_))
    ));
}

#[test]
fn config_validation() {
    assert!(VqigConfig::default().validate(&AeConfig::default()).is_ok());
    assert!(matches!(
        VqigConfig {
            heads: 3,
            ..config()
        }
        .validate(&ae_config()),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        VqigConfig {
            max_disp: 0.0,
            ..config()
        }
        .validate(&ae_config()),
        Err(Error::Config(_))
    ));
}
