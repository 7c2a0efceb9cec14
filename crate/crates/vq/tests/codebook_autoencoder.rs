use ndarray::{array, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use talkflow_core::generators::{TrainConfig, Trainer};
use talkflow_core::numerics::{grad_check, Bound, ParamSet, Tape};
use talkflow_core::Error;
use talkflow_vq::autoencoder::*;
use talkflow_vq::codebook::*;
use talkflow_vq::conv::*;
use talkflow_vq::patches::*;
use talkflow_vq::train::AeObjective;

fn tiny_config() -> AeConfig {
    AeConfig {
        resolution: 8,
        grid: 2,
        code_dim: 4,
        codebook_size: 6,
        base_channels: 3,
        max_channels: 4,
        lambda_feat: 0.25,
        lambda_adv: 0.0,
        perceptual: PerceptualKind::Identity,
    }
}

fn tiny_images(n: usize, seed: u64) -> Array2<f64> {
    stack_images(&patch_corpus(n, 8, 4, seed))
}

fn brute_force(z: &Array2<f64>, codes: &Array2<f64>) -> Vec<usize> {
    z.rows()
        .into_iter()
        .map(|cell| {
            let d: Vec<f64> = codes
                .rows()
                .into_iter()
                .map(|c| {
                    c.iter()
                        .zip(cell.iter())
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum()
                })
                .collect();
            let min = d.iter().cloned().fold(f64::INFINITY, f64::min);
            d.iter().position(|&v| v == min).unwrap()
        })
        .collect()
}

#[test]
fn quantize_hand_examples() {
    let codes = array![[0.0, 0.0], [1.0, 1.0]];
    let (_, idx) = quantize(array![[0.2, 0.1]].view(), codes.view()).unwrap();
    assert_eq!(idx, vec![0]);
    let (_, idx) = quantize(array![[0.5, 0.5]].view(), codes.view()).unwrap();
    assert_eq!(idx, vec![0]);

    let book = array![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.3, -0.7], [2.0, 2.0]];
    let (zc, idx) = quantize(array![[0.3, -0.7]].view(), book.view()).unwrap();
    assert_eq!(idx, vec![3]);
    assert_eq!(zc.row(0), book.row(3));
    assert!(matches!(
        quantize(array![[1.0]].view(), book.view()),
        Err(Error::Argument(_))
    ));
}

proptest! {
    #[test]
    fn quantize_matches_brute_force_and_is_idempotent(seed in 0u64..10_000, cells in 1usize..40, n in 2usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = Array2::from_shape_fn((cells, 3), |_| rng.random_range(-2.0..2.0));
        let book = Array2::from_shape_fn((n, 3), |_| rng.random_range(-2.0..2.0));
        let (zc, idx) = quantize(z.view(), book.view()).unwrap();
        prop_assert_eq!(&idx, &brute_force(&z, &book));
        let (zc2, idx2) = quantize(zc.view(), book.view()).unwrap();
        prop_assert_eq!(idx2, idx);
        prop_assert_eq!(zc2, zc);
    }
}

#[test]
fn codebook_loss_values() {
    let z = array![[0.3, -1.0], [2.0, 0.5]];
    assert_eq!(codebook_losses(z.view(), z.view()).unwrap(), (0.0, 0.0));
    let (code, feat) =
        codebook_losses(array![[1.0, 1.0]].view(), array![[0.0, 0.0]].view()).unwrap();
    assert_eq!((code, feat), (2.0, 2.0));
    assert!(codebook_losses(z.view(), array![[1.0, 1.0]].view()).is_err());
}

#[test]
fn stop_gradients_hold_exactly() {
    let ae = PatchAutoencoder::<f64>::new(tiny_config(), 1).unwrap();
    let images = tiny_images(2, 2);
    for which in ["code", "feat"] {
        let g = Tape::new();
        let b = Bound::new(&g, &ae.params);
        let z_h = ae.encoder.forward(&b, g.constant(images.clone()), 2);
        let q = quantize_tape(&b, z_h, b.p(CODEBOOK), None).unwrap();
        let out = if which == "code" { q.code } else { q.feat };
        let grads = b.grads(&g.backward(out));
        let enc_zero = ae
            .encoder
            .convs()
            .all(|c| grads.expect(&c.weight).iter().all(|&v| v == 0.0));
        let book_zero = grads.expect(CODEBOOK).iter().all(|&v| v == 0.0);
        if which == "code" {
            assert!(enc_zero && !book_zero);
        } else {
            assert!(book_zero && !enc_zero);
        }
    }
}

#[test]
fn straight_through_copies_the_gradient() {
    let g = Tape::<f64>::new();
    let z_h = g.leaf(array![[0.1, -0.4], [0.7, 0.2]]);
    let z_c = array![[0.0, -0.5], [1.0, 0.0]];
    let st = g.straight_through(z_c.clone(), z_h);
    assert_eq!(g.value(st), z_c);
    let loss = g.sum_all(g.square(st));
    let grad = g.backward(loss).wrt(z_h);
    assert_eq!(grad, z_c.mapv(|v| 2.0 * v));
}

#[test]
fn autoencoder_gradients_match_frozen_surrogate() {
    let mut params_seed = 0;
    for perceptual in [PerceptualKind::Identity, PerceptualKind::RandomConv] {
        params_seed += 1;
        let cfg = AeConfig {
            perceptual,
            ..tiny_config()
        };
        let ae = PatchAutoencoder::<f64>::new(cfg, params_seed).unwrap();
        let images = tiny_images(2, 3);
        let frozen = ae.freeze_point(&ae.params, &images).unwrap();
        let (_, live) = ae.loss_and_grads(&ae.params, &images, None).unwrap();
        let (_, surrogate) = ae
            .loss_and_grads(&ae.params, &images, Some(&frozen))
            .unwrap();
        assert!(live.max_abs_diff(&surrogate) < 1e-12);
        let report = grad_check(
            |p: &ParamSet<f64>| {
                let (t, g) = ae.loss_and_grads(p, &images, Some(&frozen))?;
                Ok((t.total, g))
            },
            &ae.params,
            1e-5,
            1e-3,
        )
        .unwrap();
        assert!(report.passed, "{perceptual:?}: {:?}", report.worst());
    }
}

#[test]
fn adversarial_terms_check_and_vanish_at_zero_weight() {
    let cfg = AeConfig {
        lambda_adv: 0.8,
        ..tiny_config()
    };
    let ae = PatchAutoencoder::<f64>::new(cfg, 4).unwrap();
    let images = tiny_images(2, 5);
    let frozen = ae.freeze_point(&ae.params, &images).unwrap();
    let disc: Vec<String> = ae
        .params
        .names()
        .filter(|n| n.starts_with("ae.disc"))
        .map(String::from)
        .collect();

    let mut gen_side = ae.params.clone();
    for n in &disc {
        gen_side.set_trainable(n, false).unwrap();
    }
    let report = grad_check(
        |p: &ParamSet<f64>| {
            let (t, g) = ae.loss_and_grads(p, &images, Some(&frozen))?;
            Ok((t.total + t.adv_disc, g))
        },
        &gen_side,
        1e-5,
        1e-3,
    )
    .unwrap();
    assert!(report.passed, "{:?}", report.worst());

    let mut critic_side = ae.params.clone();
    let others: Vec<String> = critic_side
        .trainable_names()
        .filter(|n| !n.starts_with("ae.disc"))
        .map(String::from)
        .collect();
    for n in &others {
        critic_side.set_trainable(n, false).unwrap();
    }
    let report = grad_check(
        |p: &ParamSet<f64>| {
            let (t, g) = ae.loss_and_grads(p, &images, Some(&frozen))?;
            Ok((-t.adv_disc, g))
        },
        &critic_side,
        1e-5,
        1e-3,
    )
    .unwrap();
    assert!(report.passed, "{:?}", report.worst());

    let mut off = ae.clone();
    off.config.lambda_adv = 0.0;
    let (_, grads) = off.loss_and_grads(&off.params, &images, None).unwrap();
    for (name, g) in grads.iter() {
        if name.starts_with("ae.disc") {
            assert!(g.iter().all(|&v| v == 0.0), "{name}");
        }
    }
}

#[test]
fn adversarial_objective_values() {
    let v = adv_objective(&[0.5, 0.5], &[0.5]).unwrap();
    assert!((v - 2.0 * 0.5f64.ln()).abs() < 1e-15);
    assert!((v + 1.38629).abs() < 1e-5);
    let mut last = f64::NEG_INFINITY;
    for eps in [1e-2, 1e-4, 1e-8] {
        let v = adv_objective(&[1.0 - eps], &[eps]).unwrap();
        assert!(v < 0.0 && v > last);
        last = v;
    }
    assert!(last > -1e-7);
    assert!(matches!(
        adv_objective(&[1.0], &[0.2]),
        Err(Error::Numeric(_))
    ));
    assert!(matches!(
        adv_objective(&[0.5], &[0.0]),
        Err(Error::Numeric(_))
    ));
}

#[test]
fn reconstruction_loss_values() {
    let img = Array2::from_shape_fn((16, 3), |(r, c)| ((r * 3 + c) % 7) as f64 / 7.0);
    assert_eq!(recon_losses(img.view(), img.view()).unwrap(), (0.0, 0.0));
    let shifted = &img + 0.5;
    let (rec, per) = recon_losses(img.view(), shifted.view()).unwrap();
    assert!((rec - 0.5).abs() < 1e-15);
    assert!((per - 0.25).abs() < 1e-15);
}

/// Direct sum over taps, independent of the gather path.
fn naive_conv(
    x: &Array2<f64>,
    w: &Array2<f64>,
    bias: &Array2<f64>,
    h: usize,
    cin: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Array2<f64> {
    let ho = (h + 2 * pad - k) / stride + 1;
    let cout = w.ncols();
    let mut out = Array2::zeros((ho * ho, cout));
    for oy in 0..ho {
        for ox in 0..ho {
            for o in 0..cout {
                let mut s = bias[[0, o]];
                for ky in 0..k {
                    for kx in 0..k {
                        let y = (oy * stride + ky) as isize - pad as isize;
                        let xx = (ox * stride + kx) as isize - pad as isize;
                        if y < 0 || xx < 0 || y >= h as isize || xx >= h as isize {
                            continue;
                        }
                        for c in 0..cin {
                            s += x[[y as usize * h + xx as usize, c]]
                                * w[[(ky * k + kx) * cin + c, o]];
                        }
                    }
                }
                out[[oy * ho + ox, o]] = s;
            }
        }
    }
    out
}

#[test]
fn convolution_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for (k, stride, pad) in [(3, 1, 1), (4, 2, 1), (1, 1, 0)] {
        let conv = Conv2d::new("c", 2, 3, k, stride, pad);
        let mut params = ParamSet::new();
        conv.init(&mut params, &mut rng);
        params
            .get_mut("c.b")
            .unwrap()
            .assign(&array![[0.1, -0.2, 0.3]]);
        let x = Array2::from_shape_fn((36, 2), |_| rng.random_range(-1.0..1.0));
        let g = Tape::new();
        let b = Bound::new(&g, &params);
        let (y, ho, _) = conv.forward(&b, g.constant(x.clone()), 1, 6, 6);
        let want = naive_conv(
            &x,
            params.expect("c.w"),
            params.expect("c.b"),
            6,
            2,
            k,
            stride,
            pad,
        );
        assert_eq!(ho * ho, want.nrows());
        assert!((g.value(y) - want).iter().all(|v| v.abs() < 1e-12));
    }
}

#[test]
fn upsampling_and_bilinear_weights() {
    let g = Tape::<f64>::new();
    let x = g.constant(array![[1.0], [2.0], [3.0], [4.0]]);
    let up = g.value(upsample2(&g, x, 1, 2, 2));
    assert_eq!(
        up.column(0).to_vec(),
        vec![1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
    );
    let m = bilinear_matrix(3, 7);
    for row in m.rows() {
        assert!((row.sum() - 1.0).abs() < 1e-12);
    }
    assert_eq!(m[[0, 0]], 1.0);
    assert_eq!(m[[48, 8]], 1.0);
}

#[test]
fn patches_are_valid_and_keyed() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let id = FaceIdentity::sample(&mut rng);
    let base = render(&id, &Motion::neutral(), 0, 32);
    assert_eq!(base.dim(), (1024, 3));
    assert!(base.iter().all(|v| (0.0..=1.0).contains(v)));
    for class in 1..4 {
        assert_ne!(render(&id, &Motion::neutral(), class, 32), base);
    }
    let moved = Motion::from_coeffs(&[1.0; 12], &[0.5, -0.5, 0.0, 0.0, 0.0, 0.0]);
    assert_ne!(render(&id, &moved, 0, 32), base);
    assert_eq!(patch_corpus(3, 16, 4, 7), patch_corpus(3, 16, 4, 7));
}

#[test]
fn index_map_csv_layout() {
    assert_eq!(index_map_csv(&[1, 2, 3, 4], 2), "1,2\n3,4\n");
    assert_eq!(usage(&[0, 0, 3], 4), 0.5);
}

#[test]
fn configs_validate_and_paper_shape_plumbs() {
    assert!(AeConfig::default().validate().is_ok());
    let full = AeConfig::paper_shape();
    full.validate().unwrap();
    assert_eq!(full.stages(), 5);
    let ae = PatchAutoencoder::<f32>::new(full, 0).unwrap();
    assert_eq!(ae.codebook().dim(), (1024, 256));
    assert_eq!(ae.encoder.head.cout, 256);
    assert_eq!(ae.decoder.out.cout, 3);
    let bad = AeConfig {
        grid: 3,
        ..AeConfig::default()
    };
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
    let bad = AeConfig {
        codebook_size: 1,
        ..AeConfig::default()
    };
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
}

#[test]
fn wrong_resolution_is_rejected() {
    let ae = PatchAutoencoder::<f64>::new(tiny_config(), 0).unwrap();
    assert!(matches!(
        ae.encode(&Array2::zeros((63, 3))),
        Err(Error::Config(_))
    ));
}

fn short_run(seed: u64) -> Trainer<f64, AeObjective<f64>> {
    let ae = PatchAutoencoder::<f64>::new(tiny_config(), 0).unwrap();
    let obj = AeObjective::new(ae, patch_corpus(16, 8, 4, 1), Some(2)).unwrap();
    let cfg = TrainConfig {
        steps: 60,
        batch: 4,
        seed,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(obj, cfg).unwrap();
    t.run().unwrap();
    t
}

#[test]
fn training_is_seeded_and_reduces_error() {
    let a = short_run(1);
    let b = short_run(1);
    assert_eq!(a.history, b.history);
    let fresh = PatchAutoencoder::<f64>::new(tiny_config(), 0).unwrap();
    let probe = a.objective.all();
    let mut seeded = fresh.clone();
    seeded
        .init_codebook_from(&stack_images(&a.objective.images), 2)
        .unwrap();
    assert!(a.objective.model.recon_error(&probe).unwrap() < seeded.recon_error(&probe).unwrap());
}

#[test]
fn freezing_marks_everything_fixed() {
    let mut ae = PatchAutoencoder::<f64>::new(tiny_config(), 0).unwrap();
    ae.freeze();
    assert_eq!(ae.params.trainable_names().count(), 0);
    assert!(validate_codebook(ae.codebook().view()).is_ok());
}
