//! The twelve acceptance checks. Property checks (1–4) build their own toy
//! models; the rest read trained artifacts.

use std::f64::consts::PI;
use std::path::PathBuf;
use std::time::Instant;

use ndarray::{array, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use talkflow_core::context::{audio_energy, CoeffSequence, ContextConfig, SceneSpec, SignalAudio};
use talkflow_core::flow::{FlowConfig, FlowStack, LinearInit};
use talkflow_core::generators::{
    all_frames, emotion_transfer, rollout_expression, rollout_pose, ExpFlowConfig, ExpFlowModel,
    LatentBank, PoseFlowConfig, PoseFlowModel, RolloutOptions,
};
use talkflow_core::latent::Smm;
use talkflow_core::numerics::{grad_check, Bound, ParamSet, Tape};
use talkflow_core::{Error, Result};
use talkflow_vq::autoencoder::{AeConfig, PatchAutoencoder, PerceptualKind};
use talkflow_vq::codebook::{quantize, usage};
use talkflow_vq::patches::{patch_corpus, render, stack_images, FaceIdentity, Motion, PatchPair};
use talkflow_vq::vqig::{VqigBatch, VqigConfig, VqigModel};

use crate::analysis::{
    across_seed_variance, class_covariance_traces, lip_signal, mean_pairwise_l2,
    nearest_centroid_accuracy, pearson, step_lengths, trace_spread, OracleClassifier,
};
use crate::metrics::{Cmp, CriterionResult, Metric};

pub const TITLES: [&str; 12] = [
    "flow bijectivity",
    "log-determinant oracle",
    "density normalization",
    "gradient suite",
    "desk-scale ExpFlow run",
    "diversity vs determinism",
    "dropout ablation",
    "emotion transfer identity",
    "manifold projection",
    "VQ suite",
    "VQIG desk-scale",
    "PoseFlow",
];

/// Runs `body`, timing it and turning an error into a failed result.
pub fn run_criterion(id: u8, body: impl FnOnce() -> Result<Vec<Metric>>) -> CriterionResult {
    let t0 = Instant::now();
    let outcome = body();
    let seconds = t0.elapsed().as_secs_f64();
    let title = TITLES[id as usize - 1].to_string();
    match outcome {
        Ok(metrics) => CriterionResult {
            id,
            title,
            metrics,
            seconds,
            error: None,
        },
        Err(e) => CriterionResult {
            id,
            title,
            metrics: Vec::new(),
            seconds,
            error: Some(e.to_string()),
        },
    }
}

fn jitter(params: &mut ParamSet<f64>, rng: &mut ChaCha8Rng, scale: f64) {
    let names: Vec<String> = params.trainable_names().map(str::to_owned).collect();
    for n in names {
        params
            .get_mut(&n)
            .unwrap()
            .mapv_inplace(|v| v + rng.random_range(-scale..scale));
    }
}

fn flow_stack(cfg: FlowConfig, seed: u64, scale: f64) -> Result<(FlowStack, ParamSet<f64>)> {
    let flow = FlowStack::new("flow", cfg)?;
    let mut params = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    flow.init(&mut params, &mut rng, LinearInit::Rotation)?;
    jitter(&mut params, &mut rng, scale);
    Ok((flow, params))
}

pub fn bijectivity(seed: u64) -> CriterionResult {
    let t0 = Instant::now();
    run_criterion(1, || {
        let cfg = FlowConfig {
            dim: 64,
            ctx_dim: 80,
            classes: 4,
            steps: 8,
            hidden: 128,
        };
        let (flow, params) = flow_stack(cfg, seed, 0.05)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let n = 1000;
        let x = Array2::from_shape_fn((n, 64), |_| rng.random_range(-3.0..3.0));
        let c = Array2::from_shape_fn((n, 80), |_| rng.random_range(-1.0..1.0));
        let e: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let (z, _) = flow.eval_forward(&params, &x, &c, &e)?;
        let back = flow.eval_inverse(&params, &z, &c, &e)?;
        let err = (back - &x).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        Ok(vec![
            Metric::check(1, "max roundtrip error", err, "abs", Cmp::Lt, 1e-6),
            Metric::check(
                1,
                "bijectivity runtime",
                t0.elapsed().as_secs_f64(),
                "s",
                Cmp::Lt,
                10.0,
            ),
        ])
    })
}

/// Laplace expansion along the first row.
pub fn cofactor_det(m: &Array2<f64>) -> f64 {
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

pub fn logdet_oracle(seed: u64) -> CriterionResult {
    let t0 = Instant::now();
    run_criterion(2, || {
        let mut worst = 0.0f64;
        let mut points = 0;
        for dim in [4usize, 6, 8] {
            let cfg = FlowConfig {
                dim,
                ctx_dim: 3,
                classes: 2,
                steps: 2,
                hidden: 16,
            };
            let (flow, params) = flow_stack(cfg, seed + dim as u64, 0.3)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100 + dim as u64);
            for _ in 0..20 {
                let x = Array2::from_shape_fn((1, dim), |_| rng.random_range(-1.5..1.5));
                let c = Array2::from_shape_fn((1, 3), |_| rng.random_range(-1.0..1.0));
                let e = [rng.random_range(0..2)];
                let (_, ld) = flow.eval_forward(&params, &x, &c, &e)?;
                let h = 1e-5;
                let mut jac = Array2::zeros((dim, dim));
                for j in 0..dim {
                    let (mut xp, mut xm) = (x.clone(), x.clone());
                    xp[[0, j]] += h;
                    xm[[0, j]] -= h;
                    let zp = flow.eval_forward(&params, &xp, &c, &e)?.0;
                    let zm = flow.eval_forward(&params, &xm, &c, &e)?.0;
                    for i in 0..dim {
                        jac[[i, j]] = (zp[[0, i]] - zm[[0, i]]) / (2.0 * h);
                    }
                }
                let oracle = cofactor_det(&jac).abs().ln();
                let analytic = ld[[0, 0]];
                worst = worst
                    .max((analytic - oracle).abs() / analytic.abs().max(oracle.abs()).max(1e-8));
                points += 1;
            }
        }
        Ok(vec![
            Metric::info("points checked", points as f64, "count"),
            Metric::check(2, "max logdet relative error", worst, "rel", Cmp::Lt, 1e-3),
            Metric::check(
                2,
                "logdet runtime",
                t0.elapsed().as_secs_f64(),
                "s",
                Cmp::Lt,
                30.0,
            ),
        ])
    })
}

pub fn density_normalization() -> CriterionResult {
    let t0 = Instant::now();
    run_criterion(3, || {
        // x = tan θ maps the real line onto (−π/2, π/2); the integrand vanishes at the ends
        let lim = PI / 2.0;
        let m1 = Smm::new(array![[-1.5], [2.0]], 2.0)?;
        let n1 = 200_000;
        let h1 = 2.0 * lim / n1 as f64;
        let mut one = 0.0;
        for i in 1..n1 {
            let a = -lim + i as f64 * h1;
            one += m1.logpdf(array![a.tan()].view())?.exp() / a.cos().powi(2);
        }
        one *= h1;
        let m2 = Smm::new(array![[-1.0, 0.5], [1.5, -0.5]], 2.0)?;
        let n2 = 1200;
        let h2 = 2.0 * lim / n2 as f64;
        let mut two = 0.0;
        for i in 1..n2 {
            let a = -lim + i as f64 * h2;
            for j in 1..n2 {
                let b = -lim + j as f64 * h2;
                two += m2.logpdf(array![a.tan(), b.tan()].view())?.exp()
                    / (a.cos().powi(2) * b.cos().powi(2));
            }
        }
        two *= h2 * h2;
        Ok(vec![
            Metric::check(3, "1-D mass error", (one - 1.0).abs(), "abs", Cmp::Lt, 1e-3),
            Metric::check(3, "2-D mass error", (two - 1.0).abs(), "abs", Cmp::Lt, 1e-3),
            Metric::check(
                3,
                "density runtime",
                t0.elapsed().as_secs_f64(),
                "s",
                Cmp::Lt,
                10.0,
            ),
        ])
    })
}

fn small_context() -> ContextConfig {
    ContextConfig {
        tau: 2,
        audio_radius: 1,
        source_features: 4,
        audio_features: 4,
        previous_features: 4,
        emotion_features: 4,
    }
}

fn toy_sequences(
    classes: usize,
    dim: usize,
    len: usize,
    n: usize,
    seed: u64,
) -> Vec<CoeffSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| CoeffSequence {
            class: i % classes,
            coeffs: Array2::from_shape_fn((len, dim), |_| rng.random_range(-1.0..1.0)),
            pose: Array2::from_shape_fn((len, 6), |_| rng.random_range(-0.2..0.2)),
            audio: Array1::from_shape_fn(len, |_| rng.random_range(-1.0..1.0)),
        })
        .collect()
}

fn perturb(params: &mut ParamSet<f64>, prefix: &str, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = params
        .trainable_names()
        .filter(|n| n.starts_with(prefix))
        .map(str::to_owned)
        .collect();
    for n in names {
        params
            .get_mut(&n)
            .unwrap()
            .mapv_inplace(|v| v + rng.random_range(-scale..scale));
    }
}

/// Trainable set restricted to names for which `keep` holds.
fn only(params: &ParamSet<f64>, keep: impl Fn(&str) -> bool) -> ParamSet<f64> {
    let mut out = params.clone();
    let names: Vec<String> = params
        .trainable_names()
        .filter(|n| !keep(n))
        .map(str::to_owned)
        .collect();
    for n in names {
        out.set_trainable(&n, false).unwrap();
    }
    out
}

fn worst(report: &talkflow_core::numerics::GradCheckReport<f64>) -> f64 {
    report
        .entries
        .iter()
        .map(|e| e.max_rel_err)
        .fold(0.0, f64::max)
}

fn tiny_ae(lambda_adv: f64) -> AeConfig {
    AeConfig {
        resolution: 8,
        grid: 2,
        code_dim: 4,
        codebook_size: 6,
        base_channels: 3,
        max_channels: 4,
        lambda_feat: 0.25,
        lambda_adv,
        perceptual: PerceptualKind::RandomConv,
    }
}

pub fn gradient_suite(seed: u64) -> CriterionResult {
    let t0 = Instant::now();
    run_criterion(4, || {
        let mut metrics = Vec::new();
        let mut push =
            |name: &str, err: f64| metrics.push(Metric::check(4, name, err, "rel", Cmp::Le, 1e-3));

        // NLL with SMM prior plus the consistency term
        let cfg = ExpFlowConfig {
            classes: 2,
            dim: 8,
            steps: 2,
            hidden: 8,
            nu: 2.0,
            context: small_context(),
            dropout: 0.25,
            lambda_con: 0.1,
            consistency_pairs: 4,
            freeze_means: false,
        };
        let mut model = ExpFlowModel::<f64>::new(cfg, seed)?;
        perturb(&mut model.params, "", seed + 1, 0.1);
        let data = toy_sequences(2, 8, 5, 2, seed + 2);
        let batch = model.batch(
            &data,
            &[(0, 0), (0, 3), (1, 1), (1, 4)],
            vec![false, true, false, true],
        );
        let pairs = vec![(0, 2), (1, 3), (1, 1)];
        let noise = model.latent_noise(pairs.len(), &mut ChaCha8Rng::seed_from_u64(seed + 3));
        let r = grad_check(
            |p: &ParamSet<f64>| {
                let (t, g) = model.loss_and_grads(p, &data, &batch, &pairs, &noise)?;
                Ok((t[0].1, g))
            },
            &model.params,
            1e-5,
            1e-3,
        )?;
        push("expflow nll+consistency grad error", worst(&r));

        // Gaussian-prior pose flow
        let pcfg = PoseFlowConfig {
            dim: 6,
            steps: 2,
            hidden: 8,
            context: small_context(),
        };
        let mut pose = PoseFlowModel::<f64>::new(pcfg, seed + 4)?;
        perturb(&mut pose.params, "", seed + 5, 0.1);
        let pdata = toy_sequences(1, 8, 5, 2, seed + 6);
        let pbatch = pose.batch(&pdata, &[(0, 0), (0, 4), (1, 2)])?;
        let r = grad_check(
            |p: &ParamSet<f64>| {
                let (t, g) = pose.loss_and_grads(p, &pbatch)?;
                Ok((t[0].1, g))
            },
            &pose.params,
            1e-5,
            1e-3,
        )?;
        push("poseflow nll grad error", worst(&r));

        // autoencoder: reconstruction, perceptual, codebook and adversarial terms
        let images = stack_images(&patch_corpus(2, 8, 4, seed + 7));
        let ae = PatchAutoencoder::<f64>::new(tiny_ae(0.8), seed + 8)?;
        let frozen = ae.freeze_point(&ae.params, &images)?;
        let generator = only(&ae.params, |n| !n.starts_with("ae.disc"));
        let r = grad_check(
            |p: &ParamSet<f64>| {
                let (t, g) = ae.loss_and_grads(p, &images, Some(&frozen))?;
                Ok((t.total + t.adv_disc, g))
            },
            &generator,
            1e-5,
            1e-3,
        )?;
        push("autoencoder generator grad error", worst(&r));
        let critic = only(&ae.params, |n| n.starts_with("ae.disc"));
        let r = grad_check(
            |p: &ParamSet<f64>| {
                let (t, g) = ae.loss_and_grads(p, &images, Some(&frozen))?;
                Ok((-t.adv_disc, g))
            },
            &critic,
            1e-5,
            1e-3,
        )?;
        push("autoencoder critic grad error", worst(&r));

        // generator code and image losses with the lookup frozen at the base point
        let mut base = PatchAutoencoder::<f64>::new(tiny_ae(0.0), seed + 9)?;
        base.init_codebook_from(&stack_images(&patch_corpus(6, 8, 4, seed + 10)), seed)?;
        let vcfg = VqigConfig {
            sigma_dim: 3,
            beta_dim: 4,
            pose_dim: 2,
            warp_grid: 2,
            max_disp: 0.25,
            heads: 2,
            layers: 1,
            hidden: 6,
            lambda_feat: 0.25,
            lambda_adv: 0.8,
            image_weight: 1.0,
            warmup: 0,
        };
        let mut vqig = VqigModel::new(vcfg, &base, seed + 11)?;
        perturb(&mut vqig.params, "vqig.adain", seed + 12, 0.5);
        perturb(&mut vqig.params, "vqig.img_adain", seed + 13, 0.5);
        let pairs = talkflow_vq::patches::pair_corpus(2, 8, 4, 4, 2, seed + 14);
        let vb = VqigBatch::new(&vqig, &pairs.iter().collect::<Vec<_>>())?;
        let fl = vqig.frozen_lookup(&vqig.params, &vb)?;
        let generator = only(&vqig.params, |n| !n.starts_with("vqig.disc"));
        let r = grad_check(
            |p: &ParamSet<f64>| {
                let (t, g) = vqig.loss_and_grads(p, &vb, 1.0, Some(&fl))?;
                Ok((t.total + t.adv_disc, g))
            },
            &generator,
            1e-4,
            1e-3,
        )?;
        push("vqig generator grad error", worst(&r));
        let critic = only(&vqig.params, |n| n.starts_with("vqig.disc"));
        let r = grad_check(
            |p: &ParamSet<f64>| {
                let (t, g) = vqig.loss_and_grads(p, &vb, 1.0, Some(&fl))?;
                Ok((-t.adv_disc, g))
            },
            &critic,
            1e-4,
            1e-3,
        )?;
        push("vqig critic grad error", worst(&r));
        metrics.push(Metric::check(
            4,
            "gradient suite runtime",
            t0.elapsed().as_secs_f64(),
            "s",
            Cmp::Lt,
            120.0,
        ));
        Ok(metrics)
    })
}

/// Trained expression-flow artifacts.
pub struct ExpFlowArtifacts<'a> {
    pub model: &'a ExpFlowModel<f64>,
    pub untrained: &'a ExpFlowModel<f64>,
    pub bank: &'a LatentBank<f64>,
    pub train: &'a [CoeffSequence],
    pub held: &'a [CoeffSequence],
    pub spec: &'a SceneSpec,
    pub train_seconds: Option<f64>,
}

pub fn expflow_run(a: &ExpFlowArtifacts<'_>, seed: u64) -> CriterionResult {
    run_criterion(5, || {
        let classes = a.model.config.classes;
        let nll0 = a.untrained.dataset_nll(a.held)?;
        let nll1 = a.model.dataset_nll(a.held)?;
        let improvement = (nll0 - nll1) / nll0.abs();
        let items = all_frames(a.held);
        let z = a.model.encode_frames(a.held, &items)?;
        let labels: Vec<usize> = items.iter().map(|&(s, _)| a.held[s].class).collect();
        let latent_acc =
            nearest_centroid_accuracy(z.view(), &labels, a.bank.centroids(classes).view());

        let oracle = OracleClassifier::train(a.train, classes)?;
        let gt_acc = oracle.accuracy(a.held);
        let mut generated = Vec::with_capacity(a.held.len());
        let mut lip_corr = Vec::with_capacity(a.held.len());
        for (k, seq) in a.held.iter().enumerate() {
            let audio = SignalAudio(seq.audio.clone());
            let r = rollout_expression(
                a.model,
                seq.coeffs.row(0),
                &audio,
                seq.class,
                &RolloutOptions::random(seed + k as u64, seq.len()),
                Some(a.bank),
            )?;
            lip_corr.push(pearson(
                &lip_signal(&r.frames, &a.spec.lip),
                seq.audio.as_slice().unwrap(),
            ));
            generated.push(CoeffSequence {
                coeffs: r.frames,
                ..seq.clone()
            });
        }
        let gen_acc = oracle.accuracy(&generated);
        let lip = lip_corr.iter().sum::<f64>() / lip_corr.len() as f64;
        let mut m = vec![
            Metric::info("held NLL initial", nll0, "nats/frame"),
            Metric::info("held NLL trained", nll1, "nats/frame"),
            Metric::check(
                5,
                "held NLL improvement",
                improvement,
                "fraction",
                Cmp::Ge,
                0.30,
            ),
            Metric::check(
                5,
                "latent nearest-centroid accuracy",
                latent_acc,
                "fraction",
                Cmp::Ge,
                0.90,
            ),
            Metric::check(
                5,
                "oracle accuracy on ground truth",
                gt_acc,
                "fraction",
                Cmp::Ge,
                0.95,
            ),
            Metric::check(
                5,
                "oracle accuracy on generated",
                gen_acc,
                "fraction",
                Cmp::Ge,
                0.80,
            ),
            Metric::check(5, "lip/driving correlation", lip, "pearson", Cmp::Ge, 0.80),
        ];
        if let Some(s) = a.train_seconds {
            m.push(Metric::check(
                5,
                "expflow training runtime",
                s / 60.0,
                "min",
                Cmp::Le,
                30.0,
            ));
        }
        Ok(m)
    })
}

/// `seeds` rollouts of one held-out context under its own class.
pub fn seed_rollouts(
    a: &ExpFlowArtifacts<'_>,
    sequence: usize,
    seeds: u64,
    length: usize,
) -> Result<Vec<Array2<f64>>> {
    let seq = a
        .held
        .get(sequence)
        .ok_or_else(|| Error::data(format!("no held-out sequence {sequence}")))?;
    let audio = SignalAudio(seq.audio.clone());
    (0..seeds)
        .map(|s| {
            rollout_expression(
                a.model,
                seq.coeffs.row(0),
                &audio,
                seq.class,
                &RolloutOptions::random(s, length),
                Some(a.bank),
            )
            .map(|r| r.frames)
        })
        .collect()
}

pub fn diversity(a: &ExpFlowArtifacts<'_>, sequence: usize) -> CriterionResult {
    run_criterion(6, || {
        let len = a.held[0].len();
        let runs = seed_rollouts(a, sequence, 10, len)?;
        let again = seed_rollouts(a, sequence, 1, len)?;
        let repeat_diff = (&runs[0] - &again[0])
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        let blink = across_seed_variance(&runs, &a.spec.blink);
        let lip = across_seed_variance(&runs, &a.spec.lip);
        Ok(vec![
            Metric::check(
                6,
                "mean pairwise L2",
                mean_pairwise_l2(&runs),
                "coeff",
                Cmp::Gt,
                0.0,
            ),
            Metric::info("blink variance", blink, "coeff²"),
            Metric::info("lip variance", lip, "coeff²"),
            Metric::check(
                6,
                "blink/lip variance ratio",
                blink / lip,
                "ratio",
                Cmp::Ge,
                10.0,
            ),
            Metric::check(
                6,
                "fixed-seed max difference",
                repeat_diff,
                "abs",
                Cmp::Le,
                0.0,
            ),
        ])
    })
}

pub fn dropout_ablation(
    with_dropout: &ExpFlowModel<f64>,
    without: &ExpFlowModel<f64>,
    held: &[CoeffSequence],
    dumps: &[PathBuf],
) -> CriterionResult {
    run_criterion(7, || {
        let classes = with_dropout.config.classes;
        let items = all_frames(held);
        let labels: Vec<usize> = items.iter().map(|&(s, _)| held[s].class).collect();
        let t_with = class_covariance_traces(
            with_dropout.encode_frames(held, &items)?.view(),
            &labels,
            classes,
        );
        let t_without = class_covariance_traces(
            without.encode_frames(held, &items)?.view(),
            &labels,
            classes,
        );
        let mut m = Vec::new();
        let mut min_rel = f64::INFINITY;
        let (mut rel_sum, mut over) = (0.0, 0);
        for c in 0..classes {
            let rel = (t_with[c] - t_without[c]).abs() / t_with[c].abs().max(t_without[c].abs());
            m.push(Metric::info(
                &format!("class {c} trace p={}", with_dropout.config.dropout),
                t_with[c],
                "latent²",
            ));
            m.push(Metric::info(
                &format!("class {c} trace p={}", without.config.dropout),
                t_without[c],
                "latent²",
            ));
            let rel = if rel.is_nan() { 0.0 } else { rel };
            min_rel = min_rel.min(rel);
            rel_sum += rel;
            over += usize::from(rel > 0.10);
        }
        m.push(Metric::info(
            "mean per-class trace difference",
            rel_sum / classes as f64,
            "fraction",
        ));
        m.push(Metric::info(
            "classes differing by more than 10%",
            over as f64,
            "count",
        ));
        m.push(Metric::check(
            7,
            "min per-class trace difference",
            min_rel,
            "fraction",
            Cmp::Gt,
            0.10,
        ));
        let present = dumps.iter().filter(|p| p.exists()).count();
        m.push(Metric::check(
            7,
            "latent dumps present",
            present as f64,
            "files",
            Cmp::Ge,
            dumps.len().max(1) as f64,
        ));
        Ok(m)
    })
}

pub fn transfer_identity(model: &ExpFlowModel<f64>, held: &[CoeffSequence]) -> CriterionResult {
    run_criterion(8, || {
        let mut worst = 0.0f64;
        for seq in held.iter().take(5) {
            let audio = SignalAudio(seq.audio.clone());
            let r = emotion_transfer(model, seq, seq.coeffs.row(0), &audio, 0, seq.len())?;
            worst = worst.max(
                (&r.frames - &seq.coeffs)
                    .iter()
                    .fold(0.0f64, |m, v| m.max(v.abs())),
            );
        }
        Ok(vec![Metric::check(
            8,
            "self-transfer max error",
            worst,
            "abs",
            Cmp::Lt,
            1e-4,
        )])
    })
}

pub fn projection(bank: &LatentBank<f64>, seed: u64) -> CriterionResult {
    run_criterion(9, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = bank.len();
        let mut exact = 0.0f64;
        for _ in 0..100 {
            let row = bank.latents.row(rng.random_range(0..n));
            let p = bank.project(row)?;
            exact = exact.max((&p - &row).iter().fold(0.0f64, |m, v| m.max(v.abs())));
        }
        let spread = bank.latents.std_axis(ndarray::Axis(0), 0.0);
        let mut worst_ratio = 0.0f64;
        let mut violations = 0;
        for k in 0..1000 {
            let base = bank.latents.row(rng.random_range(0..n)).to_owned();
            let scale = [0.05, 0.3, 1.0, 3.0][k % 4];
            let probe = Array1::from_shape_fn(base.len(), |j| {
                base[j] + scale * spread[j] * rng.random_range(-1.0..1.0)
            });
            let p = bank.project(probe.view())?;
            let nn = bank.latents.row(bank.nearest(probe.view(), 1)[0]);
            let r_proj = (&p - &probe).mapv(|v| v * v).sum().sqrt();
            let r_nn = (&nn - &probe).mapv(|v| v * v).sum().sqrt();
            if r_nn > 0.0 {
                worst_ratio = worst_ratio.max(r_proj / r_nn);
            }
            if r_proj > r_nn * (1.0 + 1e-12) {
                violations += 1;
            }
        }
        Ok(vec![
            Metric::check(
                9,
                "bank point reproduction error",
                exact,
                "abs",
                Cmp::Lt,
                1e-6,
            ),
            Metric::info(
                "max residual ratio to nearest neighbor",
                worst_ratio,
                "ratio",
            ),
            Metric::check(
                9,
                "probes worse than nearest neighbor",
                violations as f64,
                "count",
                Cmp::Le,
                0.0,
            ),
        ])
    })
}

/// Nearest codebook row by an explicit scan, independent of the library path.
fn brute_force_codes(z: &Array2<f64>, book: &Array2<f64>) -> Vec<usize> {
    z.rows()
        .into_iter()
        .map(|cell| {
            let mut best = (f64::INFINITY, 0);
            for (k, code) in book.rows().into_iter().enumerate() {
                let d: f64 = code
                    .iter()
                    .zip(cell.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if d < best.0 {
                    best = (d, k);
                }
            }
            best.1
        })
        .collect()
}

pub struct VqArtifacts<'a> {
    pub trained: &'a PatchAutoencoder<f64>,
    /// The same model at step 0 (after codebook seeding).
    pub initial: &'a PatchAutoencoder<f64>,
    pub train_images: &'a [Array2<f64>],
    pub held_images: &'a [Array2<f64>],
    pub steps: u64,
}

pub fn vq_suite(a: &VqArtifacts<'_>, seed: u64) -> CriterionResult {
    run_criterion(10, || {
        let book = a.trained.codebook().clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spread = book.std_axis(ndarray::Axis(0), 0.0);
        let cells = Array2::from_shape_fn((10_000, book.ncols()), |(_, j)| {
            book[[rng.random_range(0..book.nrows()), j]]
                + 2.0 * spread[j] * rng.random_range(-1.0..1.0)
        });
        let (_, idx) = quantize(cells.view(), book.view())?;
        let mismatches = idx
            .iter()
            .zip(brute_force_codes(&cells, &book))
            .filter(|(a, b)| **a != *b)
            .count();
        let held = stack_images(a.held_images);
        let before = a.initial.recon_error(&held)?;
        let after = a.trained.recon_error(&held)?;
        let (_, used) = a.trained.quantize(&stack_images(a.train_images))?;
        Ok(vec![
            Metric::check(
                10,
                "quantize mismatches vs brute force",
                mismatches as f64,
                "cells",
                Cmp::Le,
                0.0,
            ),
            Metric::info("held recon error initial", before, "mean abs"),
            Metric::info("held recon error trained", after, "mean abs"),
            Metric::check(
                10,
                "recon error ratio",
                after / before,
                "ratio",
                Cmp::Le,
                0.5,
            ),
            Metric::check(
                10,
                "codebook training steps",
                a.steps as f64,
                "steps",
                Cmp::Le,
                2000.0,
            ),
            Metric::check(
                10,
                "code usage",
                usage(&used, book.nrows()),
                "fraction",
                Cmp::Ge,
                0.25,
            ),
        ])
    })
}

pub struct VqigArtifacts<'a> {
    pub trained: &'a VqigModel<f64>,
    /// Freshly initialized over the same frozen autoencoder.
    pub initial: &'a VqigModel<f64>,
    pub autoencoder: &'a PatchAutoencoder<f64>,
    pub held_pairs: &'a [PatchPair],
    pub classes: usize,
    pub train_seconds: Option<f64>,
}

/// Max deviations along σ=0 ⇒ I_w = I₀ ⇒ unwarped code prediction.
pub fn zero_motion_chain(model: &VqigModel<f64>, source: &Array2<f64>) -> Result<(f64, f64, f64)> {
    let zeros = model.coeff_rows(std::iter::once((
        vec![0.0; model.config.beta_dim].as_slice(),
        vec![0.0; model.config.pose_dim].as_slice(),
    )))?;
    let (z_c, _) = model.quantize_frozen(source)?;
    let g = Tape::new();
    let b = Bound::new(&g, &model.params);
    let src = g.constant(source.clone());
    let f = model.forward(&b, src, g.constant(z_c.clone()), g.constant(zeros), 1)?;
    let sigma = g.value(f.sigma).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let warp = (g.value(f.warped) - source)
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let z_w = model.e_w.forward(&b, src, 1);
    let (_, fused, _) = model.fuse_and_attend(&b, z_w, g.constant(z_c), f.sigma, 1)?;
    let logits = model.transformer.forward(&b, fused, 1);
    let chain = (g.value(logits) - g.value(f.logits))
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    Ok((sigma, warp, chain))
}

pub fn vqig_desk(a: &VqigArtifacts<'_>, seed: u64) -> CriterionResult {
    run_criterion(11, || {
        let res = a.trained.ae_config.resolution;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sources: Vec<Array2<f64>> = (0..10)
            .map(|k| {
                render(
                    &FaceIdentity::sample(&mut rng),
                    &Motion::neutral(),
                    k % a.classes,
                    res,
                )
            })
            .collect();
        let (mut s_max, mut w_max, mut c_max) = (0.0f64, 0.0f64, 0.0f64);
        for s in &sources {
            let (sg, w, c) = zero_motion_chain(a.initial, s)?;
            s_max = s_max.max(sg);
            w_max = w_max.max(w);
            c_max = c_max.max(c);
        }
        let acc = a.trained.code_accuracy(a.held_pairs)?;
        let zeros_b = Array2::zeros((1, a.trained.config.beta_dim));
        let zeros_r = Array2::zeros((1, a.trained.config.pose_dim));
        let (mut still, mut still_base) = (0.0, 0.0);
        for s in &sources {
            let frame = &a.trained.animate(s, &zeros_b, &zeros_r)?[0];
            still += (frame - s).mapv(f64::abs).mean().unwrap_or(0.0);
            still_base += a.autoencoder.recon_error(s)?;
        }
        // generated targets against the autoencoder's own reconstruction of them
        let (mut gen, mut base) = (0.0, 0.0);
        for p in a.held_pairs.iter().take(32) {
            let beta = Array2::from_shape_vec((1, p.beta.len()), p.beta.clone())
                .map_err(|e| Error::argument(e.to_string()))?;
            let rho = Array2::from_shape_vec((1, p.rho.len()), p.rho.clone())
                .map_err(|e| Error::argument(e.to_string()))?;
            let frame = &a.trained.animate(&p.source, &beta, &rho)?[0];
            gen += (frame - &p.target).mapv(f64::abs).mean().unwrap_or(0.0);
            base += a.autoencoder.recon_error(&p.target)?;
        }
        let frozen_now = a.trained.frozen_params();
        let frozen_then = a.initial.frozen_params();
        let changed = frozen_then
            .iter()
            .zip(frozen_now.iter())
            .filter(|((_, x), (_, y))| x != y)
            .count()
            + usize::from(frozen_then.len() != frozen_now.len());
        let mut m = vec![
            Metric::check(11, "zero-motion sigma", s_max, "abs", Cmp::Le, 1e-6),
            Metric::check(
                11,
                "zero-motion warp deviation",
                w_max,
                "abs",
                Cmp::Le,
                1e-6,
            ),
            Metric::check(
                11,
                "zero-motion logit deviation",
                c_max,
                "abs",
                Cmp::Le,
                1e-6,
            ),
            Metric::check(11, "held code accuracy", acc, "fraction", Cmp::Ge, 0.60),
            Metric::info(
                "zero-motion recon vs autoencoder",
                still / still_base,
                "ratio",
            ),
            Metric::check(
                11,
                "held target recon vs autoencoder",
                gen / base,
                "ratio",
                Cmp::Le,
                1.5,
            ),
            Metric::check(
                11,
                "frozen tensors changed",
                changed as f64,
                "count",
                Cmp::Le,
                0.0,
            ),
        ];
        if let Some(s) = a.train_seconds {
            m.push(Metric::check(
                11,
                "vqig training runtime",
                s / 60.0,
                "min",
                Cmp::Le,
                30.0,
            ));
        }
        Ok(m)
    })
}

/// The ≈ value quoted for `3·ln 2π`; its exact value is 5.513631.
pub const POSE_ORIGIN_NLL: f64 = 5.51355;

pub fn poseflow(
    trained: &PoseFlowModel<f64>,
    held: &[CoeffSequence],
    energy_radius: usize,
) -> CriterionResult {
    run_criterion(12, || {
        let identity =
            PoseFlowModel::<f64>::with_linear_init(trained.config, 0, LinearInit::Identity)?;
        let origin = CoeffSequence {
            class: 0,
            coeffs: Array2::zeros((1, 64)),
            pose: Array2::zeros((1, trained.config.dim)),
            audio: array![0.3],
        };
        let nll = identity.loss(&identity.batch(&[origin], &[(0, 0)])?)?;
        let (mut speed, mut energy) = (Vec::new(), Vec::new());
        let mut spread = 0.0;
        for (k, seq) in held.iter().take(5).enumerate() {
            let audio = SignalAudio(seq.audio.clone());
            let runs: Vec<Array2<f64>> = (0..10)
                .map(|s| rollout_pose(trained, &audio, s, seq.len()).map(|r| r.frames))
                .collect::<Result<_>>()?;
            for r in &runs {
                speed.extend(step_lengths(r));
                energy.extend((1..seq.len()).map(|t| audio_energy(&seq.audio, t, energy_radius)));
            }
            if k == 0 {
                spread = trace_spread(&runs);
            }
        }
        Ok(vec![
            Metric::info("origin NLL at identity init", nll, "nats"),
            Metric::check(
                12,
                "origin NLL deviation",
                (nll - POSE_ORIGIN_NLL).abs(),
                "abs",
                Cmp::Le,
                1e-4,
            ),
            Metric::check(
                12,
                "pose speed/audio energy correlation",
                pearson(&speed, &energy),
                "pearson",
                Cmp::Ge,
                0.5,
            ),
            Metric::check(12, "10-seed trace spread", spread, "coeff²", Cmp::Gt, 0.0),
        ])
    })
}
