use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use talkflow_core::context::*;
use talkflow_core::numerics::{Bound, ParamSet, Tape};

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn lip_correlation(spec: &SceneSpec, seqs: &[CoeffSequence]) -> f64 {
    let mut worst = f64::INFINITY;
    for s in seqs {
        for &j in &spec.lip {
            let col: Vec<f64> = s.coeffs.column(j).to_vec();
            worst = worst.min(pearson(&col, s.audio.as_slice().unwrap()));
        }
    }
    worst
}

#[test]
fn noise_free_lips_follow_the_audio_exactly() {
    let mut spec = SceneSpec::generate(3, 1);
    spec.noise = 0.0;
    spec.blink_rate = 0.0;
    let seqs = synth_dataset(&spec, 10, 2).unwrap();
    assert!((lip_correlation(&spec, &seqs) - 1.0).abs() < 1e-12);
    let default = SceneSpec::generate(3, 1);
    let seqs = synth_dataset(&default, 20, 2).unwrap();
    assert!(lip_correlation(&default, &seqs) >= 0.95);
}

#[test]
fn class_offsets_show_up_in_class_means() {
    let mut spec = SceneSpec::generate(2, 3);
    spec.offsets[0][30] = 2.0;
    spec.offsets[1][30] = -2.0;
    let seqs = synth_dataset(&spec, 200, 4).unwrap();
    let mean_of = |c: usize| {
        let vals: Vec<f64> = seqs
            .iter()
            .filter(|s| s.class == c)
            .flat_map(|s| s.coeffs.column(30).to_vec())
            .collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    };
    assert!((mean_of(0) - mean_of(1) - 4.0).abs() < 0.05);
}

#[test]
fn dataset_is_seeded_and_validated() {
    let spec = SceneSpec::generate(4, 5);
    assert_eq!(
        synth_dataset(&spec, 5, 9).unwrap(),
        synth_dataset(&spec, 5, 9).unwrap()
    );
    assert_ne!(
        synth_dataset(&spec, 5, 9).unwrap(),
        synth_dataset(&spec, 5, 10).unwrap()
    );
    let mut bad = spec.clone();
    bad.blink.push(bad.lip[0]);
    assert!(matches!(
        synth_dataset(&bad, 1, 0),
        Err(talkflow_core::Error::Config(_))
    ));
    let mut bad = spec.clone();
    bad.amplitudes[0][20] = -1.0;
    assert!(bad.validate().is_err());
    let mut bad = spec;
    bad.offsets[1] = bad.offsets[0].clone();
    assert!(bad.validate().is_err());
}

#[test]
fn pose_steps_grow_with_audio_energy() {
    let spec = SceneSpec::generate(2, 6);
    let seqs = synth_dataset(&spec, 40, 7).unwrap();
    let (mut vel, mut en) = (Vec::new(), Vec::new());
    for s in &seqs {
        for t in 1..s.len() {
            let d = &s.pose.row(t) - &(spec.pose_decay * &s.pose.row(t - 1));
            vel.push(d.dot(&d).sqrt());
            en.push(audio_energy(&s.audio, t, spec.energy_radius));
        }
    }
    assert!(pearson(&vel, &en) > 0.6);
}

fn identity_encoder(variant: Variant, dim: usize) -> ContextEncoder {
    ContextEncoder::new(
        "ctx",
        variant,
        EncoderKind::Identity,
        ContextConfig::default(),
        dim,
        4,
    )
    .unwrap()
}

#[test]
fn pose_layout_has_no_emotion_or_source() {
    let enc = identity_encoder(Variant::Pose, 6);
    let layout = enc.layout();
    assert!(layout.get(Segment::Emotion).is_none());
    assert!(layout.get(Segment::Source).is_none());
    assert_eq!(layout.len(), 5 + 5 * 6);
}

#[test]
fn first_frame_pads_previous_with_the_source() {
    let spec = SceneSpec::generate(4, 8);
    let seq = &synth_dataset(&spec, 1, 1).unwrap()[0];
    let enc = identity_encoder(Variant::Expression, 64);
    let params = ParamSet::<f64>::new();
    let c = enc.assemble(&params, seq, 0).unwrap();
    let prev = c.segment(Segment::Previous).unwrap();
    for k in 0..5 {
        let block = prev.slice(ndarray::s![0, k * 64..(k + 1) * 64]);
        assert_eq!(block, seq.coeffs.row(0));
    }
    assert_eq!(c, enc.assemble(&params, seq, 0).unwrap());
}

#[test]
fn identity_layout_recovers_the_raw_inputs() {
    let spec = SceneSpec::generate(4, 9);
    let seq = &synth_dataset(&spec, 1, 3).unwrap()[0];
    let enc = identity_encoder(Variant::Expression, 64);
    let params = ParamSet::<f64>::new();
    for t in [0, 3, 7, 49] {
        let c = enc.assemble(&params, seq, t).unwrap();
        assert_eq!(
            c.segment(Segment::Source).unwrap().row(0),
            seq.coeffs.row(0)
        );
        let window = clamped_window(&seq.audio, t, 2);
        assert_eq!(c.segment(Segment::Audio).unwrap().row(0).to_vec(), window);
        let prev = c.segment(Segment::Previous).unwrap();
        for k in 0..5 {
            let src = if t + k >= 5 {
                seq.coeffs.row(t + k - 5)
            } else {
                seq.coeffs.row(0)
            };
            assert_eq!(prev.slice(ndarray::s![0, k * 64..(k + 1) * 64]), src);
        }
        let emo = c.segment(Segment::Emotion).unwrap();
        assert_eq!(
            emo.row(0).to_vec(),
            (0..4)
                .map(|i| (i == seq.class) as u8 as f64)
                .collect::<Vec<_>>()
        );
    }
    assert!(enc.assemble(&params, seq, 50).is_err());
}

#[test]
fn zero_tau_is_a_config_error() {
    let cfg = ContextConfig {
        tau: 0,
        ..ContextConfig::default()
    };
    assert!(matches!(
        ContextEncoder::new("c", Variant::Expression, EncoderKind::Learned, cfg, 64, 4),
        Err(talkflow_core::Error::Config(_))
    ));
}

fn learned_context(rows: usize, seed: u64) -> ContextVector<f64> {
    let spec = SceneSpec::generate(4, seed);
    let seqs = synth_dataset(&spec, rows, seed).unwrap();
    let enc = ContextEncoder::new(
        "ctx",
        Variant::Expression,
        EncoderKind::Learned,
        ContextConfig::default(),
        64,
        4,
    )
    .unwrap();
    let mut params = ParamSet::<f64>::new();
    enc.init(&mut params, &mut ChaCha8Rng::seed_from_u64(seed));
    let mut rb = RawBuilder::new(Variant::Expression, 64, &enc.config);
    for (i, s) in seqs.iter().enumerate() {
        enc.push_frame(&mut rb, s, i % 50);
    }
    enc.encode_values(&params, &rb.finish(), &vec![false; rows])
        .unwrap()
}

#[test]
fn dropout_extremes() {
    let c = learned_context(12, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    assert_eq!(apply_data_dropout(&c, 0.0, &mut rng).unwrap(), c);
    let d = apply_data_dropout(&c, 1.0, &mut rng).unwrap();
    assert!(d
        .segment(Segment::Previous)
        .unwrap()
        .iter()
        .all(|&v| v == 0.0));
    assert!(d.dropped.iter().all(|&x| x));
    for seg in [Segment::Source, Segment::Audio, Segment::Emotion] {
        assert_eq!(d.segment(seg), c.segment(seg));
    }
    assert!(apply_data_dropout(&c, 1.5, &mut rng).is_err());
}

#[test]
fn dropout_rate_is_binomial() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mask = dropout_mask(10_000, 0.25, &mut rng).unwrap();
    let rate = mask.iter().filter(|&&d| d).count() as f64 / 10_000.0;
    assert!((rate - 0.25).abs() < 0.02, "{rate}");
}

#[test]
fn tape_dropout_matches_array_dropout() {
    let spec = SceneSpec::generate(4, 4);
    let seqs = synth_dataset(&spec, 3, 4).unwrap();
    let enc = ContextEncoder::new(
        "ctx",
        Variant::Expression,
        EncoderKind::Learned,
        ContextConfig::default(),
        64,
        4,
    )
    .unwrap();
    let mut params = ParamSet::<f64>::new();
    enc.init(&mut params, &mut ChaCha8Rng::seed_from_u64(4));
    let mut rb = RawBuilder::new(Variant::Expression, 64, &enc.config);
    for s in &seqs {
        enc.push_frame(&mut rb, s, 10);
    }
    let raw = rb.finish();
    let with = enc
        .encode_values(&params, &raw, &[false, true, false])
        .unwrap();
    let without = enc.encode_values(&params, &raw, &[false; 3]).unwrap();
    let prev = enc.layout().get(Segment::Previous).unwrap();
    for (j, (a, b)) in with
        .values
        .row(1)
        .iter()
        .zip(without.values.row(1).iter())
        .enumerate()
    {
        if prev.contains(&j) {
            assert_eq!(*a, 0.0);
        } else {
            assert_eq!(a, b);
        }
    }
    assert_eq!(with.values.row(0), without.values.row(0));
}

#[test]
fn encoders_embed_and_pass_zero() {
    let enc = ContextEncoder::new(
        "ctx",
        Variant::Expression,
        EncoderKind::Learned,
        ContextConfig::default(),
        64,
        4,
    )
    .unwrap();
    let mut params = ParamSet::<f64>::new();
    enc.init(&mut params, &mut ChaCha8Rng::seed_from_u64(5));
    let g = Tape::new();
    let b = Bound::new(&g, &params);
    let e = g.value(enc.embed_emotion(&b, &[0, 1, 2, 3, 2]).unwrap());
    assert_eq!(e.row(2), e.row(4));
    for i in 0..4 {
        for j in 0..i {
            let d = (&e.row(i) - &e.row(j)).mapv(|v| v * v).sum();
            assert!(d > 0.0);
        }
    }
    assert!(enc.embed_emotion(&b, &[4]).is_err());
    let a = g.value(enc.encode_audio(&b, g.constant(Array2::zeros((2, 5)))));
    assert!(a.iter().all(|&v| v == 0.0));
}

#[test]
fn audio_providers_agree() {
    let sig = SignalAudio(Array1::from(vec![1.0, 2.0, 3.0]));
    let file = FileAudio::parse("# features\n1.0\n2.0\n\n3.0\n").unwrap();
    assert_eq!(sig.window(0, 2), vec![1.0, 1.0, 1.0, 2.0, 3.0]);
    assert_eq!(file.window(2, 1), sig.window(2, 1));
    assert!(FileAudio::parse("1.0\nabc\n").is_err());
    assert!(FileAudio::parse("").is_err());
}

#[test]
fn dataset_directory_roundtrip() {
    let spec = SceneSpec::generate(4, 11);
    let seqs = synth_dataset(&spec, 6, 12).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(dir.path(), &spec, 12, &seqs).unwrap();
    let (manifest, back) = load_dataset(dir.path()).unwrap();
    assert_eq!(back, seqs);
    assert_eq!(manifest.seed, 12);
    assert_eq!(manifest.spec, spec);
    let rec = dir.path().join(&manifest.files[2]);
    let bytes = std::fs::read(&rec).unwrap();
    std::fs::write(&rec, &bytes[..bytes.len() - 9]).unwrap();
    assert!(matches!(
        load_dataset(dir.path()),
        Err(talkflow_core::Error::Data(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn dropout_only_touches_the_previous_segment(seed in 0u64..1000, p in 0.0f64..=1.0) {
        let c = learned_context(8, seed % 7 + 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = apply_data_dropout(&c, p, &mut rng).unwrap();
        for seg in [Segment::Source, Segment::Audio, Segment::Emotion] {
            prop_assert_eq!(d.segment(seg), c.segment(seg));
        }
        let prev = d.segment(Segment::Previous).unwrap();
        let orig = c.segment(Segment::Previous).unwrap();
        for (r, &dropped) in d.dropped.iter().enumerate() {
            if dropped {
                prop_assert!(prev.row(r).iter().all(|&v| v == 0.0));
            } else {
                prop_assert_eq!(prev.row(r), orig.row(r));
            }
        }
    }
}
