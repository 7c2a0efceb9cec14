use ndarray::array;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use talkflow::checkpoint::{Checkpoint, RngState, MAGIC};
use talkflow::config::RunConfig;
use talkflow::run::{restore_trainer, trainer_checkpoint};
use talkflow_core::context::{synth_dataset, ContextConfig, SceneSpec};
use talkflow_core::generators::{
    PoseFlowConfig, PoseFlowModel, PoseFlowObjective, TrainConfig, Trainer,
};
use talkflow_core::numerics::ParamSet;
use talkflow_core::Error;

fn trainer() -> Trainer<f64, PoseFlowObjective<f64>> {
    let spec = SceneSpec::generate(2, 1);
    let data = synth_dataset(&spec, 6, 2).unwrap();
    let cfg = PoseFlowConfig {
        dim: 6,
        steps: 2,
        hidden: 8,
        context: ContextConfig {
            tau: 2,
            audio_radius: 1,
            source_features: 4,
            audio_features: 4,
            previous_features: 4,
            emotion_features: 4,
        },
    };
    let model = PoseFlowModel::new(cfg, 3).unwrap();
    let objective = PoseFlowObjective::new(model, data).unwrap();
    Trainer::new(
        objective,
        TrainConfig {
            steps: 40,
            batch: 8,
            seed: 5,
            ..TrainConfig::default()
        },
    )
    .unwrap()
}

fn saved_after(steps: u64) -> (Trainer<f64, PoseFlowObjective<f64>>, Vec<u8>) {
    let mut t = trainer();
    t.run_for(steps).unwrap();
    let bytes = trainer_checkpoint("poseflow", &RunConfig::desk(), &t)
        .to_bytes()
        .unwrap();
    (t, bytes)
}

#[test]
fn save_load_save_is_byte_identical() {
    let (_, bytes) = saved_after(5);
    let ck = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(ck.to_bytes().unwrap(), bytes);
    assert_eq!(&bytes[..8], MAGIC);
    assert_eq!(ck.step, 5);
    assert_eq!(ck.kind, "poseflow");
}

#[test]
fn loaded_parameters_are_bit_identical() {
    let (t, bytes) = saved_after(3);
    let ck = Checkpoint::from_bytes(&bytes).unwrap();
    for (name, v) in t.objective.model.params.iter() {
        let w = ck.params.get(name).unwrap();
        assert!(
            v.iter().zip(w).all(|(a, b)| a.to_bits() == b.to_bits()),
            "{name}"
        );
        assert_eq!(
            t.objective.model.params.is_trainable(name),
            ck.params.is_trainable(name)
        );
    }
}

#[test]
fn resumed_training_matches_uninterrupted_for_ten_steps() {
    let mut straight = trainer();
    straight.run_for(15).unwrap();

    let (_, bytes) = saved_after(5);
    let mut resumed = trainer();
    restore_trainer(
        &mut resumed,
        &Checkpoint::from_bytes(&bytes).unwrap(),
        "poseflow",
    )
    .unwrap();
    resumed.run_for(10).unwrap();

    let a: Vec<u64> = straight.history[5..]
        .iter()
        .map(|r| r.total().to_bits())
        .collect();
    let b: Vec<u64> = resumed
        .history
        .iter()
        .map(|r| r.total().to_bits())
        .collect();
    assert_eq!(a, b);
    assert_eq!(
        straight
            .objective
            .model
            .params
            .max_abs_diff(&resumed.objective.model.params),
        0.0
    );
}

#[test]
fn truncated_file_is_a_data_error_and_leaves_the_trainer_alone() {
    let (_, bytes) = saved_after(2);
    for cut in [0, 7, 20, bytes.len() / 2, bytes.len() - 1] {
        assert!(
            matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Data(_))),
            "cut at {cut}"
        );
    }
    let mut t = trainer();
    let before = t.objective.model.params.clone();
    let mut wrong = Checkpoint::from_bytes(&bytes).unwrap();
    wrong.optimizer = None;
    assert!(restore_trainer(&mut t, &wrong, "poseflow").is_err());
    assert!(restore_trainer(&mut t, &Checkpoint::from_bytes(&bytes).unwrap(), "expflow").is_err());
    assert_eq!(t.step, 0);
    assert_eq!(t.objective.model.params.max_abs_diff(&before), 0.0);
}

#[test]
fn version_and_checksum_are_enforced() {
    let (_, bytes) = saved_after(1);
    let mut v = bytes.clone();
    v[8] = 99;
    assert!(matches!(Checkpoint::from_bytes(&v), Err(Error::Data(m)) if m.contains("version")));
    let mut flip = bytes.clone();
    let mid = flip.len() - 40;
    flip[mid] ^= 1;
    assert!(matches!(Checkpoint::from_bytes(&flip), Err(Error::Data(_))));
    let mut magic = bytes;
    magic[0] = b'X';
    assert!(matches!(
        Checkpoint::from_bytes(&magic),
        Err(Error::Data(_))
    ));
}

#[test]
fn rng_state_resumes_the_stream() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    rng.set_stream(7);
    for _ in 0..13 {
        rng.next_u32();
    }
    let mut copy = RngState::capture(&rng).restore();
    let a: Vec<u64> = (0..20).map(|_| rng.next_u64()).collect();
    let b: Vec<u64> = (0..20).map(|_| copy.next_u64()).collect();
    assert_eq!(a, b);
}

#[test]
fn parameters_without_optimizer_roundtrip() {
    let mut params = ParamSet::new();
    params.insert("w", array![[1.5, -0.0, f64::MIN_POSITIVE]]);
    params.insert_buffer("b", array![[3.0], [4.0]]);
    let ck = Checkpoint {
        kind: "codebook".into(),
        config_json: "{}".into(),
        step: 0,
        params,
        optimizer: None,
        rng: None,
    };
    let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
    assert_eq!(back, ck);
    assert!(back.params_for("codebook", &ck.params).is_ok());
    let mut other = ck.params.clone();
    other.insert("extra", array![[0.0]]);
    assert!(matches!(
        back.params_for("codebook", &other),
        Err(Error::Data(_))
    ));
}
