use serde_json::json;
use talkflow::config::{RunConfig, Stream};
use talkflow::exit_code;
use talkflow_core::Error;

#[test]
fn empty_document_is_the_desk_preset() {
    let cfg = RunConfig::from_value(json!({}), None).unwrap();
    assert_eq!(cfg, RunConfig::desk());
}

#[test]
fn nested_overrides_keep_sibling_defaults() {
    let cfg = RunConfig::from_value(json!({"expflow": {"dropout": 0.0}, "seed": 9}), None).unwrap();
    assert_eq!(cfg.expflow.dropout, 0.0);
    assert_eq!(cfg.expflow.steps, RunConfig::desk().expflow.steps);
    assert_eq!(cfg.seed, 9);
}

#[test]
fn preset_argument_beats_the_document() {
    let cfg = RunConfig::from_value(json!({"preset": "desk"}), Some("paper-shape")).unwrap();
    assert_eq!(cfg.preset, "paper-shape");
    assert_eq!(cfg.vq.codebook_size, 1024);
}

#[test]
fn unknown_keys_are_config_errors() {
    for doc in [
        json!({"sed": 1}),
        json!({"expflow": {"dropuot": 0.1}}),
        json!({"preset": "laptop"}),
        json!([1, 2]),
    ] {
        let e = RunConfig::from_value(doc.clone(), None).unwrap_err();
        assert!(matches!(e, Error::Config(_)), "{doc}: {e}");
        assert_eq!(exit_code(&e), 2);
    }
}

#[test]
fn inconsistent_values_fail_validation() {
    for doc in [
        json!({"data": {"classes": 3}}),
        json!({"sample": {"sequence": 40}}),
        json!({"sample": {"length": 51}}),
        json!({"projection": {"k_proj": 0}}),
        json!({"train_expflow": {"lr": -1.0}}),
        json!({"experiment": "a/b"}),
    ] {
        assert!(RunConfig::from_value(doc.clone(), None).is_err(), "{doc}");
    }
}

#[test]
fn echoed_config_reloads_to_itself() {
    let cfg = RunConfig::from_value(json!({"seed": 4, "sample": {"class": 2}}), None).unwrap();
    let back: serde_json::Value = serde_json::from_str(&cfg.to_json()).unwrap();
    assert_eq!(RunConfig::from_value(back, None).unwrap(), cfg);
}

#[test]
fn stream_seeds_are_distinct_and_follow_the_run_seed() {
    let a = RunConfig::desk();
    let b = RunConfig {
        seed: 1,
        ..RunConfig::desk()
    };
    let streams = [
        Stream::TrainData,
        Stream::HeldData,
        Stream::ExpFlowInit,
        Stream::ExpFlowTrain,
        Stream::Eval,
    ];
    let mut seen: Vec<u64> = streams.iter().map(|&s| a.stream_seed(s)).collect();
    seen.sort_unstable();
    seen.dedup();
    assert_eq!(seen.len(), streams.len());
    assert!(streams
        .iter()
        .all(|&s| a.stream_seed(s) != b.stream_seed(s)));
}

#[test]
fn exit_codes_by_error_kind() {
    assert_eq!(exit_code(&Error::argument("x")), 2);
    assert_eq!(exit_code(&Error::data("x")), 3);
    assert_eq!(exit_code(&Error::numeric("x")), 4);
    assert_eq!(
        exit_code(&Error::Training {
            step: 3,
            message: "nan".into()
        }),
        4
    );
}
