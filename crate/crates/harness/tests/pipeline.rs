use smalldet::checkpoint::Checkpoint;
use smalldet::config::{ModelConfig, SceneSpec, TrainConfig};
use smalldet::dataset::{generate, Dataset};
use smalldet::eval::{evaluate, score, EvalSettings};
use smalldet::train::train;
use smalldet::HarnessError;
use smalldet_core::metrics::Detection;
use smalldet_core::{BoxLossKind, Precision};

fn tiny_data() -> Dataset {
    generate(&SceneSpec::new(32, 2, 4), 6).unwrap()
}

fn tiny_config(loss: BoxLossKind) -> TrainConfig {
    let mut model = ModelConfig::new(2, 32);
    model.c1 = 4;
    TrainConfig {
        epochs: 3,
        batch_size: 3,
        learning_rate: 3e-3,
        loss_kind: loss.name().into(),
        seed: 11,
        model: Some(model),
        ..Default::default()
    }
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let data = tiny_data();
    let cfg = TrainConfig {
        learning_rate: 0.0,
        ..tiny_config(BoxLossKind::FocalerSiou)
    };
    let out = train(&cfg, &data, Precision::Single, |_, _| {}).unwrap();
    assert_eq!(out.params, out.initial_params);
}

#[test]
fn repeat_runs_are_identical() {
    let data = tiny_data();
    let cfg = tiny_config(BoxLossKind::FocalerSiou);
    let a = train(&cfg, &data, Precision::Single, |_, _| {}).unwrap();
    let b = train(&cfg, &data, Precision::Single, |_, _| {}).unwrap();
    assert_eq!(a.loss_curve(), b.loss_curve());
    assert_eq!(a.checkpoint.encode(), b.checkpoint.encode());
    assert!(a.loss_curve().iter().all(|v| v.is_finite()));
}

#[test]
fn identity_interval_matches_plain_siou() {
    let data = tiny_data();
    let mut f = tiny_config(BoxLossKind::FocalerSiou);
    f.focaler_u = 1.0;
    let s = tiny_config(BoxLossKind::Siou);
    let a = train(&f, &data, Precision::Double, |_, _| {}).unwrap();
    let b = train(&s, &data, Precision::Double, |_, _| {}).unwrap();
    assert_eq!(a.loss_curve(), b.loss_curve());
}

#[test]
fn every_parameter_gets_a_gradient() {
    let data = tiny_data();
    let out = train(&tiny_config(BoxLossKind::Giou), &data, Precision::Single, |_, _| {}).unwrap();
    let dead: Vec<&str> = out.touched.iter().filter(|(_, t)| !t).map(|(n, _)| n.as_str()).collect();
    assert!(dead.is_empty(), "never received a gradient: {dead:?}");
    assert!(out.touched.len() > 30);
}

#[test]
fn perfect_predictions_score_one() {
    let data = tiny_data();
    let dets: Vec<Detection> = data
        .ground_truths()
        .iter()
        .map(|g| Detection {
            bbox: g.bbox,
            class_id: g.class_id,
            confidence: 1.0,
            image_id: g.image_id,
        })
        .collect();
    let s = score(&dets, &data.ground_truths()).unwrap();
    assert_eq!(s.map50, 1.0);
    assert_eq!(s.map50_95, 1.0);
}

#[test]
fn untrained_model_report_is_bounded_and_reproducible() {
    let data = tiny_data();
    let mut cfg = tiny_config(BoxLossKind::FocalerSiou);
    cfg.epochs = 1;
    cfg.learning_rate = 0.0;
    let out = train(&cfg, &data, Precision::Single, |_, _| {}).unwrap();
    let a = evaluate(&out.checkpoint, &data, EvalSettings::default(), Precision::Single).unwrap();
    let b = evaluate(&out.checkpoint, &data, EvalSettings::default(), Precision::Single).unwrap();
    for v in [a.scores.map50, a.scores.map50_95] {
        assert!((0.0..=1.0).contains(&v));
    }
    assert!(a.scores.per_class_ap50.values().all(|v| (0.0..=1.0).contains(v)));
    let strip = |r: &smalldet::eval::EvalReport| {
        let mut v = serde_json::to_value(r).unwrap();
        v.as_object_mut().unwrap().remove("wall_clock_seconds");
        v.to_string()
    };
    assert_eq!(strip(&a), strip(&b));
    let back: smalldet::eval::EvalReport = serde_json::from_str(&serde_json::to_string(&a).unwrap()).unwrap();
    assert_eq!(back, a);
}

#[test]
fn mismatched_architecture_is_rejected() {
    let data = tiny_data();
    let mut cfg = tiny_config(BoxLossKind::FocalerSiou);
    cfg.epochs = 1;
    let out = train(&cfg, &data, Precision::Single, |_, _| {}).unwrap();
    let mut other = out.checkpoint.meta.model;
    other.c1 = 8;
    let err = out.checkpoint.to_params(other).unwrap_err();
    assert!(matches!(err, HarnessError::Mismatch(_)));
    assert!(err.to_string().contains("`head_w`"), "{err}");

    let mut truncated: Checkpoint = out.checkpoint.clone();
    truncated.tensors.pop();
    let err = truncated.to_params(out.checkpoint.meta.model).unwrap_err().to_string();
    assert!(err.contains("missing"), "{err}");
}

#[test]
fn invalid_configs_are_rejected() {
    let data = tiny_data();
    for bad in [
        TrainConfig { epochs: 0, ..tiny_config(BoxLossKind::Siou) },
        TrainConfig { focaler_d: 0.9, focaler_u: 0.5, ..tiny_config(BoxLossKind::Siou) },
        TrainConfig { loss_kind: "l1".into(), ..tiny_config(BoxLossKind::Siou) },
        TrainConfig { precision: "half".into(), ..tiny_config(BoxLossKind::Siou) },
    ] {
        assert!(train(&bad, &data, Precision::Single, |_, _| {}).is_err());
    }
    let mut wrong = tiny_config(BoxLossKind::Siou);
    wrong.model = Some(ModelConfig::new(2, 64));
    assert!(matches!(train(&wrong, &data, Precision::Single, |_, _| {}), Err(HarnessError::Config(_))));
}
