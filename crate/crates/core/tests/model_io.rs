mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use eflash_nmcu::array::Geometry;
use eflash_nmcu::config::SimConfig;
use eflash_nmcu::dataset::{load_mnist_idx, parse_mnist_idx, synthetic_anomaly_task, write_idx, SynthSpec};
use eflash_nmcu::harness::{deploy, evaluate, plan_placement, EvalResult};
use eflash_nmcu::metrics::auc_rank;
use eflash_nmcu::model::{load_model, QuantModel, Task};
use eflash_nmcu::state::{load_state, save_state};
use eflash_nmcu::Error;

fn mnist(model: &QuantModel, n: usize) -> eflash_nmcu::dataset::Dataset {
    load_mnist_idx(
        common::fixture("mnist-test-images.idx3-ubyte"),
        common::fixture("mnist-test-labels.idx1-ubyte"),
        n,
        model.input_scale(),
        model.input_zero_point(),
    )
    .unwrap()
}

#[test]
fn fixture_model_loads_and_matches_exporter_accuracy() {
    let mut model = load_model(common::fixture("mnist-mlp-4bit.json")).unwrap();
    assert_eq!(model.task, Task::Classify);
    assert_eq!((model.input_dim(), model.output_dim()), (784, 10));
    let data = mnist(&model, 1000);
    let labels_seen: std::collections::BTreeSet<u32> = data.labels.iter().copied().collect();
    assert_eq!(labels_seen.len(), 10);

    let expected: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(common::fixture("mnist-mlp-4bit.eval.json")).unwrap()).unwrap();
    let mut mac = SimConfig::noiseless().build_macro().unwrap();
    deploy(&mut model, &mut mac).unwrap();
    let result = evaluate(&model, &mac, &data, 4, 1024).unwrap();
    assert_eq!(result.accuracy, expected["int8_accuracy"].as_f64());
    assert_eq!(result.per_class.iter().map(|c| c.total).sum::<u64>(), 1000);
}

#[test]
fn model_json_round_trips() {
    let model = load_model(common::fixture("mnist-mlp-4bit.json")).unwrap();
    let again = QuantModel::from_json(&model.to_json()).unwrap();
    assert_eq!(model, again);
}

#[test]
fn model_errors_name_the_field() {
    let text = std::fs::read_to_string(common::fixture("mnist-mlp-4bit.json")).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["layers"][0]["weights"][4] = 9.into();
    match QuantModel::from_json(&v.to_string()) {
        Err(Error::Model { path, .. }) => assert_eq!(path, "layers[0].weights[4]"),
        other => panic!("{other:?}"),
    }
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["layers"][1]["in"] = 63.into();
    assert!(matches!(QuantModel::from_json(&v.to_string()), Err(Error::Model { .. })));
}

#[test]
fn idx_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let images: Vec<Vec<u8>> = (0..7).map(|_| (0..12).map(|_| rng.random()).collect()).collect();
    let labels: Vec<u8> = (0..7).map(|i| i % 10).collect();
    let (img, lab) = write_idx(&images, &labels, 3, 4);
    let d = parse_mnist_idx(&img, &lab, usize::MAX, 1.0 / 255.0, -128).unwrap();
    assert_eq!(d.len(), 7);
    assert_eq!(d.dim, 12);
    for (q, raw) in d.samples.iter().zip(&images) {
        for (a, b) in q.iter().zip(raw) {
            assert_eq!(*a as i32, *b as i32 - 128);
        }
    }
    assert!(parse_mnist_idx(&img[..20], &lab, usize::MAX, 1.0 / 255.0, -128).is_err());
}

#[test]
fn placement_row_arithmetic() {
    let text = serde_json::json!({
        "name": "shape", "task": "classify",
        "layers": [
            {"in": 784, "out": 16, "weights": vec![1; 784 * 16], "bias": vec![0; 16], "input_scale": 0.004,
             "input_zp": -128, "requant_scales": vec![0.01; 16], "output_zp": 0, "activation": "relu"},
            {"in": 16, "out": 10, "weights": vec![-1; 160], "bias": vec![0; 10], "input_scale": 0.1,
             "input_zp": 0, "requant_scales": vec![0.01; 10], "output_zp": 0, "activation": "none"}
        ]
    });
    let mut model = QuantModel::from_json(&text.to_string()).unwrap();
    let plan = plan_placement(&model);
    assert_eq!(plan.layers[0].rows, 49);
    assert_eq!(plan.layers[1].rows, 1);
    assert_eq!(plan.layers[1].base_row, Some(49));
    assert_eq!(plan.total_rows, 50);

    let mut small = SimConfig {
        geometry: Geometry {
            banks: 1,
            rows_per_bank: 49,
        },
        ..SimConfig::noiseless()
    }
    .build_macro()
    .unwrap();
    assert!(matches!(deploy(&mut model, &mut small), Err(Error::CapacityExceeded { .. })));
}

#[test]
fn zero_noise_evaluation_equals_software_oracle() {
    let mut model = load_model(common::fixture("mnist-mlp-4bit.json")).unwrap();
    let data = mnist(&model, 200);
    let mut mac = SimConfig::noiseless().build_macro().unwrap();
    deploy(&mut model, &mut mac).unwrap();
    let result = evaluate(&model, &mac, &data, 3, 1024).unwrap();
    let oracle: Vec<u32> = data
        .samples
        .iter()
        .map(|x| common::argmax_first(&common::reference_forward(&model, x)) as u32)
        .collect();
    assert_eq!(result.predictions, oracle);
}

#[test]
fn evaluation_is_independent_of_sharding() {
    let mut model = load_model(common::fixture("mnist-mlp-4bit.json")).unwrap();
    let data = mnist(&model, 120);
    let mut mac = SimConfig::default().build_macro().unwrap();
    deploy(&mut model, &mut mac).unwrap();
    let a = evaluate(&model, &mac, &data, 1, 1024).unwrap();
    let b = evaluate(&model, &mac, &data, 7, 1024).unwrap();
    assert_eq!(a, b);
}

#[test]
fn eval_result_json_round_trips() {
    let (mut model, data) = synthetic_anomaly_task(&SynthSpec::default());
    let mut mac = SimConfig::noiseless().build_macro().unwrap();
    deploy(&mut model, &mut mac).unwrap();
    let r = evaluate(&model, &mac, &data, 2, 1024).unwrap();
    let back: EvalResult = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
    assert_eq!(r, back);
}

#[test]
fn synthetic_autoencoder_separates_anomalies() {
    let (mut model, data) = synthetic_anomaly_task(&SynthSpec::default());
    assert_eq!(model.task, Task::Reconstruct);
    let mut mac = SimConfig::default().build_macro().unwrap();
    deploy(&mut model, &mut mac).unwrap();
    let r = evaluate(&model, &mac, &data, 4, 1024).unwrap();
    let auc = r.auc.unwrap();
    assert!(auc >= 0.85, "auc {auc}");
    let positive: Vec<bool> = data.labels.iter().map(|l| *l == 1).collect();
    assert_eq!(common::auc_pairwise(&r.scores, &positive), Some(auc));
}

#[test]
fn random_scores_give_chance_auc() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let n = 4000;
    let scores: Vec<f64> = (0..n).map(|_| rng.random()).collect();
    let positive: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
    let auc = auc_rank(&scores, &positive).unwrap();
    assert!((auc - 0.5).abs() <= 3.0 / (n as f64).sqrt(), "auc {auc}");
}

#[test]
fn auc_is_invariant_to_monotone_rescaling() {
    let mut rng = ChaCha8Rng::seed_from_u64(78);
    let scores: Vec<f64> = (0..300).map(|_| rng.random_range(0..40) as f64).collect();
    let positive: Vec<bool> = (0..300).map(|_| rng.random_bool(0.25)).collect();
    let rescaled: Vec<f64> = scores.iter().map(|s| 3.0 * s.powi(3) + 1.0).collect();
    assert_eq!(auc_rank(&scores, &positive), auc_rank(&rescaled, &positive));
}

#[test]
fn saved_state_reproduces_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("macro.state");
    let cfg = SimConfig {
        seed: 11,
        ..SimConfig::default()
    };
    let mut model = load_model(common::fixture("mnist-mlp-4bit.json")).unwrap();
    let data = mnist(&model, 100);
    let mut mac = cfg.build_macro().unwrap();
    let dep = deploy(&mut model, &mut mac).unwrap();
    save_state(&path, &mac, &cfg, Some(dep.placement.clone())).unwrap();
    let (restored, side) = load_state(&path).unwrap();
    assert_eq!(side.placement, Some(dep.placement));
    assert_eq!(restored.cells(), mac.cells());
    let a = evaluate(&model, &mac, &data, 2, 1024).unwrap();
    let b = evaluate(&model, &restored, &data, 2, 1024).unwrap();
    assert_eq!(a, b);
}

#[test]
fn host_layers_compute_the_same_function() {
    let mut model = load_model(common::fixture("mnist-mlp-4bit.json")).unwrap();
    model.layers[1].placement = eflash_nmcu::model::Placement::Host;
    let data = mnist(&model, 100);
    let mut mac = SimConfig::noiseless().build_macro().unwrap();
    let dep = deploy(&mut model, &mut mac).unwrap();
    assert_eq!(dep.placement.total_rows, 196);
    let result = evaluate(&model, &mac, &data, 2, 1024).unwrap();
    let oracle: Vec<u32> = data
        .samples
        .iter()
        .map(|x| common::argmax_first(&common::reference_forward(&model, x)) as u32)
        .collect();
    assert_eq!(result.predictions, oracle);
}
