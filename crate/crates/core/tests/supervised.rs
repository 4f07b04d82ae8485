use ndarray::Array2;
use nfn_core::inference::{BlockConfig, Network};
use nfn_core::neurogenesis::NeurogenesisConfig;
use nfn_core::rules::Estimator;
use nfn_core::training::{fit_supervised, Adam, AdamConfig, Checkpoint, Dataset, NfnModel, SupervisedConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn sine_data(n: usize) -> Dataset {
    let x = Array2::from_shape_fn((n, 1), |(i, _)| -3.0 + 6.0 * i as f64 / (n - 1) as f64);
    let y = x.mapv(f64::sin);
    Dataset::new(x, y).unwrap()
}

fn sine_model(seed: u64) -> NfnModel {
    let mut cfg = BlockConfig::new(1, 1, 8);
    cfg.input_range = (-3.0, 3.0);
    cfg.rule_bank.estimator = Estimator::Ste;
    let net = Network::from_configs(&[cfg], &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    NfnModel::new(net, Some(NeurogenesisConfig::default())).unwrap()
}

#[test]
fn sine_regression_reaches_low_error() {
    let data = sine_data(256);
    let mut model = sine_model(0);
    let cfg = SupervisedConfig::default();
    let mut adam = Adam::new(cfg.adam);
    let report = fit_supervised(&mut model, &mut adam, &data, &cfg, None).unwrap();
    assert!(report.final_loss < 1e-2, "final MSE {}", report.final_loss);
}

#[test]
fn constant_target_is_absorbed() {
    let x = Array2::from_shape_fn((64, 2), |(i, j)| ((i * 7 + j * 3) % 13) as f64 / 6.5 - 1.0);
    let y = Array2::from_elem((64, 1), 0.75);
    let data = Dataset::new(x, y).unwrap();
    let net = Network::from_configs(&[BlockConfig::new(2, 1, 4)], &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let mut model = NfnModel::new(net, None).unwrap();
    let cfg = SupervisedConfig {
        steps: 2000,
        ..SupervisedConfig::default()
    };
    let mut adam = Adam::new(cfg.adam);
    let report = fit_supervised(&mut model, &mut adam, &data, &cfg, None).unwrap();
    assert!(report.final_loss < 1e-4, "{}", report.final_loss);
}

#[test]
fn incomplete_stream_sprouts_then_stops_failing() {
    // inputs live far outside the initial partition of [-1, 1]
    let x = Array2::from_shape_fn((256, 2), |(i, j)| {
        4.0 + j as f64 + 0.5 * ((i * 37 % 101) as f64 / 50.0 - 1.0)
    });
    let y = x.column(0).mapv(|v| v * 0.1).insert_axis(ndarray::Axis(1));
    let data = Dataset::new(x, y).unwrap();
    let net = Network::from_configs(&[BlockConfig::new(2, 1, 4)], &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let mut model = NfnModel::new(net, Some(NeurogenesisConfig { epsilon: 0.4, delay: 2 })).unwrap();
    let cfg = SupervisedConfig {
        steps: 200,
        ..SupervisedConfig::default()
    };
    let mut adam = Adam::new(cfg.adam);
    let report = fit_supervised(&mut model, &mut adam, &data, &cfg, None).unwrap();
    assert!(!report.events.is_empty());
    assert!(report.metrics[0].epsilon_failures > 0);
    let tail = &report.metrics[report.metrics.len() - 50..];
    assert!(
        tail.iter().all(|m| m.epsilon_failures == 0),
        "{:?}",
        tail.iter().map(|m| m.epsilon_failures).collect::<Vec<_>>()
    );
    let counts: Vec<usize> = report.metrics.iter().map(|m| m.term_counts[0]).collect();
    assert!(counts.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn training_is_deterministic_and_metrics_stream_is_stable() {
    let run = || {
        let data = sine_data(64);
        let mut model = sine_model(9);
        let cfg = SupervisedConfig {
            steps: 60,
            batch_size: 16,
            adam: AdamConfig::with_learning_rate(0.02),
            seed: 5,
        };
        let mut adam = Adam::new(cfg.adam);
        let mut buf = Vec::new();
        fit_supervised(&mut model, &mut adam, &data, &cfg, Some(&mut buf)).unwrap();
        buf
    };
    let a = run();
    assert!(!a.is_empty());
    assert_eq!(a, run());
    let first: serde_json::Value = serde_json::from_slice(a.split(|b| *b == b'\n').next().unwrap()).unwrap();
    for key in ["step", "loss", "epsilon_failures", "structure_edits", "term_counts"] {
        assert!(first.get(key).is_some(), "missing {key}");
    }
}

#[test]
fn checkpoint_round_trip_resumes_identically() {
    let data = sine_data(64);
    let cfg = SupervisedConfig {
        steps: 30,
        batch_size: 16,
        ..SupervisedConfig::default()
    };
    let mut model = sine_model(2);
    let mut adam = Adam::new(cfg.adam);
    fit_supervised(&mut model, &mut adam, &data, &cfg, None).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    Checkpoint::capture(&model, &adam).save(&path).unwrap();
    let (mut restored, mut adam2) = Checkpoint::load(&path).unwrap().restore().unwrap();
    assert_eq!(restored.network(), model.network());

    let more = SupervisedConfig { seed: 1, ..cfg };
    let a = fit_supervised(&mut model, &mut adam, &data, &more, None).unwrap();
    let b = fit_supervised(&mut restored, &mut adam2, &data, &more, None).unwrap();
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.final_loss.to_bits(), b.final_loss.to_bits());
}
