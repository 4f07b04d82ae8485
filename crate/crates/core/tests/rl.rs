use ndarray::array;
use nfn_core::inference::{BlockConfig, Network};
use nfn_core::neurogenesis::NeurogenesisConfig;
use nfn_core::rl::train::{evaluate, oracle_scores, train_loop, TrainConfig};
use nfn_core::rl::{
    Activation, AgentConfig, DuelHeads, DuelNet, ExplorationSchedule, Mlp, MlpConfig, TrackAndShoot, Transition,
};
use nfn_core::training::{AdamConfig, NfnModel};
use nfn_core::NfnError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn linear(inputs: usize, outputs: usize, seed: u64) -> Mlp {
    let cfg = MlpConfig {
        hidden: vec![],
        activation: Activation::Identity,
    };
    Mlp::new(inputs, outputs, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn nfn_heads(seed: u64, rules: usize) -> DuelHeads<NfnModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = |outputs| {
        let cfg = BlockConfig::new(4, outputs, rules);
        NfnModel::new(
            Network::from_configs(&[cfg], &mut rng).unwrap(),
            Some(NeurogenesisConfig::default()),
        )
        .unwrap()
    };
    let net = DuelNet::separate(model(1), model(3)).unwrap();
    DuelHeads::new(net, AgentConfig::default()).unwrap()
}

// Deterministic two-state chain: (state, action) -> (next, reward).
const CHAIN: [[(usize, f64); 2]; 2] = [[(0, 0.0), (1, 1.0)], [(0, 0.5), (1, 0.0)]];

fn value_iteration(gamma: f64) -> [[f64; 2]; 2] {
    let mut q = [[0.0f64; 2]; 2];
    for _ in 0..10_000 {
        let v = [q[0][0].max(q[0][1]), q[1][0].max(q[1][1])];
        for s in 0..2 {
            for a in 0..2 {
                let (next, r) = CHAIN[s][a];
                q[s][a] = r + gamma * v[next];
            }
        }
    }
    q
}

#[test]
fn tabular_chain_converges_to_value_iteration() {
    let gamma = 0.9;
    let expected = value_iteration(gamma);
    let one_hot = |s: usize| if s == 0 { vec![1.0, 0.0] } else { vec![0.0, 1.0] };
    let transitions: Vec<Transition> = (0..2)
        .flat_map(|s| (0..2).map(move |a| (s, a)))
        .map(|(s, a)| {
            let (next, reward) = CHAIN[s][a];
            Transition {
                state: one_hot(s),
                action: a,
                reward,
                next_state: one_hot(next),
                terminal: false,
            }
        })
        .collect();
    let batch: Vec<&Transition> = transitions.iter().collect();
    let mut heads = DuelHeads::new(
        DuelNet::separate(linear(2, 1, 0), linear(2, 2, 1)).unwrap(),
        AgentConfig {
            gamma,
            adam: AdamConfig::with_learning_rate(1e-3),
            target_sync: 100,
        },
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..60_000 {
        heads.update(&batch, &mut rng).unwrap();
    }
    let q = heads.q_values(array![[1.0, 0.0], [0.0, 1.0]].view()).unwrap();
    for s in 0..2 {
        for a in 0..2 {
            assert!(
                (q[[s, a]] - expected[s][a]).abs() < 1e-3,
                "Q({s},{a}) = {} vs {}",
                q[[s, a]],
                expected[s][a]
            );
        }
    }
}

#[test]
fn full_exploration_is_uniform() {
    let heads = DuelHeads::new(
        DuelNet::separate(linear(2, 1, 0), linear(2, 3, 1)).unwrap(),
        AgentConfig::default(),
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let draws = 100_000;
    let mut counts = [0usize; 3];
    for _ in 0..draws {
        counts[heads.act(&[0.4, -0.1], 1.0, &mut rng).unwrap()] += 1;
    }
    let expected = draws as f64 / 3.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // 99.9th percentile of chi-square with 2 degrees of freedom
    assert!(chi2 < 13.816, "chi2 = {chi2}, counts = {counts:?}");
}

#[test]
fn evaluation_leaves_agent_untouched() {
    let mut heads = nfn_heads(3, 8);
    let mut env = TrackAndShoot::default();
    let cfg = TrainConfig {
        total_steps: 300,
        epoch_steps: 100,
        eval_episodes: 2,
        ..TrainConfig::default()
    };
    train_loop(&mut env, &mut heads, &cfg, None).unwrap();
    let before = format!("{heads:?}");
    let fingerprints = heads.online().fingerprint();
    let first = evaluate(&mut env, &heads, 5, 42, 1).unwrap();
    let second = evaluate(&mut env, &heads, 5, 42, 1).unwrap();
    assert_eq!(first, second);
    assert_eq!(heads.online().fingerprint(), fingerprints);
    assert_eq!(format!("{heads:?}"), before);
}

#[test]
fn training_log_is_reproducible() {
    let run = || {
        let mut heads = nfn_heads(5, 8);
        let mut env = TrackAndShoot::default();
        let cfg = TrainConfig {
            total_steps: 400,
            epoch_steps: 100,
            eval_episodes: 3,
            seed: 9,
            ..TrainConfig::default()
        };
        let mut log = Vec::new();
        let report = train_loop(&mut env, &mut heads, &cfg, Some(&mut log)).unwrap();
        (String::from_utf8(log).unwrap(), report)
    };
    let (a, report) = run();
    let (b, _) = run();
    assert_eq!(a, b);
    let lines: Vec<serde_json::Value> = a.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 4);
    for (k, line) in lines.iter().enumerate() {
        assert_eq!(line["epoch"], k as u64 + 1);
        for key in ["mean", "sd", "slope"] {
            assert!(line[key].is_number(), "{key} missing");
        }
    }
    assert_eq!(report.epochs.len(), 4);
}

#[test]
fn exploration_follows_schedule_during_training() {
    let mut heads = DuelHeads::new(
        DuelNet::separate(linear(4, 1, 0), linear(4, 3, 1)).unwrap(),
        AgentConfig::default(),
    )
    .unwrap();
    let mut env = TrackAndShoot::default();
    let cfg = TrainConfig {
        total_steps: 1000,
        epoch_steps: 500,
        eval_episodes: 1,
        learning_starts: 32,
        ..TrainConfig::default()
    };
    let report = train_loop(&mut env, &mut heads, &cfg, None).unwrap();
    let updates = heads.updates();
    assert_eq!(updates, 1000 - 31);
    let expected = ExplorationSchedule::default().after(updates);
    assert!((report.epochs[1].exploration - expected).abs() < 1e-9);
}

#[test]
fn mismatched_agent_is_rejected() {
    let mut heads = DuelHeads::new(
        DuelNet::separate(linear(3, 1, 0), linear(3, 3, 1)).unwrap(),
        AgentConfig::default(),
    )
    .unwrap();
    let err = train_loop(&mut TrackAndShoot::default(), &mut heads, &TrainConfig::default(), None).unwrap_err();
    assert!(matches!(err, NfnError::Config(_)));
}

#[test]
fn oracle_is_deterministic_per_seed() {
    let mut env = TrackAndShoot::default();
    let a = oracle_scores(&mut env, 5, 100, 1).unwrap();
    let b = oracle_scores(&mut env, 5, 100, 1).unwrap();
    assert_eq!(a, b);
    assert!(a.iter().all(|&s| s > 0.0));
}
