//! Dueling Double Deep Q-Learning.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::Approximator;
use super::replay::Transition;
use crate::error::{config, structural, Result};
use crate::neurogenesis::NeurogenesisRecord;
use crate::training::{Adam, AdamConfig};

/// Multiplicatively decaying exploration rate with a floor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExplorationSchedule {
    pub start: f64,
    pub decay: f64,
    pub floor: f64,
    rate: f64,
}

impl Default for ExplorationSchedule {
    fn default() -> Self {
        Self::new(1.0, 0.9999, 0.1)
    }
}

impl ExplorationSchedule {
    pub fn new(start: f64, decay: f64, floor: f64) -> Self {
        Self {
            start,
            decay,
            floor,
            rate: start.max(floor),
        }
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    /// Applies one training step's decay.
    pub fn step(&mut self) {
        self.rate = (self.rate * self.decay).max(self.floor);
    }

    /// Rate after `k` training steps from the start.
    pub fn after(&self, k: u64) -> f64 {
        (self.start * self.decay.powf(k as f64)).max(self.floor)
    }
}

/// `Q = V + A - mean(A)` row by row.
pub fn dueling(value: ArrayView2<'_, f64>, advantage: ArrayView2<'_, f64>) -> Array2<f64> {
    let mean = advantage.mean_axis(Axis(1)).expect("at least one action");
    let mut q = advantage.to_owned();
    for (b, mut row) in q.axis_iter_mut(Axis(0)).enumerate() {
        row.mapv_inplace(|a| a + value[[b, 0]] - mean[b]);
    }
    q
}

/// First index of the largest entry.
pub fn argmax(row: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (j, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = j;
        }
    }
    best
}

/// `y = r + gamma (1 - terminal) Q_target(s', argmax_a Q_online(s', a))`.
pub fn double_q_targets(
    rewards: ArrayView1<'_, f64>,
    terminals: &[bool],
    q_online_next: ArrayView2<'_, f64>,
    q_target_next: ArrayView2<'_, f64>,
    gamma: f64,
) -> Array1<f64> {
    Array1::from_shape_fn(rewards.len(), |b| {
        if terminals[b] {
            rewards[b]
        } else {
            let a = argmax(q_online_next.row(b));
            rewards[b] + gamma * q_target_next[[b, a]]
        }
    })
}

/// Value and advantage approximators. With a shared trunk one model emits
/// `1 + actions` outputs: the value first, then the advantages.
#[derive(Debug, Clone)]
pub enum DuelNet<M> {
    Separate { value: M, advantage: M },
    Shared(M),
}

impl<M: Approximator> DuelNet<M> {
    pub fn separate(value: M, advantage: M) -> Result<Self> {
        if value.output_dim() != 1 {
            return Err(structural("value head must have a single output"));
        }
        if value.input_dim() != advantage.input_dim() {
            return Err(structural("value and advantage heads disagree on input size"));
        }
        Ok(Self::Separate { value, advantage })
    }

    pub fn shared(trunk: M) -> Result<Self> {
        if trunk.output_dim() < 2 {
            return Err(structural("a shared trunk needs a value and at least one advantage"));
        }
        Ok(Self::Shared(trunk))
    }

    pub fn action_count(&self) -> usize {
        match self {
            Self::Separate { advantage, .. } => advantage.output_dim(),
            Self::Shared(m) => m.output_dim() - 1,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Self::Separate { value, .. } => value.input_dim(),
            Self::Shared(m) => m.input_dim(),
        }
    }

    pub fn models(&self) -> Vec<&M> {
        match self {
            Self::Separate { value, advantage } => vec![value, advantage],
            Self::Shared(m) => vec![m],
        }
    }

    fn models_mut(&mut self) -> Vec<&mut M> {
        match self {
            Self::Separate { value, advantage } => vec![value, advantage],
            Self::Shared(m) => vec![m],
        }
    }

    fn split(outputs: &[Array2<f64>]) -> Array2<f64> {
        match outputs {
            [v, a] => dueling(v.view(), a.view()),
            [m] => {
                let v = m.slice(ndarray::s![.., 0..1]);
                let a = m.slice(ndarray::s![.., 1..]);
                dueling(v, a)
            }
            _ => unreachable!("one or two heads"),
        }
    }

    /// Evaluation-mode Q values; pure.
    pub fn q_values(&self, states: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let outs = self
            .models()
            .iter()
            .map(|m| m.predict(states))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::split(&outs))
    }

    pub fn fingerprint(&self) -> Vec<u64> {
        self.models().iter().map(|m| m.fingerprint()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub gamma: f64,
    pub adam: AdamConfig,
    /// Training steps between hard target copies.
    pub target_sync: u64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            gamma: 0.95,
            adam: AdamConfig::with_learning_rate(5e-4),
            target_sync: 1000,
        }
    }
}

/// Online and target dueling networks with their optimizers.
#[derive(Debug, Clone)]
pub struct DuelHeads<M> {
    online: DuelNet<M>,
    target: DuelNet<M>,
    optimizers: Vec<Adam>,
    config: AgentConfig,
    updates: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateReport {
    pub loss: f64,
    pub targets: Array1<f64>,
    pub events: Vec<NeurogenesisRecord>,
    pub synced: bool,
}

impl<M: Approximator> DuelHeads<M> {
    pub fn new(online: DuelNet<M>, settings: AgentConfig) -> Result<Self> {
        if !(0.0..=1.0).contains(&settings.gamma) {
            return Err(config(format!("discount must lie in [0, 1], got {}", settings.gamma)));
        }
        if settings.target_sync == 0 {
            return Err(config("target sync interval must be positive"));
        }
        let optimizers = online.models().iter().map(|_| Adam::new(settings.adam)).collect();
        Ok(Self {
            target: online.clone(),
            online,
            optimizers,
            config: settings,
            updates: 0,
        })
    }

    pub fn online(&self) -> &DuelNet<M> {
        &self.online
    }

    pub fn target(&self) -> &DuelNet<M> {
        &self.target
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn action_count(&self) -> usize {
        self.online.action_count()
    }

    pub fn q_values(&self, states: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.online.q_values(states)
    }

    pub fn greedy_action(&self, state: &[f64]) -> Result<usize> {
        let x = ArrayView2::from_shape((1, state.len()), state).map_err(|e| structural(e.to_string()))?;
        Ok(argmax(self.q_values(x)?.row(0)))
    }

    /// Uniform action with probability `rate`, greedy otherwise.
    pub fn act(&self, state: &[f64], rate: f64, rng: &mut impl Rng) -> Result<usize> {
        if rate > 0.0 && rng.gen::<f64>() < rate {
            Ok(rng.gen_range(0..self.action_count()))
        } else {
            self.greedy_action(state)
        }
    }

    pub fn sync_target(&mut self) {
        self.target = self.online.clone();
    }

    /// One Double-DQL gradient step on `batch`.
    pub fn update(&mut self, batch: &[&Transition], rng: &mut ChaCha8Rng) -> Result<UpdateReport> {
        if batch.is_empty() {
            return Err(structural("empty training batch"));
        }
        let actions = self.action_count();
        let dim = self.online.input_dim();
        for t in batch {
            t.validate(actions)?;
            if t.state.len() != dim || t.next_state.len() != dim {
                return Err(structural(format!("transition state size differs from {dim}")));
            }
        }
        let n = batch.len();
        let states = Array2::from_shape_fn((n, dim), |(b, i)| batch[b].state[i]);
        let next = Array2::from_shape_fn((n, dim), |(b, i)| batch[b].next_state[i]);
        let rewards = Array1::from_shape_fn(n, |b| batch[b].reward);
        let terminals: Vec<bool> = batch.iter().map(|t| t.terminal).collect();

        for m in self.online.models_mut() {
            m.begin_step(rng)?;
        }
        let q_online_next = {
            let outs = self
                .online
                .models()
                .iter()
                .map(|m| m.forward_train(next.view()).map(|(y, _)| y))
                .collect::<Result<Vec<_>>>()?;
            DuelNet::<M>::split(&outs)
        };
        let q_target_next = self.target.q_values(next.view())?;
        let targets = double_q_targets(
            rewards.view(),
            &terminals,
            q_online_next.view(),
            q_target_next.view(),
            self.config.gamma,
        );

        let mut outs = Vec::new();
        let mut tapes = Vec::new();
        for m in self.online.models() {
            let (y, tape) = m.forward_train(states.view())?;
            outs.push(y);
            tapes.push(tape);
        }
        let q = DuelNet::<M>::split(&outs);
        let mut d_q = Array1::zeros(n);
        let mut loss = 0.0;
        for b in 0..n {
            let diff = q[[b, batch[b].action]] - targets[b];
            loss += diff * diff / n as f64;
            d_q[b] = 2.0 * diff / n as f64;
        }
        // dQ/dV = 1, dQ/dA_j = [j = a] - 1 / |A|
        let inv = 1.0 / actions as f64;
        let d_adv = Array2::from_shape_fn((n, actions), |(b, j)| {
            d_q[b] * (if j == batch[b].action { 1.0 } else { 0.0 } - inv)
        });
        let d_outputs: Vec<Array2<f64>> = match &self.online {
            DuelNet::Separate { .. } => vec![d_q.clone().insert_axis(Axis(1)), d_adv],
            DuelNet::Shared(_) => {
                let mut d = Array2::zeros((n, actions + 1));
                d.column_mut(0).assign(&d_q);
                d.slice_mut(ndarray::s![.., 1..]).assign(&d_adv);
                vec![d]
            }
        };

        let step = self.updates;
        let mut events = Vec::new();
        let models = self.online.models_mut();
        for (((m, tape), d), opt) in models.into_iter().zip(&tapes).zip(&d_outputs).zip(&mut self.optimizers) {
            let grads = m.gradients(tape, d)?;
            m.apply(opt, &grads)?;
            events.extend(m.after_update(tape, step)?);
        }
        self.updates += 1;
        let synced = self.updates.is_multiple_of(self.config.target_sync);
        if synced {
            self.sync_target();
        }
        Ok(UpdateReport {
            loss,
            targets,
            events,
            synced,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rl::model::{Activation, Mlp, MlpConfig};
    use ndarray::array;
    use rand::SeedableRng;

    fn linear(inputs: usize, outputs: usize, seed: u64) -> Mlp {
        let cfg = MlpConfig {
            hidden: vec![],
            activation: Activation::Identity,
        };
        Mlp::new(inputs, outputs, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn schedule_decays_to_floor() {
        let mut s = ExplorationSchedule::default();
        for _ in 0..1000 {
            s.step();
        }
        assert!((s.rate() - 0.9999f64.powi(1000)).abs() < 1e-12);
        assert!((s.after(1000) - s.rate()).abs() < 1e-12);
        assert_eq!(s.after(100_000), 0.1);
        for _ in 0..100_000 {
            s.step();
        }
        assert_eq!(s.rate(), 0.1);
    }

    #[test]
    fn dueling_identities() {
        let v = array![[2.0], [-1.0]];
        let a = array![[1.0, 1.0, 1.0], [0.5, -0.5, 3.0]];
        let q = dueling(v.view(), a.view());
        assert_eq!(q.row(0).to_vec(), vec![2.0, 2.0, 2.0]);
        let mean_gap: f64 = q.row(1).iter().map(|x| x - -1.0).sum::<f64>() / 3.0;
        assert!(mean_gap.abs() < 1e-12);
        let shifted = dueling(v.view(), (&a + 10.0).view());
        assert_eq!(argmax(q.row(1)), argmax(shifted.row(1)));
        assert_eq!(q, shifted);
    }

    #[test]
    fn double_targets_use_online_argmax_and_target_values() {
        let online = array![[1.0, 5.0], [3.0, 0.0]];
        let target = array![[7.0, 2.0], [4.0, 9.0]];
        let y = double_q_targets(
            array![1.0, 0.5].view(),
            &[false, false],
            online.view(),
            target.view(),
            0.5,
        );
        // online picks action 1 then 0; max over target would pick 0 then 1
        assert_eq!(y, array![1.0 + 0.5 * 2.0, 0.5 + 0.5 * 4.0]);
        let term = double_q_targets(
            array![1.0, 0.5].view(),
            &[true, false],
            online.view(),
            target.view(),
            0.9,
        );
        assert_eq!(term[0], 1.0);
        let zero = double_q_targets(
            array![1.0, 0.5].view(),
            &[false, false],
            online.view(),
            target.view(),
            0.0,
        );
        assert_eq!(zero, array![1.0, 0.5]);
    }

    #[test]
    fn greedy_act_and_uniform_exploration() {
        let heads = DuelHeads::new(
            DuelNet::separate(linear(2, 1, 0), linear(2, 3, 1)).unwrap(),
            AgentConfig::default(),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = heads.greedy_action(&[0.3, -0.2]).unwrap();
        for _ in 0..20 {
            assert_eq!(heads.act(&[0.3, -0.2], 0.0, &mut rng).unwrap(), g);
        }
    }

    #[test]
    fn target_syncs_are_exact_copies() {
        let mut heads = DuelHeads::new(
            DuelNet::separate(linear(1, 1, 0), linear(1, 2, 1)).unwrap(),
            AgentConfig {
                target_sync: 3,
                ..AgentConfig::default()
            },
        )
        .unwrap();
        let t = Transition {
            state: vec![0.5],
            action: 1,
            reward: 1.0,
            next_state: vec![0.2],
            terminal: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let initial = heads.target().fingerprint();
        for k in 1..=6 {
            let r = heads.update(&[&t, &t], &mut rng).unwrap();
            assert_eq!(r.synced, k % 3 == 0);
            if r.synced {
                assert_eq!(heads.target().fingerprint(), heads.online().fingerprint());
            } else {
                assert_ne!(heads.target().fingerprint(), heads.online().fingerprint());
            }
        }
        assert_ne!(heads.target().fingerprint(), initial);
    }

    #[test]
    fn terminal_transition_targets_reward() {
        let mut heads = DuelHeads::new(DuelNet::shared(linear(1, 3, 0)).unwrap(), AgentConfig::default()).unwrap();
        let t = Transition {
            state: vec![0.5],
            action: 0,
            reward: -2.5,
            next_state: vec![0.2],
            terminal: true,
        };
        let r = heads.update(&[&t], &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(r.targets[0], -2.5);
    }
}
