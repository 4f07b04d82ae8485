//! TOML run configuration. Keys follow the usual hyperparameter symbols
//! (`|U|`, `τ`, `θ`, `N`, `ε`, `+μ`, `w_u`, `α`, `CF`, `LN`, `η`, ...); every
//! key also has a plain ASCII alias.

use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::inference::{BlockConfig, CertaintyMode, FiringMode, InferenceConfig, Network, Normalizer};
use crate::neurogenesis::NeurogenesisConfig;
use crate::rl::{
    Activation, AgentConfig, DuelHeads, DuelNet, EnvKind, ExplorationSchedule, Mlp, MlpConfig, TrainConfig,
};
use crate::rules::{Estimator, RuleBankConfig};
use crate::training::{AdamConfig, Dataset, NfnModel, SupervisedConfig};

/// Neuro-fuzzy block hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NfnSection {
    #[serde(rename = "|U|", alias = "rules")]
    pub rules: usize,
    /// `false` selects STE.
    #[serde(rename = "STGE", alias = "stge")]
    pub stge: bool,
    #[serde(rename = "τ", alias = "tau")]
    pub tau: f64,
    #[serde(rename = "θ", alias = "theta")]
    pub theta: f64,
    #[serde(rename = "N", alias = "retain_batches")]
    pub retain_batches: usize,
    #[serde(rename = "ε", alias = "epsilon")]
    pub epsilon: f64,
    #[serde(rename = "+μ", alias = "delay")]
    pub delay: usize,
    #[serde(rename = "w_u", alias = "firing_mode")]
    pub firing_mode: FiringMode,
    #[serde(rename = "α", alias = "alpha")]
    pub alpha: f64,
    #[serde(rename = "CF", alias = "cf")]
    pub cf: bool,
    #[serde(rename = "LN", alias = "ln")]
    pub ln: bool,
    pub neurogenesis: bool,
    pub initial_terms: usize,
    pub input_range: (f64, f64),
}

impl Default for NfnSection {
    fn default() -> Self {
        Self {
            rules: 64,
            stge: true,
            tau: 0.6,
            theta: 0.0,
            retain_batches: 64,
            epsilon: 0.4,
            delay: 3,
            firing_mode: FiringMode::Sum,
            alpha: 1.0,
            cf: false,
            ln: false,
            neurogenesis: true,
            initial_terms: 3,
            input_range: (-1.0, 1.0),
        }
    }
}

impl NfnSection {
    pub fn block_config(&self, inputs: usize, outputs: usize) -> Result<BlockConfig> {
        let rule_bank = RuleBankConfig {
            estimator: if self.stge { Estimator::Stge } else { Estimator::Ste },
            temperature: self.tau,
            retain_batches: self.retain_batches,
            threshold_percentile: self.theta,
        };
        rule_bank.validate()?;
        Ok(BlockConfig {
            inputs,
            outputs,
            rules: self.rules,
            initial_terms: self.initial_terms,
            input_range: self.input_range,
            inference: InferenceConfig {
                firing_mode: self.firing_mode,
                normalizer: Normalizer::from_alpha(self.alpha)?,
                layer_norm: self.ln,
                ..InferenceConfig::default()
            },
            rule_bank,
            certainty: if self.cf {
                CertaintyMode::Renormalized
            } else {
                CertaintyMode::Off
            },
        })
    }

    pub fn neurogenesis_config(&self) -> Option<NeurogenesisConfig> {
        self.neurogenesis.then_some(NeurogenesisConfig {
            epsilon: self.epsilon,
            delay: self.delay,
        })
    }

    pub fn model(&self, inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Result<NfnModel> {
        let block = self.block_config(inputs, outputs)?;
        NfnModel::new(Network::from_configs(&[block], rng)?, self.neurogenesis_config())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SupervisedTask {
    /// `y = sin(x)` on an even grid over `range`.
    Sine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SupervisedSection {
    pub task: SupervisedTask,
    pub samples: usize,
    pub range: (f64, f64),
    pub steps: usize,
    #[serde(rename = "|X|", alias = "batch_size")]
    pub batch_size: usize,
    #[serde(rename = "η", alias = "learning_rate")]
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for SupervisedSection {
    fn default() -> Self {
        Self {
            task: SupervisedTask::Sine,
            samples: 256,
            range: (-3.0, 3.0),
            steps: 2000,
            batch_size: 32,
            learning_rate: 1e-2,
            seed: 0,
        }
    }
}

impl SupervisedSection {
    pub fn dataset(&self) -> Result<Dataset> {
        if self.samples < 2 {
            return Err(config("supervised task needs at least two samples"));
        }
        let (lo, hi) = self.range;
        let n = self.samples;
        let x = Array2::from_shape_fn((n, 1), |(i, _)| lo + (hi - lo) * i as f64 / (n - 1) as f64);
        let y = match self.task {
            SupervisedTask::Sine => x.mapv(f64::sin),
        };
        Dataset::new(x, y)
    }

    /// Model sized for the task, initialized from `seed`.
    pub fn model(&self, nfn: &NfnSection) -> Result<NfnModel> {
        nfn.model(1, 1, &mut ChaCha8Rng::seed_from_u64(self.seed))
    }

    pub fn training_config(&self) -> SupervisedConfig {
        SupervisedConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            adam: AdamConfig::with_learning_rate(self.learning_rate),
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ApproximatorKind {
    Nfn,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlSection {
    pub env: EnvKind,
    pub approximator: ApproximatorKind,
    /// One approximator emitting the value and the advantages instead of two.
    pub shared_trunk: bool,
    #[serde(rename = "γ", alias = "gamma")]
    pub gamma: f64,
    #[serde(rename = "η", alias = "learning_rate")]
    pub learning_rate: f64,
    #[serde(rename = "|X|", alias = "batch_size")]
    pub batch_size: usize,
    #[serde(rename = "Mem.", alias = "memory")]
    pub memory: usize,
    #[serde(rename = "Frames", alias = "frames")]
    pub frames: usize,
    /// MLP hidden width.
    #[serde(rename = "|N|", alias = "hidden")]
    pub hidden: usize,
    pub hidden_layers: usize,
    #[serde(rename = "h_n", alias = "activation")]
    pub activation: Activation,
    pub steps: u64,
    pub epoch_steps: u64,
    pub eval_episodes: usize,
    pub learning_starts: usize,
    pub target_sync: u64,
    pub exploration_start: f64,
    pub exploration_decay: f64,
    pub exploration_floor: f64,
    pub seed: u64,
    pub eval_seed: u64,
}

impl Default for RlSection {
    fn default() -> Self {
        let train = TrainConfig::default();
        let agent = AgentConfig::default();
        let schedule = ExplorationSchedule::default();
        let mlp = MlpConfig::default();
        Self {
            env: EnvKind::TrackAndShoot,
            approximator: ApproximatorKind::Nfn,
            shared_trunk: false,
            gamma: agent.gamma,
            learning_rate: agent.adam.learning_rate,
            batch_size: train.batch_size,
            memory: train.memory,
            frames: train.frames,
            hidden: mlp.hidden[0],
            hidden_layers: mlp.hidden.len(),
            activation: mlp.activation,
            steps: train.total_steps,
            epoch_steps: train.epoch_steps,
            eval_episodes: train.eval_episodes,
            learning_starts: train.learning_starts,
            target_sync: agent.target_sync,
            exploration_start: schedule.start,
            exploration_decay: schedule.decay,
            exploration_floor: schedule.floor,
            seed: train.seed,
            eval_seed: train.eval_seed,
        }
    }
}

impl RlSection {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            total_steps: self.steps,
            epoch_steps: self.epoch_steps,
            eval_episodes: self.eval_episodes,
            batch_size: self.batch_size,
            memory: self.memory,
            frames: self.frames,
            learning_starts: self.learning_starts,
            exploration: ExplorationSchedule::new(
                self.exploration_start,
                self.exploration_decay,
                self.exploration_floor,
            ),
            seed: self.seed,
            eval_seed: self.eval_seed,
        }
    }

    pub fn agent_config(&self) -> AgentConfig {
        AgentConfig {
            gamma: self.gamma,
            adam: AdamConfig::with_learning_rate(self.learning_rate),
            target_sync: self.target_sync,
        }
    }

    pub fn mlp_config(&self) -> MlpConfig {
        MlpConfig {
            hidden: vec![self.hidden; self.hidden_layers],
            activation: self.activation,
        }
    }

    fn duel<M: crate::rl::Approximator>(
        &self,
        actions: usize,
        mut build: impl FnMut(usize) -> Result<M>,
    ) -> Result<DuelHeads<M>> {
        let net = if self.shared_trunk {
            DuelNet::shared(build(actions + 1)?)?
        } else {
            let value = build(1)?;
            DuelNet::separate(value, build(actions)?)?
        };
        DuelHeads::new(net, self.agent_config())
    }

    /// Dueling heads built from neuro-fuzzy blocks; the model seed is
    /// derived from `seed`.
    pub fn nfn_heads(&self, nfn: &NfnSection, inputs: usize, actions: usize) -> Result<DuelHeads<NfnModel>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        self.duel(actions, |out| nfn.model(inputs, out, &mut rng))
    }

    pub fn mlp_heads(&self, inputs: usize, actions: usize) -> Result<DuelHeads<Mlp>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let cfg = self.mlp_config();
        self.duel(actions, |out| Mlp::new(inputs, out, &cfg, &mut rng))
    }
}

/// Complete run configuration; every section is optional in the file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub nfn: NfnSection,
    pub supervised: SupervisedSection,
    pub rl: RlSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::NfnError;

    #[test]
    fn symbol_and_ascii_keys_agree() {
        let symbols = RunConfig::from_toml(
            r#"
            [nfn]
            "|U|" = 32
            "τ" = 0.9
            "θ" = 10
            "N" = 128
            "ε" = 0.3
            "+μ" = 5
            "w_u" = "Mean"
            "α" = 1.5
            "CF" = true
            "LN" = true
            [rl]
            "η" = 1e-4
            "γ" = 0.9
            "Mem." = 20000
            "|X|" = 16
            "#,
        )
        .unwrap();
        let ascii = RunConfig::from_toml(
            r#"
            [nfn]
            rules = 32
            tau = 0.9
            theta = 10
            retain_batches = 128
            epsilon = 0.3
            delay = 5
            firing_mode = "Mean"
            alpha = 1.5
            cf = true
            ln = true
            [rl]
            learning_rate = 1e-4
            gamma = 0.9
            memory = 20000
            batch_size = 16
            "#,
        )
        .unwrap();
        assert_eq!(symbols, ascii);
        let block = symbols.nfn.block_config(3, 2).unwrap();
        assert_eq!(block.rules, 32);
        assert_eq!(block.inference.normalizer, Normalizer::Entmax15);
        assert_eq!(block.certainty, CertaintyMode::Renormalized);
        assert_eq!(block.rule_bank.retain_batches, 128);
    }

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.rl.train_config(), TrainConfig::default());
        assert_eq!(cfg.rl.agent_config(), AgentConfig::default());
        assert_eq!(RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
    }

    #[test]
    fn bad_values_are_config_errors() {
        assert!(matches!(
            RunConfig::from_toml("[nfn]\nunknown = 1"),
            Err(NfnError::Toml(_))
        ));
        let cfg = RunConfig::from_toml("[nfn]\n\"α\" = 1.2").unwrap();
        assert!(matches!(cfg.nfn.block_config(1, 1), Err(NfnError::Config(_))));
        let cfg = RunConfig::from_toml("[nfn]\n\"τ\" = 0").unwrap();
        assert!(matches!(cfg.nfn.block_config(1, 1), Err(NfnError::Config(_))));
    }

    #[test]
    fn heads_match_environment() {
        let cfg = RunConfig::default();
        let env = cfg.rl.env.build();
        let heads = cfg
            .rl
            .nfn_heads(&cfg.nfn, env.observation_dim(), env.action_count())
            .unwrap();
        assert_eq!(heads.action_count(), env.action_count());
        let shared = RlSection {
            shared_trunk: true,
            hidden: 8,
            ..RlSection::default()
        };
        let mlp = shared.mlp_heads(4, 3).unwrap();
        assert_eq!(mlp.action_count(), 3);
    }
}
