//! Reinforcement-learning harness: environments, replay, dueling agents.

pub mod agent;
pub mod env;
pub mod model;
pub mod replay;
pub mod train;

pub use agent::{AgentConfig, DuelHeads, DuelNet, ExplorationSchedule, UpdateReport};
pub use env::{DodgeLine, EnvKind, Environment, Gather, StepOutcome, TrackAndShoot};
pub use model::{Activation, Approximator, Mlp, MlpConfig};
pub use replay::{ReplayBuffer, Transition};
pub use train::{evaluate, oracle_scores, random_scores, train_loop, EpochRecord, RlReport, TrainConfig};
