//! Epoch-based training and evaluation loop.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::agent::{DuelHeads, ExplorationSchedule};
use super::env::{step_frames, Environment};
use super::model::Approximator;
use super::replay::{ReplayBuffer, Transition};
use crate::error::{config, NfnError, Result};
use crate::neurogenesis::NeurogenesisRecord;
use crate::training::write_jsonl;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Environment steps (agent decisions) to train for.
    pub total_steps: u64,
    pub epoch_steps: u64,
    pub eval_episodes: usize,
    pub batch_size: usize,
    pub memory: usize,
    /// Times each chosen action is repeated.
    pub frames: usize,
    /// Replay size before gradient updates begin.
    pub learning_starts: usize,
    pub exploration: ExplorationSchedule,
    pub seed: u64,
    /// First evaluation episode seed; evaluation seeds are the same every epoch.
    pub eval_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 20_000,
            epoch_steps: 500,
            eval_episodes: 25,
            batch_size: 32,
            memory: 10_000,
            frames: 1,
            learning_starts: 32,
            exploration: ExplorationSchedule::default(),
            seed: 0,
            eval_seed: 1_000_000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epoch_steps == 0 || self.eval_episodes == 0 || self.batch_size == 0 {
            return Err(config(
                "epoch steps, evaluation episodes and batch size must be positive",
            ));
        }
        if self.memory == 0 || self.frames == 0 {
            return Err(config("replay memory and frames must be positive"));
        }
        Ok(())
    }
}

/// One line of the episode log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub mean: f64,
    pub sd: f64,
    /// Least-squares slope of the epoch means so far.
    pub slope: f64,
    pub steps: u64,
    pub exploration: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RlReport {
    pub epochs: Vec<EpochRecord>,
    pub events: Vec<NeurogenesisRecord>,
    pub train_episodes: u64,
}

impl RlReport {
    pub fn best_mean(&self) -> f64 {
        self.epochs.iter().map(|e| e.mean).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn final_slope(&self) -> f64 {
        self.epochs.last().map_or(0.0, |e| e.slope)
    }
}

/// Mean and sample standard deviation.
pub fn mean_sd(scores: &[f64]) -> (f64, f64) {
    let n = scores.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = scores.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Slope of the least-squares line through `(k, ys[k])`.
pub fn least_squares_slope(ys: &[f64]) -> f64 {
    let n = ys.len();
    if n < 2 {
        return 0.0;
    }
    let x_mean = (n - 1) as f64 / 2.0;
    let y_mean = ys.iter().sum::<f64>() / n as f64;
    let (mut num, mut den) = (0.0, 0.0);
    for (k, y) in ys.iter().enumerate() {
        let dx = k as f64 - x_mean;
        num += dx * (y - y_mean);
        den += dx * dx;
    }
    num / den
}

/// Total reward of one episode under `policy`.
pub fn run_episode(
    env: &mut dyn Environment,
    seed: u64,
    frames: usize,
    mut policy: impl FnMut(&dyn Environment, &[f64]) -> Result<usize>,
) -> Result<f64> {
    let mut obs = env.reset(seed);
    let mut total = 0.0;
    loop {
        let a = policy(env, &obs)?;
        let out = step_frames(env, a, frames)?;
        total += out.reward;
        if out.terminal {
            return Ok(total);
        }
        obs = out.observation;
    }
}

/// Greedy evaluation scores; touches no agent state.
pub fn evaluate<M: Approximator>(
    env: &mut dyn Environment,
    heads: &DuelHeads<M>,
    episodes: usize,
    seed_base: u64,
    frames: usize,
) -> Result<Vec<f64>> {
    (0..episodes as u64)
        .map(|k| run_episode(env, seed_base + k, frames, |_, obs| heads.greedy_action(obs)))
        .collect()
}

/// Scores of the environment's scripted policy.
pub fn oracle_scores(env: &mut dyn Environment, episodes: usize, seed_base: u64, frames: usize) -> Result<Vec<f64>> {
    (0..episodes as u64)
        .map(|k| {
            run_episode(env, seed_base + k, frames, |e, _| {
                e.oracle_action()
                    .ok_or_else(|| NfnError::Usage("environment has no scripted policy".into()))
            })
        })
        .collect()
}

/// Scores of a uniformly random policy.
pub fn random_scores(
    env: &mut dyn Environment,
    episodes: usize,
    seed_base: u64,
    frames: usize,
    rng_seed: u64,
) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    (0..episodes as u64)
        .map(|k| {
            run_episode(
                env,
                seed_base + k,
                frames,
                |e, _| Ok(rng.gen_range(0..e.action_count())),
            )
        })
        .collect()
}

fn episode_seed(seed: u64, episode: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(episode)
}

/// Interleaves acting, replay writes, Double-DQL updates, exploration decay
/// and per-epoch greedy evaluation.
pub fn train_loop<M: Approximator>(
    env: &mut dyn Environment,
    heads: &mut DuelHeads<M>,
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<RlReport> {
    cfg.validate()?;
    if env.observation_dim() != heads.online().input_dim() || env.action_count() != heads.action_count() {
        return Err(config("agent and environment disagree on observation or action sizes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut replay = ReplayBuffer::new(cfg.memory);
    let mut schedule = cfg.exploration;
    let mut episodes = 0u64;
    let mut obs = env.reset(episode_seed(cfg.seed, episodes));
    let mut epochs = Vec::new();
    let mut means = Vec::new();
    let mut events = Vec::new();
    let mut loss_sum = 0.0;
    let mut loss_count = 0usize;

    for step in 1..=cfg.total_steps {
        let action = heads.act(&obs, schedule.rate(), &mut rng)?;
        let out = step_frames(env, action, cfg.frames)?;
        replay.push(Transition {
            state: obs,
            action,
            reward: out.reward,
            next_state: out.observation.clone(),
            terminal: out.terminal,
        });
        obs = if out.terminal {
            episodes += 1;
            env.reset(episode_seed(cfg.seed, episodes))
        } else {
            out.observation
        };

        if replay.len() >= cfg.learning_starts.max(1) {
            let batch = replay.sample(cfg.batch_size, &mut rng);
            let report = heads.update(&batch, &mut rng)?;
            loss_sum += report.loss;
            loss_count += 1;
            events.extend(report.events);
            schedule.step();
        }

        if step % cfg.epoch_steps == 0 {
            let scores = evaluate(env, heads, cfg.eval_episodes, cfg.eval_seed, cfg.frames)?;
            // evaluation reused the environment; restart the training episode
            episodes += 1;
            obs = env.reset(episode_seed(cfg.seed, episodes));
            let (mean, sd) = mean_sd(&scores);
            means.push(mean);
            let record = EpochRecord {
                epoch: step / cfg.epoch_steps,
                mean,
                sd,
                slope: least_squares_slope(&means),
                steps: step,
                exploration: schedule.rate(),
                loss: if loss_count > 0 {
                    loss_sum / loss_count as f64
                } else {
                    0.0
                },
            };
            loss_sum = 0.0;
            loss_count = 0;
            if let Some(out) = log.as_deref_mut() {
                write_jsonl(out, std::slice::from_ref(&record))?;
            }
            epochs.push(record);
        }
    }
    Ok(RlReport {
        epochs,
        events,
        train_episodes: episodes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rl::env::TrackAndShoot;

    #[test]
    fn slope_and_summary() {
        assert_eq!(least_squares_slope(&[1.0, 2.0, 3.0, 4.0]), 1.0);
        assert_eq!(least_squares_slope(&[5.0]), 0.0);
        assert!((least_squares_slope(&[3.0, 1.0, -1.0]) + 2.0).abs() < 1e-12);
        let (m, sd) = mean_sd(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((sd - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn random_baseline_is_reproducible() {
        let mut env = TrackAndShoot::default();
        let a = random_scores(&mut env, 10, 0, 1, 9).unwrap();
        let b = random_scores(&mut env, 10, 0, 1, 9).unwrap();
        assert_eq!(a, b);
        let c = random_scores(&mut env, 10, 0, 1, 10).unwrap();
        assert_ne!(a, c);
    }
}
