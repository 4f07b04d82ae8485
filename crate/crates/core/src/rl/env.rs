//! Small vector-observation environments with discrete actions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NfnError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub observation: Vec<f64>,
    pub reward: f64,
    pub terminal: bool,
}

/// `reset(seed)` starts an episode; `step(action)` advances it.
pub trait Environment {
    fn observation_dim(&self) -> usize;
    fn action_count(&self) -> usize;
    fn reset(&mut self, seed: u64) -> Vec<f64>;
    fn step(&mut self, action: usize) -> Result<StepOutcome>;

    /// Action of a hand-written reference policy, when one exists.
    fn oracle_action(&self) -> Option<usize> {
        None
    }
}

/// Rejects out-of-range actions and non-finite observations or rewards.
pub fn checked_step(env: &mut dyn Environment, action: usize) -> Result<StepOutcome> {
    if action >= env.action_count() {
        return Err(NfnError::Environment(format!(
            "action {action} out of range for {} actions",
            env.action_count()
        )));
    }
    let out = env.step(action)?;
    if out.observation.len() != env.observation_dim() {
        return Err(NfnError::Environment(format!(
            "observation has {} values, expected {}",
            out.observation.len(),
            env.observation_dim()
        )));
    }
    if let Some(v) = out.observation.iter().find(|v| !v.is_finite()) {
        return Err(NfnError::Environment(format!("non-finite observation value {v}")));
    }
    if !out.reward.is_finite() {
        return Err(NfnError::Environment(format!("non-finite reward {}", out.reward)));
    }
    Ok(out)
}

/// Repeats `action` for `frames` steps (stopping at a terminal step) and
/// sums the rewards.
pub fn step_frames(env: &mut dyn Environment, action: usize, frames: usize) -> Result<StepOutcome> {
    let mut total = 0.0;
    let mut out = checked_step(env, action)?;
    total += out.reward;
    for _ in 1..frames {
        if out.terminal {
            break;
        }
        out = checked_step(env, action)?;
        total += out.reward;
    }
    out.reward = total;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvKind {
    TrackAndShoot,
    DodgeLine,
    Gather,
}

impl EnvKind {
    pub fn build(self) -> Box<dyn Environment> {
        match self {
            Self::TrackAndShoot => Box::new(TrackAndShoot::default()),
            Self::DodgeLine => Box::new(DodgeLine::default()),
            Self::Gather => Box::new(Gather::default()),
        }
    }
}

/// Bounces `x` back into `[-1, 1]` and flips `v` when it hits a wall.
fn bounce(x: f64, v: f64) -> (f64, f64) {
    if x > 1.0 {
        (2.0 - x, -v)
    } else if x < -1.0 {
        (-2.0 - x, -v)
    } else {
        (x, v)
    }
}

/// A target slides along a wall at constant speed and bounces at the ends.
/// The agent turns its aim left or right or fires; a shot lands where the
/// aim pointed after a travel delay, so hitting requires leading the target.
///
/// Actions: 0 = left, 1 = right, 2 = fire.
/// Observation: `[aim, target - aim, velocity / max_speed, reload / reload_steps]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackAndShoot {
    pub episode_steps: usize,
    pub aim_step: f64,
    pub travel_steps: usize,
    pub reload_steps: usize,
    pub hit_radius: f64,
    pub min_speed: f64,
    pub max_speed: f64,
    target: f64,
    velocity: f64,
    aim: f64,
    reload: usize,
    /// Landing position and remaining travel of each shot in flight.
    shots: Vec<(f64, usize)>,
    t: usize,
}

impl Default for TrackAndShoot {
    fn default() -> Self {
        Self {
            episode_steps: 40,
            aim_step: 0.1,
            travel_steps: 2,
            reload_steps: 4,
            hit_radius: 0.12,
            min_speed: 0.02,
            max_speed: 0.06,
            target: 0.0,
            velocity: 0.0,
            aim: 0.0,
            reload: 0,
            shots: Vec::new(),
            t: 0,
        }
    }
}

impl TrackAndShoot {
    fn observation(&self) -> Vec<f64> {
        vec![
            self.aim,
            self.target - self.aim,
            self.velocity / self.max_speed,
            self.reload as f64 / self.reload_steps as f64,
        ]
    }

    /// Target position `steps` ahead, including bounces.
    pub fn predict_target(&self, steps: usize) -> f64 {
        let (mut x, mut v) = (self.target, self.velocity);
        for _ in 0..steps {
            (x, v) = bounce(x + v, v);
        }
        x
    }
}

impl Environment for TrackAndShoot {
    fn observation_dim(&self) -> usize {
        4
    }

    fn action_count(&self) -> usize {
        3
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.target = rng.gen_range(-0.9..0.9);
        let speed = rng.gen_range(self.min_speed..self.max_speed);
        self.velocity = if rng.gen_bool(0.5) { speed } else { -speed };
        self.aim = rng.gen_range(-0.5..0.5);
        self.reload = 0;
        self.shots.clear();
        self.t = 0;
        self.observation()
    }

    fn step(&mut self, action: usize) -> Result<StepOutcome> {
        match action {
            0 => self.aim = (self.aim - self.aim_step).max(-1.0),
            1 => self.aim = (self.aim + self.aim_step).min(1.0),
            2 if self.reload == 0 => {
                self.shots.push((self.aim, self.travel_steps));
                self.reload = self.reload_steps;
            }
            2 => {}
            _ => return Err(NfnError::Environment(format!("unknown action {action}"))),
        }
        (self.target, self.velocity) = bounce(self.target + self.velocity, self.velocity);
        let mut reward = 0.0;
        for shot in &mut self.shots {
            shot.1 -= 1;
            if shot.1 == 0 && (self.target - shot.0).abs() <= self.hit_radius {
                reward += 1.0;
            }
        }
        self.shots.retain(|s| s.1 > 0);
        self.reload = self.reload.saturating_sub(1);
        self.t += 1;
        Ok(StepOutcome {
            observation: self.observation(),
            reward,
            terminal: self.t >= self.episode_steps,
        })
    }

    /// Fires when ready and the shot would land on the predicted target,
    /// otherwise turns toward where the target will be when a shot fired
    /// now would land.
    fn oracle_action(&self) -> Option<usize> {
        let landing = self.predict_target(self.travel_steps);
        let gap = landing - self.aim;
        if self.reload == 0 && gap.abs() <= self.hit_radius {
            return Some(2);
        }
        // aim for where the target will be once the next shot can land
        let goal = self.predict_target(self.travel_steps + self.reload.max(1));
        let gap = goal - self.aim;
        if gap.abs() <= 0.5 * self.aim_step && self.reload > 0 {
            // firing while reloading does nothing, which holds the aim
            Some(2)
        } else if gap < 0.0 {
            Some(0)
        } else {
            Some(1)
        }
    }
}

/// Projectiles fall down columns; the agent moves along the bottom row to
/// avoid them. Reward 1 per step survived; a hit ends the episode.
///
/// Actions: 0 = left, 1 = stay, 2 = right.
/// Observation: `[position]` followed by, per column, the height of its
/// lowest projectile divided by the drop height (1 when the column is empty).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DodgeLine {
    pub columns: usize,
    pub height: usize,
    pub spawn_probability: f64,
    pub episode_steps: usize,
    position: usize,
    /// Remaining fall steps of each projectile, per column.
    drops: Vec<Vec<usize>>,
    t: usize,
    rng: ChaCha8Rng,
}

impl Default for DodgeLine {
    fn default() -> Self {
        Self {
            columns: 5,
            height: 4,
            spawn_probability: 0.5,
            episode_steps: 100,
            position: 2,
            drops: vec![Vec::new(); 5],
            t: 0,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }
}

impl DodgeLine {
    fn observation(&self) -> Vec<f64> {
        let mut obs = vec![self.position as f64 / (self.columns - 1) as f64];
        for col in &self.drops {
            let lowest = col.iter().min().map_or(self.height, |&h| h);
            obs.push(lowest as f64 / self.height as f64);
        }
        obs
    }

    fn danger(&self, column: usize) -> usize {
        self.drops[column].iter().min().copied().unwrap_or(usize::MAX)
    }
}

impl Environment for DodgeLine {
    fn observation_dim(&self) -> usize {
        1 + self.columns
    }

    fn action_count(&self) -> usize {
        3
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.position = self.columns / 2;
        self.drops = vec![Vec::new(); self.columns];
        self.t = 0;
        self.observation()
    }

    fn step(&mut self, action: usize) -> Result<StepOutcome> {
        match action {
            0 => self.position = self.position.saturating_sub(1),
            1 => {}
            2 => self.position = (self.position + 1).min(self.columns - 1),
            _ => return Err(NfnError::Environment(format!("unknown action {action}"))),
        }
        let mut hit = false;
        for (c, col) in self.drops.iter_mut().enumerate() {
            for h in col.iter_mut() {
                *h -= 1;
                if *h == 0 && c == self.position {
                    hit = true;
                }
            }
            col.retain(|h| *h > 0);
        }
        if self.rng.gen_bool(self.spawn_probability) {
            let c = self.rng.gen_range(0..self.columns);
            self.drops[c].push(self.height);
        }
        self.t += 1;
        Ok(StepOutcome {
            observation: self.observation(),
            reward: if hit { 0.0 } else { 1.0 },
            terminal: hit || self.t >= self.episode_steps,
        })
    }

    /// Moves to the reachable column whose next drop is furthest away.
    fn oracle_action(&self) -> Option<usize> {
        let candidates = [
            (1, self.position),
            (0, self.position.saturating_sub(1)),
            (2, (self.position + 1).min(self.columns - 1)),
        ];
        candidates
            .iter()
            .max_by_key(|(_, c)| self.danger(*c).min(2))
            .map(|(a, _)| *a)
    }
}

/// The agent walks a line collecting health tokens while its health drains.
/// Reward 1 per token; the episode ends when health runs out.
///
/// Actions: 0 = left, 1 = stay, 2 = right.
/// Observation: `[position, health]` followed by each token's offset from
/// the agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gather {
    pub tokens: usize,
    pub step_size: f64,
    pub pickup_radius: f64,
    pub drain: f64,
    pub token_health: f64,
    pub episode_steps: usize,
    position: f64,
    health: f64,
    token_positions: Vec<f64>,
    t: usize,
    rng: ChaCha8Rng,
}

impl Default for Gather {
    fn default() -> Self {
        Self {
            tokens: 2,
            step_size: 0.1,
            pickup_radius: 0.1,
            drain: 0.02,
            token_health: 0.3,
            episode_steps: 200,
            position: 0.0,
            health: 1.0,
            token_positions: vec![0.0; 2],
            t: 0,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }
}

impl Gather {
    fn observation(&self) -> Vec<f64> {
        let mut obs = vec![self.position, self.health];
        obs.extend(self.token_positions.iter().map(|p| p - self.position));
        obs
    }
}

impl Environment for Gather {
    fn observation_dim(&self) -> usize {
        2 + self.tokens
    }

    fn action_count(&self) -> usize {
        3
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.position = 0.0;
        self.health = 1.0;
        self.token_positions = (0..self.tokens).map(|_| self.rng.gen_range(-1.0..1.0)).collect();
        self.t = 0;
        self.observation()
    }

    fn step(&mut self, action: usize) -> Result<StepOutcome> {
        match action {
            0 => self.position = (self.position - self.step_size).max(-1.0),
            1 => {}
            2 => self.position = (self.position + self.step_size).min(1.0),
            _ => return Err(NfnError::Environment(format!("unknown action {action}"))),
        }
        self.health -= self.drain;
        let mut reward = 0.0;
        for k in 0..self.tokens {
            if (self.token_positions[k] - self.position).abs() <= self.pickup_radius {
                reward += 1.0;
                self.health = (self.health + self.token_health).min(1.0);
                self.token_positions[k] = self.rng.gen_range(-1.0..1.0);
            }
        }
        self.t += 1;
        Ok(StepOutcome {
            observation: self.observation(),
            reward,
            terminal: self.health <= 0.0 || self.t >= self.episode_steps,
        })
    }

    /// Walks toward the nearest token.
    fn oracle_action(&self) -> Option<usize> {
        let nearest = self
            .token_positions
            .iter()
            .map(|p| p - self.position)
            .min_by(|a, b| a.abs().total_cmp(&b.abs()))?;
        Some(if nearest.abs() <= self.pickup_radius {
            1
        } else if nearest < 0.0 {
            0
        } else {
            2
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rollout(env: &mut dyn Environment, seed: u64, policy: impl Fn(&dyn Environment, usize) -> usize) -> f64 {
        env.reset(seed);
        let mut total = 0.0;
        for t in 0.. {
            let a = policy(env, t);
            let out = checked_step(env, a).unwrap();
            total += out.reward;
            if out.terminal {
                break;
            }
        }
        total
    }

    #[test]
    fn bounce_reflects() {
        assert_eq!(bounce(1.2, 0.3), (0.8, -0.3));
        let (x, v) = bounce(-1.1, -0.2);
        assert!((x + 0.9).abs() < 1e-12 && v == 0.2);
    }

    #[test]
    fn environments_are_deterministic_per_seed() {
        for kind in [EnvKind::TrackAndShoot, EnvKind::DodgeLine, EnvKind::Gather] {
            let mut a = kind.build();
            let mut b = kind.build();
            let ra = rollout(a.as_mut(), 42, |_, t| t % 3);
            let rb = rollout(b.as_mut(), 42, |_, t| t % 3);
            assert_eq!(ra, rb);
            assert_eq!(a.reset(7), b.reset(7));
        }
    }

    #[test]
    fn oracles_beat_naive_policies() {
        for kind in [EnvKind::TrackAndShoot, EnvKind::DodgeLine, EnvKind::Gather] {
            let mut env = kind.build();
            let (mut oracle, mut naive) = (0.0, 0.0);
            for seed in 0..25 {
                oracle += rollout(env.as_mut(), seed, |e, _| e.oracle_action().unwrap());
                naive += rollout(env.as_mut(), seed, |_, _| 1);
            }
            assert!(oracle > naive, "{kind:?}: oracle {oracle} naive {naive}");
        }
    }

    #[test]
    fn track_and_shoot_hits_only_after_travel() {
        let mut env = TrackAndShoot {
            min_speed: 0.0,
            max_speed: 1e-9,
            ..TrackAndShoot::default()
        };
        env.reset(0);
        env.aim = env.target;
        let r0 = env.step(2).unwrap().reward;
        let r1 = env.step(2).unwrap().reward;
        assert_eq!((r0, r1), (0.0, 1.0));
        assert_eq!(env.reload, 2);
    }

    #[test]
    fn frame_skip_sums_rewards_and_stops_at_terminal() {
        let mut env = Gather::default();
        env.reset(3);
        let out = step_frames(&mut env, 1, 4).unwrap();
        assert_eq!(env.t, 4);
        assert!(out.reward >= 0.0);
        let mut short = TrackAndShoot {
            episode_steps: 2,
            ..TrackAndShoot::default()
        };
        short.reset(0);
        assert!(step_frames(&mut short, 0, 5).unwrap().terminal);
        assert_eq!(short.t, 2);
    }

    struct Broken;

    impl Environment for Broken {
        fn observation_dim(&self) -> usize {
            1
        }
        fn action_count(&self) -> usize {
            1
        }
        fn reset(&mut self, _: u64) -> Vec<f64> {
            vec![0.0]
        }
        fn step(&mut self, _: usize) -> Result<StepOutcome> {
            Ok(StepOutcome {
                observation: vec![f64::NAN],
                reward: 0.0,
                terminal: false,
            })
        }
    }

    #[test]
    fn nan_observation_is_an_environment_error() {
        assert!(matches!(checked_step(&mut Broken, 0), Err(NfnError::Environment(_))));
        assert!(matches!(checked_step(&mut Broken, 3), Err(NfnError::Environment(_))));
    }
}
