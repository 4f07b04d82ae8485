use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{input, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub terminal: bool,
}

impl Transition {
    pub fn validate(&self, action_count: usize) -> Result<()> {
        if self.action >= action_count {
            return Err(input(format!(
                "action {} out of range for {action_count} actions",
                self.action
            )));
        }
        let finite = self.state.iter().chain(&self.next_state).all(|v| v.is_finite());
        if !finite || !self.reward.is_finite() {
            return Err(input("transition contains non-finite values"));
        }
        Ok(())
    }
}

/// Fixed-capacity experience memory with FIFO eviction and uniform sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            items: VecDeque::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Appends a transition, evicting the oldest one when full.
    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// `n` transitions drawn uniformly with replacement.
    pub fn sample<'a>(&'a self, n: usize, rng: &mut impl Rng) -> Vec<&'a Transition> {
        if self.items.is_empty() {
            return Vec::new();
        }
        (0..n)
            .map(|_| &self.items[rng.gen_range(0..self.items.len())])
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(k: usize) -> Transition {
        Transition {
            state: vec![k as f64],
            action: 0,
            reward: k as f64,
            next_state: vec![k as f64 + 1.0],
            terminal: false,
        }
    }

    #[test]
    fn evicts_oldest_first() {
        let mut buf = ReplayBuffer::new(3);
        for k in 0..5 {
            buf.push(t(k));
            assert!(buf.len() <= 3);
        }
        let kept: Vec<f64> = buf.iter().map(|x| x.reward).collect();
        assert_eq!(kept, vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn sampling_is_uniform_and_seeded() {
        let mut buf = ReplayBuffer::new(4);
        for k in 0..4 {
            buf.push(t(k));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut counts = [0usize; 4];
        for x in buf.sample(40_000, &mut rng) {
            counts[x.reward as usize] += 1;
        }
        for c in counts {
            assert!((c as f64 / 10_000.0 - 1.0).abs() < 0.05, "{counts:?}");
        }
        let a: Vec<_> = buf
            .sample(8, &mut ChaCha8Rng::seed_from_u64(2))
            .into_iter()
            .cloned()
            .collect();
        let b: Vec<_> = buf
            .sample(8, &mut ChaCha8Rng::seed_from_u64(2))
            .into_iter()
            .cloned()
            .collect();
        assert_eq!(a, b);
    }

    #[test]
    fn validation() {
        assert!(t(1).validate(2).is_ok());
        assert!(Transition { action: 2, ..t(1) }.validate(2).is_err());
        assert!(Transition {
            reward: f64::NAN,
            ..t(1)
        }
        .validate(2)
        .is_err());
    }
}
