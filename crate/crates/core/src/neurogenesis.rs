//! Batch-delayed neurogenesis of the membership layer.
//!
//! Inputs that fail epsilon-completeness are streamed per attribute into a
//! Welford accumulator. Once an attribute has failed in `delay` batches, a new
//! Gaussian set is created from the accumulated mean and standard deviation
//! and connected to every rule. `delay = 1` adds the set right away.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{config, input, structural, Result};
use crate::fuzzy::{CompletenessReport, GaussianSet, MembershipLayer};
use crate::rules::RuleBank;

/// Welford's online mean and (population) variance.
///
/// The recurrence runs on `value - shift`, where `shift` is the first value
/// of the stream. Values near a large offset then subtract exactly and the
/// running mean keeps full precision at the scale of the spread.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct WelfordAccumulator {
    count: u64,
    shift: f64,
    /// Mean of the shifted values.
    mean: f64,
    m2: f64,
}

impl WelfordAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn update(&mut self, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(input(format!("welford update with non-finite value {value}")));
        }
        if self.count == 0 {
            self.shift = value;
        }
        self.count += 1;
        let v = value - self.shift;
        let delta = v - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (v - self.mean);
        Ok(())
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.shift + self.mean
    }

    pub fn m2(&self) -> f64 {
        self.m2
    }

    /// Population variance `m2 / n`; zero when empty.
    pub fn variance(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.m2 / self.count as f64
        }
    }

    pub fn std_dev(&self) -> f64 {
        self.variance().sqrt()
    }

    pub fn reset(&mut self) {
        *self = Self::default();
    }
}

/// A fuzzy set added by neurogenesis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SproutEvent {
    pub attribute: usize,
    pub term_index: usize,
    pub set: GaussianSet,
    /// Observations that went into the set's statistics.
    pub n: u64,
    /// Failing batches seen before the set was created.
    pub batches_waited: usize,
}

/// One line of the neurogenesis event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeurogenesisRecord {
    pub step: u64,
    pub block: usize,
    pub attribute: usize,
    pub center: f64,
    pub width: f64,
    pub n: u64,
    pub batches_waited: usize,
}

impl NeurogenesisRecord {
    pub fn new(step: u64, block: usize, event: &SproutEvent) -> Self {
        Self {
            step,
            block,
            attribute: event.attribute,
            center: event.set.center,
            width: event.set.width,
            n: event.n,
            batches_waited: event.batches_waited,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeurogenesisConfig {
    /// Membership degree every attribute must reach.
    pub epsilon: f64,
    /// Failing batches to wait before adding the new set.
    pub delay: usize,
}

impl Default for NeurogenesisConfig {
    fn default() -> Self {
        Self { epsilon: 0.4, delay: 3 }
    }
}

impl NeurogenesisConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(config(format!("epsilon must lie in (0, 1), got {}", self.epsilon)));
        }
        if self.delay == 0 {
            return Err(config("neurogenesis delay must be at least 1 batch"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeurogenesisState {
    accumulators: Vec<WelfordAccumulator>,
    batches_observed: Vec<usize>,
    config: NeurogenesisConfig,
}

impl NeurogenesisState {
    pub fn new(attributes: usize, config: NeurogenesisConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            accumulators: vec![WelfordAccumulator::new(); attributes],
            batches_observed: vec![0; attributes],
            config,
        })
    }

    pub fn config(&self) -> &NeurogenesisConfig {
        &self.config
    }

    pub fn epsilon(&self) -> f64 {
        self.config.epsilon
    }

    pub fn accumulator(&self, attribute: usize) -> &WelfordAccumulator {
        &self.accumulators[attribute]
    }

    pub fn batches_observed(&self, attribute: usize) -> usize {
        self.batches_observed[attribute]
    }

    /// Attributes with accumulated failures that have not sprouted yet.
    pub fn pending(&self) -> Vec<usize> {
        (0..self.accumulators.len())
            .filter(|&i| self.accumulators[i].count() > 0)
            .collect()
    }

    /// Streams each failing `(b, i)` value into attribute `i`'s accumulator
    /// and counts one batch per attribute that failed at least once.
    pub fn observe_batch(&mut self, report: &CompletenessReport, batch: ArrayView2<'_, f64>) -> Result<()> {
        if batch.ncols() != self.accumulators.len() {
            return Err(structural(format!(
                "batch has {} attributes, neurogenesis tracks {}",
                batch.ncols(),
                self.accumulators.len()
            )));
        }
        let mut touched = vec![false; self.accumulators.len()];
        for &(b, i) in &report.failing {
            let value = *batch
                .get([b, i])
                .ok_or_else(|| structural(format!("report entry ({b}, {i}) outside batch")))?;
            self.accumulators[i].update(value)?;
            touched[i] = true;
        }
        for (i, t) in touched.into_iter().enumerate() {
            if t {
                self.batches_observed[i] += 1;
            }
        }
        Ok(())
    }

    /// Creates a set for every attribute whose failing-batch count reached
    /// the delay, then clears that attribute's statistics.
    pub fn maybe_sprout(&mut self, layer: &mut MembershipLayer, bank: &mut RuleBank) -> Result<Vec<SproutEvent>> {
        let mut events = Vec::new();
        for i in 0..self.accumulators.len() {
            if self.batches_observed[i] < self.config.delay || self.accumulators[i].count() == 0 {
                continue;
            }
            let acc = self.accumulators[i];
            let width = acc.std_dev().max(layer.width_floor(i));
            let set = GaussianSet::new(acc.mean(), width)?;
            let term_index = layer.add_term(i, set)?;
            bank.expand_terms(layer, i, term_index)?;
            events.push(SproutEvent {
                attribute: i,
                term_index,
                set,
                n: acc.count(),
                batches_waited: self.batches_observed[i],
            });
            self.accumulators[i].reset();
            self.batches_observed[i] = 0;
        }
        Ok(events)
    }
}
