//! Minibatch regression driver with neurogenesis hooks.

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{Adam, AdamConfig};
use super::backward::{backward, GradientSet};
use super::gradcheck::mse_loss;
use crate::error::{input, structural, NfnError, Result};
use crate::inference::{Network, Tape};
use crate::neurogenesis::{NeurogenesisConfig, NeurogenesisRecord, NeurogenesisState};
use crate::rules::{HardSelection, StructureSample};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Inputs and targets with one row per example.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Array2<f64>,
    targets: Array2<f64>,
}

impl Dataset {
    pub fn new(inputs: Array2<f64>, targets: Array2<f64>) -> Result<Self> {
        if inputs.nrows() != targets.nrows() || inputs.nrows() == 0 {
            return Err(structural(format!(
                "dataset needs matching non-empty rows, got {} inputs and {} targets",
                inputs.nrows(),
                targets.nrows()
            )));
        }
        if inputs.iter().chain(targets.iter()).any(|v| !v.is_finite()) {
            return Err(input("dataset contains non-finite values"));
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn inputs(&self) -> &Array2<f64> {
        &self.inputs
    }

    pub fn targets(&self) -> &Array2<f64> {
        &self.targets
    }

    fn rows(&self, idx: &[usize]) -> (Array2<f64>, Array2<f64>) {
        (self.inputs.select(Axis(0), idx), self.targets.select(Axis(0), idx))
    }
}

/// A network plus the per-step structure and neurogenesis bookkeeping.
#[derive(Debug, Clone)]
pub struct NfnModel {
    network: Network,
    neurogenesis: Option<Vec<NeurogenesisState>>,
    epsilon: f64,
    structures: Option<Vec<StructureSample>>,
    previous: Option<Vec<HardSelection>>,
}

/// What [`NfnModel::grow`] observed and changed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GrowthOutcome {
    pub epsilon_failures: usize,
    pub events: Vec<NeurogenesisRecord>,
}

impl NfnModel {
    /// `neurogenesis = None` keeps the term sets fixed; completeness is then
    /// still measured at the default epsilon.
    pub fn new(network: Network, neurogenesis: Option<NeurogenesisConfig>) -> Result<Self> {
        let epsilon = neurogenesis.unwrap_or_default().epsilon;
        let states = match neurogenesis {
            Some(cfg) => Some(
                network
                    .blocks()
                    .iter()
                    .map(|b| NeurogenesisState::new(b.input_dim(), cfg))
                    .collect::<Result<Vec<_>>>()?,
            ),
            None => None,
        };
        Ok(Self {
            network,
            neurogenesis: states,
            epsilon,
            structures: None,
            previous: None,
        })
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn network_mut(&mut self) -> &mut Network {
        &mut self.network
    }

    pub fn neurogenesis(&self) -> Option<&[NeurogenesisState]> {
        self.neurogenesis.as_deref()
    }

    /// Samples this step's structures; returns the number of rule slots whose
    /// selected term changed since the previous step.
    pub fn begin_step(&mut self, rng: &mut impl Rng) -> Result<usize> {
        let structures = self.network.sample_structures(rng)?;
        let edits = match &self.previous {
            Some(prev) => prev
                .iter()
                .zip(&structures)
                .map(|(p, s)| s.selection.changed_slots(p))
                .sum(),
            None => 0,
        };
        self.previous = Some(structures.iter().map(|s| s.selection.clone()).collect());
        self.structures = Some(structures);
        Ok(edits)
    }

    pub fn structures(&self) -> Option<&[StructureSample]> {
        self.structures.as_deref()
    }

    /// Forward pass with the structures drawn by [`begin_step`](Self::begin_step).
    pub fn forward_train(&self, x: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Tape)> {
        let structures = self
            .structures
            .as_ref()
            .ok_or_else(|| NfnError::Usage("forward_train called before begin_step".into()))?;
        self.network.forward(x, structures)
    }

    /// Greedy, noise-free prediction; mutates nothing.
    pub fn forward_eval(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.network.predict(x)
    }

    pub fn backward(&self, tape: &Tape, d_output: &Array2<f64>) -> Result<GradientSet> {
        backward(&self.network, tape, d_output)
    }

    /// Completeness check, neurogenesis and scalar-cardinality update for
    /// every block, using the block inputs recorded in `tape`.
    pub fn grow(&mut self, tape: &Tape, step: u64) -> Result<GrowthOutcome> {
        let mut out = GrowthOutcome::default();
        let epsilon = self.epsilon;
        for (k, bt) in tape.blocks.iter().enumerate() {
            let report = self.network.blocks()[k]
                .membership()
                .check_completeness(bt.input.view(), epsilon)?;
            out.epsilon_failures += report.failing.len();
            let block = self.network.block_mut(k);
            block.observe_cardinality(bt)?;
            if let Some(states) = self.neurogenesis.as_mut() {
                let state = &mut states[k];
                state.observe_batch(&report, bt.input.view())?;
                let events = state.maybe_sprout(&mut block.membership, &mut block.rules)?;
                out.events
                    .extend(events.iter().map(|e| NeurogenesisRecord::new(step, k, e)));
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupervisedConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 32,
            adam: AdamConfig::with_learning_rate(1e-2),
            seed: 0,
        }
    }
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: u64,
    pub loss: f64,
    pub epsilon_failures: usize,
    pub structure_edits: usize,
    pub term_counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub metrics: Vec<StepMetrics>,
    pub events: Vec<NeurogenesisRecord>,
    /// Greedy-structure MSE over the whole dataset after training.
    pub final_loss: f64,
}

impl TrainingReport {
    pub fn structure_edits(&self) -> usize {
        self.metrics.iter().map(|m| m.structure_edits).sum()
    }
}

/// Writes one JSON object per line.
pub fn write_jsonl<T: Serialize>(out: &mut dyn Write, items: &[T]) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut *out, item)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Greedy-structure MSE over a dataset.
pub fn evaluate_mse(model: &NfnModel, data: &Dataset) -> Result<f64> {
    let y = model.forward_eval(data.inputs.view())?;
    Ok(mse_loss(&y, data.targets.view())?.0)
}

/// Minibatch MSE regression with Adam and per-batch neurogenesis.
pub fn fit_supervised(
    model: &mut NfnModel,
    optimizer: &mut Adam,
    data: &Dataset,
    config: &SupervisedConfig,
    mut metrics_out: Option<&mut dyn Write>,
) -> Result<TrainingReport> {
    if config.batch_size == 0 {
        return Err(NfnError::Config("batch size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let mut epoch = 0u64;
    let mut metrics = Vec::with_capacity(config.steps);
    let mut events = Vec::new();

    for step in 0..config.steps as u64 {
        if cursor >= order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
            epoch += 1;
        }
        let end = (cursor + config.batch_size).min(order.len());
        let (x, t) = data.rows(&order[cursor..end]);
        cursor = end;

        let edits = model.begin_step(&mut rng)?;
        let (y, tape) = model.forward_train(x.view())?;
        let (loss, dy) = mse_loss(&y, t.view())?;
        if !loss.is_finite() {
            return Err(NfnError::Training {
                path: "loss".into(),
                message: format!("diverged at step {step}: {loss}"),
            });
        }
        let grads = model.backward(&tape, &dy)?;
        optimizer.step(&mut model.network, &grads.named())?;
        let growth = model.grow(&tape, step)?;

        let m = StepMetrics {
            step,
            epoch,
            loss,
            epsilon_failures: growth.epsilon_failures,
            structure_edits: edits,
            term_counts: model.network.total_terms(),
        };
        if let Some(out) = metrics_out.as_deref_mut() {
            write_jsonl(out, std::slice::from_ref(&m))?;
        }
        metrics.push(m);
        events.extend(growth.events);
    }
    let final_loss = evaluate_mse(model, data)?;
    Ok(TrainingReport {
        metrics,
        events,
        final_loss,
    })
}

/// Network, optimizer and neurogenesis state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub network: Network,
    pub optimizer: Adam,
    pub neurogenesis: Option<Vec<NeurogenesisState>>,
}

impl Checkpoint {
    pub fn capture(model: &NfnModel, optimizer: &Adam) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            network: model.network.clone(),
            optimizer: optimizer.clone(),
            neurogenesis: model.neurogenesis.clone(),
        }
    }

    pub fn restore(self) -> Result<(NfnModel, Adam)> {
        let epsilon = self
            .neurogenesis
            .as_ref()
            .and_then(|s| s.first())
            .map_or(NeurogenesisConfig::default().epsilon, |s| s.epsilon());
        let model = NfnModel {
            network: self.network,
            neurogenesis: self.neurogenesis,
            epsilon,
            structures: None,
            previous: None,
        };
        Ok((model, self.optimizer))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        if c.version != CHECKPOINT_VERSION {
            return Err(NfnError::Config(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                c.version
            )));
        }
        Ok(c)
    }
}
