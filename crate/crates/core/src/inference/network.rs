//! Neuro-fuzzy blocks and hierarchical stacks of them.

use ndarray::{Array1, Array2, Array3, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::firing::{
    layer_normalize, normalize_firing, preliminary_from_weights, FiringMode, LayerNormCache, Normalizer,
};
use super::head::{mix, CertaintyMode, TskHead};
use crate::error::{config, structural, Result};
use crate::fuzzy::{GaussianSet, MembershipLayer};
use crate::rules::{RuleBank, RuleBankConfig, ScalarCardinality, StructureSample};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub firing_mode: FiringMode,
    pub normalizer: Normalizer,
    pub layer_norm: bool,
    pub layer_norm_epsilon: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            firing_mode: FiringMode::Sum,
            normalizer: Normalizer::Softmax,
            layer_norm: false,
            layer_norm_epsilon: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNormParams {
    pub gain: Array1<f64>,
    pub bias: Array1<f64>,
}

/// Shape and hyperparameters of one neuro-fuzzy block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub inputs: usize,
    pub outputs: usize,
    pub rules: usize,
    /// Initial terms per attribute, evenly spread over `input_range`.
    pub initial_terms: usize,
    pub input_range: (f64, f64),
    pub inference: InferenceConfig,
    pub rule_bank: RuleBankConfig,
    pub certainty: CertaintyMode,
}

impl BlockConfig {
    pub fn new(inputs: usize, outputs: usize, rules: usize) -> Self {
        Self {
            inputs,
            outputs,
            rules,
            initial_terms: 3,
            input_range: (-1.0, 1.0),
            inference: InferenceConfig::default(),
            rule_bank: RuleBankConfig::default(),
            certainty: CertaintyMode::Off,
        }
    }
}

/// Per-observation firing levels of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct FiringRecord {
    /// `w_u` after the optional layer normalization, `|X| × |U|`.
    pub preliminary: Array2<f64>,
    /// Normalized firing `w̄_u`, `|X| × |U|`.
    pub normalized: Array2<f64>,
    /// Nonzero normalized entries per observation.
    pub support_count: Vec<usize>,
}

/// Intermediates of one block's forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockTape {
    pub input: Array2<f64>,
    /// Negative log-memberships `|X| × |C| × T`.
    pub q: Array3<f64>,
    /// Selection tensor the forward pass used, `|U| × |C| × T`.
    pub selection: Array3<f64>,
    /// Raw Sum/Mean firing, before layer normalization.
    pub raw_firing: Array2<f64>,
    pub layer_norm: Option<LayerNormCache>,
    /// Firing handed to the normalizer.
    pub preliminary: Array2<f64>,
    pub firing: Array2<f64>,
    pub consequents: Array3<f64>,
    pub output: Array2<f64>,
}

impl BlockTape {
    pub fn firing_record(&self) -> FiringRecord {
        FiringRecord {
            preliminary: self.preliminary.clone(),
            normalized: self.firing.clone(),
            support_count: self
                .firing
                .rows()
                .into_iter()
                .map(|r| r.iter().filter(|v| **v > 0.0).count())
                .collect(),
        }
    }

    pub fn memberships(&self, layer: &MembershipLayer) -> Array3<f64> {
        let mut mu = self.q.mapv(|v| (-v).exp());
        for ((_, i, j), v) in mu.indexed_iter_mut() {
            if !layer.mask()[[i, j]] {
                *v = 0.0;
            }
        }
        mu
    }
}

/// One TSK neuro-fuzzy block: membership layer, rule base, decision layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NfnBlock {
    pub(crate) membership: MembershipLayer,
    pub(crate) rules: RuleBank,
    pub(crate) head: TskHead,
    pub(crate) inference: InferenceConfig,
    pub(crate) layer_norm: Option<LayerNormParams>,
    pub(crate) cardinality: ScalarCardinality,
}

impl NfnBlock {
    pub fn new(cfg: &BlockConfig, rng: &mut impl Rng) -> Result<Self> {
        let (low, high) = cfg.input_range;
        let membership = MembershipLayer::uniform(cfg.inputs, cfg.initial_terms, low, high)?;
        Self::from_layer(membership, cfg, rng)
    }

    /// Builds a block around an existing membership layer.
    pub fn from_layer(membership: MembershipLayer, cfg: &BlockConfig, rng: &mut impl Rng) -> Result<Self> {
        if membership.attribute_count() != cfg.inputs {
            return Err(structural(format!(
                "membership layer has {} attributes, block expects {}",
                membership.attribute_count(),
                cfg.inputs
            )));
        }
        if cfg.outputs == 0 {
            return Err(structural("block needs at least one output"));
        }
        if !(cfg.inference.layer_norm_epsilon > 0.0) {
            return Err(config("layer norm epsilon must be positive"));
        }
        if cfg.inference.layer_norm && cfg.rules < 2 {
            return Err(config("layer normalization needs at least two rules"));
        }
        let rules = RuleBank::new(cfg.rules, &membership, cfg.rule_bank, rng)?;
        let head = TskHead::new(cfg.rules, cfg.inputs, cfg.outputs, cfg.certainty, rng);
        let layer_norm = cfg.inference.layer_norm.then(|| LayerNormParams {
            gain: Array1::ones(cfg.rules),
            bias: Array1::zeros(cfg.rules),
        });
        let cardinality = ScalarCardinality::new(membership.attribute_count(), membership.capacity());
        Ok(Self {
            membership,
            rules,
            head,
            inference: cfg.inference,
            layer_norm,
            cardinality,
        })
    }

    /// Assembles a block from explicit parts (used by tests and tools).
    pub fn from_parts(
        membership: MembershipLayer,
        rules: RuleBank,
        head: TskHead,
        inference: InferenceConfig,
    ) -> Result<Self> {
        if rules.attribute_count() != membership.attribute_count()
            || head.input_dim() != membership.attribute_count()
            || head.rule_count() != rules.rule_count()
        {
            return Err(structural("block parts disagree on dimensions"));
        }
        let layer_norm = inference.layer_norm.then(|| LayerNormParams {
            gain: Array1::ones(rules.rule_count()),
            bias: Array1::zeros(rules.rule_count()),
        });
        let cardinality = ScalarCardinality::new(membership.attribute_count(), membership.capacity());
        Ok(Self {
            membership,
            rules,
            head,
            inference,
            layer_norm,
            cardinality,
        })
    }

    pub fn membership(&self) -> &MembershipLayer {
        &self.membership
    }

    pub fn rules(&self) -> &RuleBank {
        &self.rules
    }

    pub fn rules_mut(&mut self) -> &mut RuleBank {
        &mut self.rules
    }

    pub fn head(&self) -> &TskHead {
        &self.head
    }

    pub fn head_mut(&mut self) -> &mut TskHead {
        &mut self.head
    }

    pub fn inference(&self) -> &InferenceConfig {
        &self.inference
    }

    pub fn layer_norm(&self) -> Option<&LayerNormParams> {
        self.layer_norm.as_ref()
    }

    pub fn layer_norm_mut(&mut self) -> Option<&mut LayerNormParams> {
        self.layer_norm.as_mut()
    }

    pub fn cardinality(&self) -> &ScalarCardinality {
        &self.cardinality
    }

    pub fn input_dim(&self) -> usize {
        self.membership.attribute_count()
    }

    pub fn output_dim(&self) -> usize {
        self.head.output_dim()
    }

    pub fn rule_count(&self) -> usize {
        self.rules.rule_count()
    }

    /// Adds a fuzzy set to `attribute` and connects it to every rule.
    pub fn sprout(&mut self, attribute: usize, set: GaussianSet) -> Result<usize> {
        let j = self.membership.add_term(attribute, set)?;
        self.rules.expand_terms(&self.membership, attribute, j)?;
        Ok(j)
    }

    /// Folds a batch's memberships into the scalar cardinality and refreshes
    /// the sampling constraint.
    pub fn observe_cardinality(&mut self, tape: &BlockTape) -> Result<()> {
        let mu = tape.memberships(&self.membership);
        self.cardinality.update(mu.view());
        if self.rules.config().threshold_percentile > 0.0 {
            self.rules.constrain(&self.cardinality)?;
        }
        Ok(())
    }

    /// Forward pass with a sampled hard structure.
    pub fn forward(&self, x: ArrayView2<'_, f64>, structure: &StructureSample) -> Result<(Array2<f64>, BlockTape)> {
        let chosen = &structure.selection.chosen;
        if chosen.dim() != (self.rule_count(), self.input_dim()) {
            return Err(structural(format!(
                "structure shape {:?} does not match block ({}, {})",
                chosen.dim(),
                self.rule_count(),
                self.input_dim()
            )));
        }
        for ((u, i), &j) in chosen.indexed_iter() {
            if j >= self.membership.term_counts()[i] {
                return Err(structural(format!(
                    "rule {u} selects nonexistent term {j} of attribute {i}"
                )));
            }
        }
        self.forward_relaxed(x, &structure.selection.one_hot)
    }

    /// Forward pass with an arbitrary real-valued selection tensor
    /// `|U| × |C| × T` in place of the one-hot structure.
    pub fn forward_relaxed(&self, x: ArrayView2<'_, f64>, selection: &Array3<f64>) -> Result<(Array2<f64>, BlockTape)> {
        let expected = (self.rule_count(), self.input_dim(), self.membership.capacity());
        if selection.dim() != expected {
            return Err(structural(format!(
                "selection shape {:?} does not match {:?}",
                selection.dim(),
                expected
            )));
        }
        let q = self.membership.standardized_squares(x)?;
        let scale = self.inference.firing_mode.scale(self.input_dim());
        let raw_firing = preliminary_from_weights(&q, selection, scale);
        let (preliminary, ln_cache) = match &self.layer_norm {
            Some(ln) => {
                let (w, cache) = layer_normalize(
                    raw_firing.view(),
                    ln.gain.view(),
                    ln.bias.view(),
                    self.inference.layer_norm_epsilon,
                )?;
                (w, Some(cache))
            }
            None => (raw_firing.clone(), None),
        };
        let firing = normalize_firing(preliminary.view(), self.inference.normalizer)?;
        let consequents = self.head.consequents(x)?;
        let mixing = self.head.mixing_weights(firing.view());
        let output = mix(&consequents, &mixing);
        let tape = BlockTape {
            input: x.to_owned(),
            q,
            selection: selection.clone(),
            raw_firing,
            layer_norm: ln_cache,
            preliminary,
            firing,
            consequents,
            output: output.clone(),
        };
        Ok((output, tape))
    }
}

/// Intermediates of a full forward pass through a stack.
#[derive(Debug, Clone)]
pub struct Tape {
    pub blocks: Vec<BlockTape>,
    pub structures: Vec<StructureSample>,
    pub(crate) generation: u64,
}

/// A hierarchical stack of neuro-fuzzy blocks; block `k`'s output is block
/// `k + 1`'s raw input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub(crate) blocks: Vec<NfnBlock>,
    #[serde(default)]
    pub(crate) generation: u64,
}

impl Network {
    pub fn single(block: NfnBlock) -> Self {
        Self {
            blocks: vec![block],
            generation: 0,
        }
    }

    pub fn stack(blocks: Vec<NfnBlock>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(structural("a network needs at least one block"));
        }
        for (k, pair) in blocks.windows(2).enumerate() {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(structural(format!(
                    "block {k} emits {} values but block {} expects {}",
                    pair[0].output_dim(),
                    k + 1,
                    pair[1].input_dim()
                )));
            }
        }
        Ok(Self { blocks, generation: 0 })
    }

    /// Builds and stacks blocks from their configs.
    pub fn from_configs(configs: &[BlockConfig], rng: &mut impl Rng) -> Result<Self> {
        let blocks = configs
            .iter()
            .map(|c| NfnBlock::new(c, rng))
            .collect::<Result<Vec<_>>>()?;
        Self::stack(blocks)
    }

    pub fn blocks(&self) -> &[NfnBlock] {
        &self.blocks
    }

    pub fn block_mut(&mut self, k: usize) -> &mut NfnBlock {
        self.generation += 1;
        &mut self.blocks[k]
    }

    pub fn input_dim(&self) -> usize {
        self.blocks[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.blocks.last().expect("non-empty").output_dim()
    }

    /// Counter bumped by every parameter or structure mutation.
    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub(crate) fn touch(&mut self) {
        self.generation += 1;
    }

    pub fn total_terms(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.membership.total_terms()).collect()
    }

    /// Draws a training structure for every block.
    pub fn sample_structures(&mut self, rng: &mut impl Rng) -> Result<Vec<StructureSample>> {
        self.blocks.iter_mut().map(|b| b.rules.sample_structure(rng)).collect()
    }

    /// Noise-free structures for evaluation.
    pub fn greedy_structures(&self) -> Vec<StructureSample> {
        self.blocks.iter().map(|b| b.rules.greedy_structure()).collect()
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>, structures: &[StructureSample]) -> Result<(Array2<f64>, Tape)> {
        if structures.len() != self.blocks.len() {
            return Err(structural(format!(
                "{} structures for {} blocks",
                structures.len(),
                self.blocks.len()
            )));
        }
        let mut current = x.to_owned();
        let mut tapes = Vec::with_capacity(self.blocks.len());
        for (block, structure) in self.blocks.iter().zip(structures) {
            let (y, tape) = block.forward(current.view(), structure)?;
            tapes.push(tape);
            current = y;
        }
        Ok((
            current,
            Tape {
                blocks: tapes,
                structures: structures.to_vec(),
                generation: self.generation,
            },
        ))
    }

    /// Forward pass with explicit relaxed selection tensors per block.
    pub fn forward_relaxed(
        &self,
        x: ArrayView2<'_, f64>,
        selections: &[Array3<f64>],
    ) -> Result<(Array2<f64>, Vec<BlockTape>)> {
        if selections.len() != self.blocks.len() {
            return Err(structural("one selection tensor per block required"));
        }
        let mut current = x.to_owned();
        let mut tapes = Vec::with_capacity(self.blocks.len());
        for (block, sel) in self.blocks.iter().zip(selections) {
            let (y, tape) = block.forward_relaxed(current.view(), sel)?;
            tapes.push(tape);
            current = y;
        }
        Ok((current, tapes))
    }

    /// Greedy (evaluation-mode) prediction.
    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let structures = self.greedy_structures();
        Ok(self.forward(x, &structures)?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::firing::{preliminary_firing, Normalizer};
    use crate::rules::Estimator;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn block(cfg: &BlockConfig, seed: u64) -> NfnBlock {
        NfnBlock::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn forward_equals_manual_composition() {
        let mut cfg = BlockConfig::new(3, 2, 5);
        cfg.inference.layer_norm = true;
        cfg.inference.normalizer = Normalizer::Entmax15;
        cfg.inference.firing_mode = FiringMode::Mean;
        let mut b = block(&cfg, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = b.rules.sample_structure(&mut rng).unwrap();
        let x = Array2::from_shape_fn((4, 3), |_| rng.gen_range(-1.0..1.0));
        let (y, _) = b.forward(x.view(), &s).unwrap();

        let w = preliminary_firing(&b.membership, x.view(), &s.selection, FiringMode::Mean).unwrap();
        let ln = b.layer_norm.as_ref().unwrap();
        let (w, _) = layer_normalize(w.view(), ln.gain.view(), ln.bias.view(), 1e-5).unwrap();
        let p = normalize_firing(w.view(), Normalizer::Entmax15).unwrap();
        let manual = b.head.defuzzify(x.view(), p.view()).unwrap();
        for (a, m) in y.iter().zip(manual.iter()) {
            assert!((a - m).abs() < 1e-12);
        }
    }

    #[test]
    fn stack_checks_dimensions() {
        let a = block(&BlockConfig::new(3, 2, 4), 1);
        let b = block(&BlockConfig::new(2, 1, 4), 2);
        let c = block(&BlockConfig::new(3, 1, 4), 3);
        assert!(Network::stack(vec![a.clone(), b.clone()]).is_ok());
        assert!(matches!(
            Network::stack(vec![a, c]),
            Err(crate::NfnError::Structural(_))
        ));
        assert!(Network::stack(vec![]).is_err());
    }

    #[test]
    fn single_block_stack_matches_block_forward() {
        let b = block(&BlockConfig::new(2, 1, 3), 9);
        let net = Network::stack(vec![b.clone()]).unwrap();
        let s = net.greedy_structures();
        let x = ndarray::array![[0.1, -0.4], [0.9, 0.3]];
        let (y1, _) = net.forward(x.view(), &s).unwrap();
        let (y2, _) = b.forward(x.view(), &s[0]).unwrap();
        assert_eq!(y1, y2);
    }

    #[test]
    fn stacked_blocks_keep_normalized_rows() {
        let mut cfg1 = BlockConfig::new(3, 2, 6);
        cfg1.rule_bank.estimator = Estimator::Ste;
        let mut cfg2 = BlockConfig::new(2, 1, 4);
        cfg2.inference.normalizer = Normalizer::Entmax15;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut net = Network::from_configs(&[cfg1, cfg2], &mut rng).unwrap();
        let s = net.sample_structures(&mut rng).unwrap();
        let x = Array2::from_shape_fn((7, 3), |_| rng.gen_range(-1.5..1.5));
        let (_, tape) = net.forward(x.view(), &s).unwrap();
        for bt in &tape.blocks {
            for row in bt.firing.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-9);
                assert!(row.iter().all(|v| *v >= 0.0));
            }
        }
    }

    #[test]
    fn rejects_selection_of_nonexistent_term() {
        let b = block(&BlockConfig::new(2, 1, 2), 1);
        let mut s = b.rules.greedy_structure();
        s.selection.chosen[[0, 0]] = 7;
        assert!(b.forward(ndarray::array![[0.0, 0.0]].view(), &s).is_err());
    }

    #[test]
    fn sprout_grows_layer_and_bank_together() {
        let mut b = block(&BlockConfig::new(2, 1, 4), 1);
        let j = b.sprout(1, GaussianSet::new(3.0, 0.5).unwrap()).unwrap();
        assert_eq!(j, 3);
        assert_eq!(b.membership.capacity(), b.rules.capacity());
        let s = b.rules.greedy_structure();
        assert!(b.forward(ndarray::array![[0.0, 3.0]].view(), &s).is_ok());
    }
}
