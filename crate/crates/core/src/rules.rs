//! Differentiable rule-premise selection.
//!
//! Every rule picks exactly one linguistic term per condition attribute. The
//! binary rule/term connections are relaxed into real-valued logits, and a
//! hard one-hot selection is sampled from them with either a plain
//! straight-through estimator (argmax of the logits) or a straight-through
//! Gumbel estimator (argmax of noisy, tempered logits). The forward pass uses
//! the one-hot tensor; gradients flow through the soft relaxation.

use std::fmt::Write as _;

use ndarray::{Array2, Array3, ArrayView3, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config, structural, Result};
use crate::fuzzy::MembershipLayer;

/// Finite stand-in for `-inf` on logits of nonexistent terms.
pub const MASKED_LOGIT: f64 = -1e9;

/// Decay applied to the scalar cardinality before each batch is added.
pub const CARDINALITY_DECAY: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Estimator {
    /// Straight-through estimator.
    #[serde(alias = "STE", alias = "ste")]
    Ste,
    /// Straight-through Gumbel estimator.
    #[serde(alias = "STGE", alias = "stge")]
    Stge,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RuleBankConfig {
    pub estimator: Estimator,
    /// Gumbel temperature; only read by STGE.
    pub temperature: f64,
    /// Number of samples that reuse one Gumbel noise draw.
    pub retain_batches: usize,
    /// Percentile (0..=100) below which rarely active terms are excluded
    /// from sampling. Zero disables the constraint.
    pub threshold_percentile: f64,
}

impl Default for RuleBankConfig {
    fn default() -> Self {
        Self {
            estimator: Estimator::Stge,
            temperature: 0.6,
            retain_batches: 64,
            threshold_percentile: 0.0,
        }
    }
}

impl RuleBankConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(config(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if self.retain_batches == 0 {
            return Err(config("retain_batches must be at least 1"));
        }
        if !(self.threshold_percentile >= 0.0 && self.threshold_percentile <= 100.0) {
            return Err(config(format!(
                "threshold percentile must lie in [0, 100], got {}",
                self.threshold_percentile
            )));
        }
        Ok(())
    }
}

/// One term index per `(rule, attribute)` plus its one-hot expansion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardSelection {
    pub chosen: Array2<usize>,
    pub one_hot: Array3<f64>,
}

impl HardSelection {
    fn from_chosen(chosen: Array2<usize>, capacity: usize) -> Self {
        let (rules, attrs) = chosen.dim();
        let mut one_hot = Array3::zeros((rules, attrs, capacity));
        for ((u, i), &j) in chosen.indexed_iter() {
            one_hot[[u, i, j]] = 1.0;
        }
        Self { chosen, one_hot }
    }

    pub fn rule_count(&self) -> usize {
        self.chosen.nrows()
    }

    /// Number of `(rule, attribute)` slots whose chosen term differs.
    pub fn changed_slots(&self, other: &HardSelection) -> usize {
        if self.chosen.dim() != other.chosen.dim() {
            return self.chosen.len().max(other.chosen.len());
        }
        self.chosen
            .iter()
            .zip(other.chosen.iter())
            .filter(|(a, b)| a != b)
            .count()
    }

    /// Text table: one line per rule listing its chosen term per attribute.
    pub fn table(&self) -> String {
        let mut out = String::from("rule");
        for i in 0..self.chosen.ncols() {
            let _ = write!(out, "\tx{i}");
        }
        out.push('\n');
        for (u, row) in self.chosen.axis_iter(Axis(0)).enumerate() {
            let _ = write!(out, "{u}");
            for j in row {
                let _ = write!(out, "\t{j}");
            }
            out.push('\n');
        }
        out
    }
}

/// A sampled structure: the hard forward selection and the soft relaxation
/// its gradient flows through.
#[derive(Debug, Clone, PartialEq)]
pub struct StructureSample {
    pub selection: HardSelection,
    pub soft: Array3<f64>,
    /// Gumbel noise used for this sample (STGE only).
    pub noise: Option<Array3<f64>>,
    /// Temperature dividing the logits in the soft relaxation (1 for STE).
    pub temperature: f64,
}

/// Running, decayed sum of memberships per term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarCardinality {
    pub values: Array2<f64>,
}

impl ScalarCardinality {
    pub fn new(attributes: usize, capacity: usize) -> Self {
        Self {
            values: Array2::zeros((attributes, capacity)),
        }
    }

    /// `S <- 0.99 S + sum_b mu[b]`; grows with the membership capacity.
    pub fn update(&mut self, memberships: ArrayView3<'_, f64>) {
        let (_, attrs, cap) = memberships.dim();
        if cap > self.values.ncols() || attrs != self.values.nrows() {
            let mut grown = Array2::zeros((attrs, cap.max(self.values.ncols())));
            for ((i, j), v) in self.values.indexed_iter() {
                if i < attrs {
                    grown[[i, j]] = *v;
                }
            }
            self.values = grown;
        }
        self.values.mapv_inplace(|v| v * CARDINALITY_DECAY);
        let batch_sum = memberships.sum_axis(Axis(0));
        for ((i, j), v) in batch_sum.indexed_iter() {
            self.values[[i, j]] += v.max(0.0);
        }
    }
}

/// Linear-interpolated percentile (`p` in 0..=100) of a non-empty slice.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let rank = (p / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (rank - lo as f64)
}

/// Existence mask with rarely active terms removed: term `j` of attribute
/// `i` survives unless `S[i][j]` is strictly below the `theta`-th percentile
/// of the attribute's existing terms. `theta = 0` returns `existence`.
pub fn effective_mask(existence: &Array2<bool>, cardinality: &ScalarCardinality, theta: f64) -> Result<Array2<bool>> {
    if !(theta >= 0.0) {
        return Err(config(format!("theta must be >= 0, got {theta}")));
    }
    let mut mask = existence.clone();
    if theta == 0.0 {
        return Ok(mask);
    }
    for (i, row) in existence.axis_iter(Axis(0)).enumerate() {
        let s_at = |j: usize| cardinality.values.get([i, j]).copied().unwrap_or(0.0);
        let existing: Vec<usize> = (0..row.len()).filter(|&j| row[j]).collect();
        if existing.is_empty() {
            continue;
        }
        let values: Vec<f64> = existing.iter().map(|&j| s_at(j)).collect();
        let threshold = percentile(&values, theta);
        for &j in &existing {
            if s_at(j) < threshold {
                mask[[i, j]] = false;
            }
        }
    }
    Ok(mask)
}

/// Index of the largest allowed entry; the lowest index wins ties.
fn argmax_allowed(values: impl Iterator<Item = f64>, allowed: impl Iterator<Item = bool>) -> usize {
    let mut best = usize::MAX;
    let mut best_value = f64::NEG_INFINITY;
    for (j, (v, ok)) in values.zip(allowed).enumerate() {
        if ok && (best == usize::MAX || v > best_value) {
            best = j;
            best_value = v;
        }
    }
    best
}

fn softmax_allowed(z: &[f64], allowed: &[bool], out: &mut [f64]) {
    let max = z
        .iter()
        .zip(allowed)
        .filter(|(_, ok)| **ok)
        .map(|(v, _)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for j in 0..z.len() {
        out[j] = if allowed[j] { (z[j] - max).exp() } else { 0.0 };
        total += out[j];
    }
    for v in out.iter_mut() {
        *v /= total;
    }
}

fn gumbel(rng: &mut impl Rng) -> f64 {
    let v: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    -(-v.ln()).ln()
}

/// Rule base: selection logits per `rule × attribute × term`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleBank {
    logits: Array3<f64>,
    term_counts: Vec<usize>,
    config: RuleBankConfig,
    allowed: Array2<bool>,
    noise: Array3<f64>,
    noise_valid: bool,
    noise_age: usize,
    stale_attributes: Vec<bool>,
}

impl RuleBank {
    /// Random standard-normal logits over the layer's existing terms.
    pub fn new(rule_count: usize, layer: &MembershipLayer, config: RuleBankConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        if rule_count == 0 {
            return Err(structural("rule bank needs at least one rule"));
        }
        let (attrs, cap) = (layer.attribute_count(), layer.capacity());
        let mut logits = Array3::from_elem((rule_count, attrs, cap), MASKED_LOGIT);
        for u in 0..rule_count {
            for i in 0..attrs {
                for j in 0..layer.term_counts()[i] {
                    logits[[u, i, j]] = StandardNormal.sample(rng);
                }
            }
        }
        Ok(Self {
            logits,
            term_counts: layer.term_counts().to_vec(),
            config,
            allowed: layer.mask().clone(),
            noise: Array3::zeros((rule_count, attrs, cap)),
            noise_valid: false,
            noise_age: 0,
            stale_attributes: vec![false; attrs],
        })
    }

    pub fn rule_count(&self) -> usize {
        self.logits.dim().0
    }

    pub fn attribute_count(&self) -> usize {
        self.term_counts.len()
    }

    pub fn capacity(&self) -> usize {
        self.logits.dim().2
    }

    pub fn config(&self) -> &RuleBankConfig {
        &self.config
    }

    pub fn logits(&self) -> &Array3<f64> {
        &self.logits
    }

    pub(crate) fn logits_mut(&mut self) -> &mut Array3<f64> {
        &mut self.logits
    }

    /// Existence mask narrowed by the current cardinality constraint.
    pub fn allowed(&self) -> &Array2<bool> {
        &self.allowed
    }

    pub fn existence(&self) -> Array2<bool> {
        let mut m = Array2::from_elem((self.attribute_count(), self.capacity()), false);
        for (i, &n) in self.term_counts.iter().enumerate() {
            for j in 0..n {
                m[[i, j]] = true;
            }
        }
        m
    }

    /// Age of the cached Gumbel noise: samples drawn since the last resample.
    pub fn noise_age(&self) -> usize {
        self.noise_age
    }

    /// Re-pins nonexistent slots to [`MASKED_LOGIT`].
    pub(crate) fn pin_masked(&mut self) {
        let (rules, attrs, cap) = self.logits.dim();
        for u in 0..rules {
            for i in 0..attrs {
                for j in self.term_counts[i]..cap {
                    self.logits[[u, i, j]] = MASKED_LOGIT;
                }
            }
        }
    }

    fn temperature(&self) -> f64 {
        match self.config.estimator {
            Estimator::Ste => 1.0,
            Estimator::Stge => self.config.temperature,
        }
    }

    fn refresh_noise(&mut self, rng: &mut impl Rng) {
        if !self.noise_valid {
            self.noise.mapv_inplace(|_| gumbel(rng));
            self.noise_valid = true;
            self.noise_age = 0;
            self.stale_attributes.iter_mut().for_each(|s| *s = false);
            return;
        }
        let (rules, _, cap) = self.noise.dim();
        for i in 0..self.stale_attributes.len() {
            if std::mem::take(&mut self.stale_attributes[i]) {
                for u in 0..rules {
                    for j in 0..cap {
                        self.noise[[u, i, j]] = gumbel(rng);
                    }
                }
            }
        }
    }

    /// Soft relaxation for arbitrary `logits` under the current mask.
    ///
    /// STE: `softmax(logits)`; STGE: `softmax((logits + noise) / tau)`.
    pub fn soft_from(&self, logits: &Array3<f64>, noise: Option<&Array3<f64>>) -> Array3<f64> {
        let tau = self.temperature();
        let (rules, attrs, cap) = logits.dim();
        let mut soft = Array3::zeros((rules, attrs, cap));
        let mut z = vec![0.0; cap];
        let mut out = vec![0.0; cap];
        for i in 0..attrs {
            let allowed: Vec<bool> = self.allowed.row(i).to_vec();
            for u in 0..rules {
                for j in 0..cap {
                    let g = noise.map_or(0.0, |n| n[[u, i, j]]);
                    z[j] = (logits[[u, i, j]] + g) / tau;
                }
                softmax_allowed(&z, &allowed, &mut out);
                for j in 0..cap {
                    soft[[u, i, j]] = out[j];
                }
            }
        }
        soft
    }

    fn hard_from(&self, scores: &Array3<f64>) -> HardSelection {
        let (rules, attrs, cap) = scores.dim();
        let mut chosen = Array2::zeros((rules, attrs));
        for u in 0..rules {
            for i in 0..attrs {
                chosen[[u, i]] = argmax_allowed(
                    (0..cap).map(|j| scores[[u, i, j]]),
                    (0..cap).map(|j| self.allowed[[i, j]]),
                );
            }
        }
        HardSelection::from_chosen(chosen, cap)
    }

    /// Samples a hard structure and its soft relaxation.
    ///
    /// STGE draws fresh Gumbel noise only when the cached draw has been used
    /// `retain_batches` times (or was invalidated by [`expand_terms`]).
    ///
    /// [`expand_terms`]: Self::expand_terms
    pub fn sample_structure(&mut self, rng: &mut impl Rng) -> Result<StructureSample> {
        self.config.validate()?;
        match self.config.estimator {
            Estimator::Ste => {
                let soft = self.soft_from(&self.logits, None);
                let selection = self.hard_from(&self.logits);
                Ok(StructureSample {
                    selection,
                    soft,
                    noise: None,
                    temperature: 1.0,
                })
            }
            Estimator::Stge => {
                self.refresh_noise(rng);
                let soft = self.soft_from(&self.logits, Some(&self.noise));
                let selection = self.hard_from(&soft);
                self.noise_age += 1;
                if self.noise_age >= self.config.retain_batches {
                    self.noise_valid = false;
                    self.noise_age = 0;
                }
                Ok(StructureSample {
                    selection,
                    soft,
                    noise: Some(self.noise.clone()),
                    temperature: self.config.temperature,
                })
            }
        }
    }

    /// Noise-free structure (`argmax` of the logits); does not touch the
    /// noise cache. Used for evaluation and target networks.
    pub fn greedy_structure(&self) -> StructureSample {
        let soft = {
            let (rules, attrs, cap) = self.logits.dim();
            let mut soft = Array3::zeros((rules, attrs, cap));
            let mut z = vec![0.0; cap];
            let mut out = vec![0.0; cap];
            for i in 0..attrs {
                let allowed: Vec<bool> = self.allowed.row(i).to_vec();
                for u in 0..rules {
                    for j in 0..cap {
                        z[j] = self.logits[[u, i, j]];
                    }
                    softmax_allowed(&z, &allowed, &mut out);
                    for j in 0..cap {
                        soft[[u, i, j]] = out[j];
                    }
                }
            }
            soft
        };
        StructureSample {
            selection: self.hard_from(&self.logits),
            soft,
            noise: None,
            temperature: 1.0,
        }
    }

    /// Applies the scalar-cardinality constraint and returns the effective
    /// mask now used for sampling.
    pub fn constrain(&mut self, cardinality: &ScalarCardinality) -> Result<Array2<bool>> {
        let mask = effective_mask(&self.existence(), cardinality, self.config.threshold_percentile)?;
        self.allowed = mask.clone();
        Ok(mask)
    }

    /// Opens connections from every rule to a freshly added term.
    ///
    /// The new logit of each `(rule, attribute)` slice is the mean of that
    /// slice's existing logits.
    pub fn expand_terms(&mut self, layer: &MembershipLayer, attribute: usize, new_term_index: usize) -> Result<()> {
        if attribute >= self.attribute_count() {
            return Err(structural(format!("attribute {attribute} out of range")));
        }
        let existing = self.term_counts[attribute];
        if new_term_index < existing {
            return Err(structural(format!(
                "term {new_term_index} of attribute {attribute} is already connected"
            )));
        }
        if new_term_index > existing {
            return Err(structural(format!(
                "term {new_term_index} of attribute {attribute} would leave a gap after {existing} terms"
            )));
        }
        if !layer.mask().get([attribute, new_term_index]).copied().unwrap_or(false) {
            return Err(structural(format!(
                "term {new_term_index} of attribute {attribute} does not exist in the membership layer"
            )));
        }
        if new_term_index >= self.capacity() {
            self.grow_capacity(layer.capacity().max(new_term_index + 1));
        }
        for u in 0..self.rule_count() {
            let mean = (0..existing).map(|j| self.logits[[u, attribute, j]]).sum::<f64>() / existing as f64;
            self.logits[[u, attribute, new_term_index]] = mean;
        }
        self.term_counts[attribute] += 1;
        self.allowed[[attribute, new_term_index]] = true;
        self.stale_attributes[attribute] = true;
        Ok(())
    }

    fn grow_capacity(&mut self, capacity: usize) {
        let (rules, attrs, old) = self.logits.dim();
        let mut logits = Array3::from_elem((rules, attrs, capacity), MASKED_LOGIT);
        let mut noise = Array3::zeros((rules, attrs, capacity));
        let mut allowed = Array2::from_elem((attrs, capacity), false);
        for u in 0..rules {
            for i in 0..attrs {
                for j in 0..old {
                    logits[[u, i, j]] = self.logits[[u, i, j]];
                    noise[[u, i, j]] = self.noise[[u, i, j]];
                }
            }
        }
        for i in 0..attrs {
            for j in 0..old {
                allowed[[i, j]] = self.allowed[[i, j]];
            }
        }
        self.logits = logits;
        self.noise = noise;
        self.allowed = allowed;
    }
}

/// Straight-through gradient: the upstream gradient on the one-hot tensor is
/// routed through the softmax Jacobian of the soft relaxation and scaled by
/// `1 / temperature`.
pub fn structure_gradient(sample: &StructureSample, upstream: ArrayView3<'_, f64>) -> Result<Array3<f64>> {
    let soft = &sample.soft;
    if upstream.dim() != soft.dim() {
        return Err(structural(format!(
            "upstream shape {:?} does not match structure shape {:?}",
            upstream.dim(),
            soft.dim()
        )));
    }
    let (rules, attrs, cap) = soft.dim();
    let inv_tau = 1.0 / sample.temperature;
    let mut d = Array3::zeros((rules, attrs, cap));
    for u in 0..rules {
        for i in 0..attrs {
            let dot: f64 = (0..cap).map(|j| soft[[u, i, j]] * upstream[[u, i, j]]).sum();
            for j in 0..cap {
                d[[u, i, j]] = inv_tau * soft[[u, i, j]] * (upstream[[u, i, j]] - dot);
            }
        }
    }
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fuzzy::GaussianSet;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(terms: &[usize]) -> MembershipLayer {
        let rows: Vec<Vec<GaussianSet>> = terms
            .iter()
            .map(|&n| (0..n).map(|j| GaussianSet::new(j as f64, 1.0).unwrap()).collect())
            .collect();
        MembershipLayer::from_terms(&rows).unwrap()
    }

    fn bank(estimator: Estimator, rules: usize, terms: &[usize], retain: usize) -> RuleBank {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        RuleBank::new(
            rules,
            &layer(terms),
            RuleBankConfig {
                estimator,
                temperature: 0.5,
                retain_batches: retain,
                threshold_percentile: 0.0,
            },
            &mut rng,
        )
        .unwrap()
    }

    #[test]
    fn ste_picks_argmax() {
        let mut b = bank(Estimator::Ste, 1, &[3], 1);
        b.logits_mut().assign(&array![[[5.0, 0.0, 0.0]]]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..5 {
            let s = b.sample_structure(&mut rng).unwrap();
            assert_eq!(s.selection.chosen[[0, 0]], 0);
        }
    }

    #[test]
    fn argmax_ties_take_lowest_index() {
        let mut b = bank(Estimator::Ste, 1, &[3], 1);
        b.logits_mut().assign(&array![[[1.0, 2.0, 2.0]]]);
        let s = b.greedy_structure();
        assert_eq!(s.selection.chosen[[0, 0]], 1);
    }

    #[test]
    fn masked_terms_never_chosen_and_soft_normalized() {
        let mut b = bank(Estimator::Stge, 6, &[1, 4, 2], 1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let s = b.sample_structure(&mut rng).unwrap();
            for u in 0..6 {
                for (i, &n) in [1usize, 4, 2].iter().enumerate() {
                    assert!(s.selection.chosen[[u, i]] < n);
                    let total: f64 = (0..4).map(|j| s.soft[[u, i, j]]).sum();
                    assert!((total - 1.0).abs() < 1e-12);
                    for j in n..4 {
                        assert_eq!(s.soft[[u, i, j]], 0.0);
                        assert_eq!(b.logits()[[u, i, j]], MASKED_LOGIT);
                    }
                }
            }
        }
    }

    #[test]
    fn retention_window_holds_selection() {
        let mut b = bank(Estimator::Stge, 8, &[4, 4], 3);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let first = b.sample_structure(&mut rng).unwrap();
        assert_eq!(b.noise_age(), 1);
        let second = b.sample_structure(&mut rng).unwrap();
        let third = b.sample_structure(&mut rng).unwrap();
        assert_eq!(b.noise_age(), 0);
        assert_eq!(first.selection, second.selection);
        assert_eq!(first.selection, third.selection);
        let fourth = b.sample_structure(&mut rng).unwrap();
        assert_ne!(first.noise, fourth.noise);
    }

    #[test]
    fn sampling_is_deterministic_for_a_seed() {
        let run = || {
            let mut b = bank(Estimator::Stge, 5, &[3, 2], 1);
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            (0..4)
                .map(|_| b.sample_structure(&mut rng).unwrap().selection)
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn invalid_temperature_is_a_config_error() {
        let mut b = bank(Estimator::Stge, 1, &[2], 1);
        b.config.temperature = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(b.sample_structure(&mut rng), Err(crate::NfnError::Config(_))));
    }

    #[test]
    fn two_term_gradient_closed_form() {
        let p: f64 = 0.3;
        let tau = 0.5;
        let sample = StructureSample {
            selection: HardSelection::from_chosen(array![[1]], 2),
            soft: array![[[p, 1.0 - p]]],
            noise: None,
            temperature: tau,
        };
        let (a, b) = (1.7, -0.4);
        let d = structure_gradient(&sample, array![[[a, b]]].view()).unwrap();
        assert!((d[[0, 0, 0]] - p * (1.0 - p) * (a - b) / tau).abs() < 1e-15);
        assert!((d[[0, 0, 0]] + d[[0, 0, 1]]).abs() < 1e-15);
        let zero = structure_gradient(&sample, Array3::zeros((1, 1, 2)).view()).unwrap();
        assert!(zero.iter().all(|v| *v == 0.0));
        assert!(structure_gradient(&sample, Array3::zeros((1, 1, 3)).view()).is_err());
    }

    #[test]
    fn percentile_matches_linear_interpolation() {
        assert_eq!(percentile(&[1.0, 2.0, 3.0, 4.0], 0.0), 1.0);
        assert_eq!(percentile(&[1.0, 2.0, 3.0, 4.0], 100.0), 4.0);
        assert!((percentile(&[4.0, 1.0, 3.0, 2.0], 10.0) - 1.3).abs() < 1e-12);
    }

    #[test]
    fn constraint_cases() {
        let existence = array![[true, true, true, false]];
        let s = ScalarCardinality {
            values: array![[0.0, 5.0, 6.0, 0.0]],
        };
        assert_eq!(effective_mask(&existence, &s, 0.0).unwrap(), existence);
        let m = effective_mask(&existence, &s, 10.0).unwrap();
        assert_eq!(m, array![[false, true, true, false]]);
        let flat = ScalarCardinality {
            values: array![[2.0, 2.0, 2.0, 0.0]],
        };
        assert_eq!(effective_mask(&existence, &flat, 10.0).unwrap(), existence);
        assert!(effective_mask(&existence, &s, -1.0).is_err());
    }

    #[test]
    fn constrained_bank_skips_excluded_term() {
        let mut b = bank(Estimator::Stge, 4, &[3], 1);
        b.config.threshold_percentile = 10.0;
        b.logits_mut().fill(0.0);
        let s = ScalarCardinality {
            values: array![[0.0, 3.0, 4.0]],
        };
        b.constrain(&s).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let sample = b.sample_structure(&mut rng).unwrap();
            assert!(sample.selection.chosen.iter().all(|&j| j != 0));
            assert!(sample.soft.index_axis(Axis(2), 0).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn cardinality_decays_and_accumulates() {
        let mut s = ScalarCardinality::new(1, 2);
        s.update(array![[[1.0, 0.5]], [[1.0, 0.0]]].view());
        assert_eq!(s.values, array![[2.0, 0.5]]);
        s.update(array![[[0.0, 0.0, 1.0]]].view());
        assert!((s.values[[0, 0]] - 1.98).abs() < 1e-12);
        assert_eq!(s.values[[0, 2]], 1.0);
    }

    #[test]
    fn expand_terms_opens_new_slot() {
        let mut l = layer(&[2, 3]);
        let mut b = bank(Estimator::Stge, 5, &[2, 3], 100);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        b.sample_structure(&mut rng).unwrap();
        let j = l.add_term(1, GaussianSet::new(9.0, 1.0).unwrap()).unwrap();
        b.expand_terms(&l, 1, j).unwrap();
        assert_eq!(b.capacity(), 4);
        for u in 0..5 {
            let mean = (0..3).map(|k| b.logits()[[u, 1, k]]).sum::<f64>() / 3.0;
            assert!((b.logits()[[u, 1, 3]] - mean).abs() < 1e-12);
        }
        let s = b.sample_structure(&mut rng).unwrap();
        for u in 0..5 {
            assert!(s.soft[[u, 1, 3]] > 0.0);
            for i in 0..2 {
                let total: f64 = s.soft.slice(ndarray::s![u, i, ..]).sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
        assert!(matches!(b.expand_terms(&l, 1, j), Err(crate::NfnError::Structural(_))));
        assert!(b.expand_terms(&l, 0, 2).is_err());
    }

    #[test]
    fn table_lists_every_rule() {
        let b = bank(Estimator::Ste, 3, &[2, 2], 1);
        let t = b.greedy_structure().selection.table();
        assert_eq!(t.lines().count(), 4);
        assert!(t.starts_with("rule\tx0\tx1"));
    }
}
