//! Gaussian fuzzy sets and the masked membership layer.
//!
//! Each condition attribute owns a ragged list of linguistic terms. Terms are
//! stored in dense `|C| × capacity` matrices next to a boolean existence
//! mask, so batch evaluation works on contiguous memory. Entries outside the
//! mask hold `0.0` and never reach an output or receive a gradient.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{config, input, structural, Result};

/// Relative width floor, multiplied by the attribute scale.
pub const WIDTH_FLOOR_FACTOR: f64 = 1e-4;

/// Version tag written into serialized layer documents.
pub const LAYER_DOCUMENT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianSet {
    pub center: f64,
    pub width: f64,
}

impl GaussianSet {
    pub fn new(center: f64, width: f64) -> Result<Self> {
        if !center.is_finite() || !(width > 0.0) || !width.is_finite() {
            return Err(config(format!(
                "gaussian set needs a finite center and positive width, got ({center}, {width})"
            )));
        }
        Ok(Self { center, width })
    }

    /// Membership degree `exp(-(x - c)^2 / (2 sigma^2))`.
    pub fn degree(&self, x: f64) -> f64 {
        let z = (x - self.center) / self.width;
        (-0.5 * z * z).exp()
    }
}

/// The membership (condition) layer of a neuro-fuzzy network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MembershipLayer {
    centers: Array2<f64>,
    widths: Array2<f64>,
    mask: Array2<bool>,
    term_counts: Vec<usize>,
    width_floor: Vec<f64>,
    width_ceiling: Option<f64>,
}

/// Observations whose best membership falls below `epsilon`.
#[derive(Debug, Clone, PartialEq)]
pub struct CompletenessReport {
    /// `(observation index, attribute index)` pairs, ordered by observation
    /// then attribute.
    pub failing: Vec<(usize, usize)>,
    pub epsilon: f64,
}

impl CompletenessReport {
    pub fn is_complete(&self) -> bool {
        self.failing.is_empty()
    }

    /// Distinct attributes with at least one failure, ascending.
    pub fn failing_attributes(&self) -> Vec<usize> {
        let mut attrs: Vec<usize> = self.failing.iter().map(|&(_, i)| i).collect();
        attrs.sort_unstable();
        attrs.dedup();
        attrs
    }
}

/// Gradients of a loss through the Gaussian membership functions.
#[derive(Debug, Clone, PartialEq)]
pub struct MembershipGradients {
    pub centers: Array2<f64>,
    pub widths: Array2<f64>,
    pub input: Array2<f64>,
}

impl MembershipLayer {
    /// Builds a layer from explicit per-attribute term lists.
    pub fn from_terms(terms: &[Vec<GaussianSet>]) -> Result<Self> {
        if terms.is_empty() {
            return Err(structural("membership layer needs at least one attribute"));
        }
        let capacity = terms.iter().map(Vec::len).max().unwrap_or(0);
        let attrs = terms.len();
        let mut centers = Array2::zeros((attrs, capacity));
        let mut widths = Array2::zeros((attrs, capacity));
        let mut mask = Array2::from_elem((attrs, capacity), false);
        let mut term_counts = Vec::with_capacity(attrs);
        for (i, row) in terms.iter().enumerate() {
            if row.is_empty() {
                return Err(structural(format!("attribute {i} has no terms")));
            }
            for (j, set) in row.iter().enumerate() {
                GaussianSet::new(set.center, set.width)?;
                centers[[i, j]] = set.center;
                widths[[i, j]] = set.width;
                mask[[i, j]] = true;
            }
            term_counts.push(row.len());
        }
        Ok(Self {
            centers,
            widths,
            mask,
            term_counts,
            width_floor: vec![WIDTH_FLOOR_FACTOR; attrs],
            width_ceiling: None,
        })
    }

    /// `terms` evenly spaced centers over `[low, high]` for every attribute.
    ///
    /// Widths are half the center spacing, so adjacent terms cross at
    /// `exp(-0.5)` and the whole interval is 0.6-complete. A single term sits
    /// in the middle with a width of half the interval.
    pub fn uniform(attributes: usize, terms: usize, low: f64, high: f64) -> Result<Self> {
        if attributes == 0 || terms == 0 {
            return Err(structural("uniform layer needs attributes > 0 and terms > 0"));
        }
        if !(high > low) || !low.is_finite() || !high.is_finite() {
            return Err(config(format!("invalid interval [{low}, {high}]")));
        }
        let row: Vec<GaussianSet> = if terms == 1 {
            vec![GaussianSet::new(0.5 * (low + high), 0.5 * (high - low))?]
        } else {
            let spacing = (high - low) / (terms - 1) as f64;
            (0..terms)
                .map(|j| GaussianSet::new(low + spacing * j as f64, 0.5 * spacing))
                .collect::<Result<_>>()?
        };
        let mut layer = Self::from_terms(&vec![row; attributes])?;
        layer.set_attribute_scales(&vec![high - low; attributes])?;
        Ok(layer)
    }

    /// Sets the per-attribute scale used for the width floor
    /// (`1e-4 × scale`).
    pub fn set_attribute_scales(&mut self, scales: &[f64]) -> Result<()> {
        if scales.len() != self.attribute_count() {
            return Err(structural(format!(
                "expected {} attribute scales, got {}",
                self.attribute_count(),
                scales.len()
            )));
        }
        if scales.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(config("attribute scales must be positive and finite"));
        }
        self.width_floor = scales.iter().map(|s| WIDTH_FLOOR_FACTOR * s).collect();
        self.clamp_widths();
        Ok(())
    }

    /// Optional upper bound on widths; off by default.
    pub fn set_width_ceiling(&mut self, ceiling: Option<f64>) -> Result<()> {
        if let Some(c) = ceiling {
            if !(c > 0.0) {
                return Err(config("width ceiling must be positive"));
            }
        }
        self.width_ceiling = ceiling;
        self.clamp_widths();
        Ok(())
    }

    pub fn attribute_count(&self) -> usize {
        self.term_counts.len()
    }

    /// Number of term slots per attribute in the dense storage.
    pub fn capacity(&self) -> usize {
        self.mask.ncols()
    }

    pub fn term_counts(&self) -> &[usize] {
        &self.term_counts
    }

    pub fn total_terms(&self) -> usize {
        self.term_counts.iter().sum()
    }

    pub fn mask(&self) -> &Array2<bool> {
        &self.mask
    }

    pub fn centers(&self) -> &Array2<f64> {
        &self.centers
    }

    pub fn widths(&self) -> &Array2<f64> {
        &self.widths
    }

    pub fn width_floor(&self, attribute: usize) -> f64 {
        self.width_floor[attribute]
    }

    pub fn term(&self, attribute: usize, term: usize) -> Option<GaussianSet> {
        if attribute < self.attribute_count() && term < self.term_counts[attribute] {
            Some(GaussianSet {
                center: self.centers[[attribute, term]],
                width: self.widths[[attribute, term]],
            })
        } else {
            None
        }
    }

    pub fn terms(&self, attribute: usize) -> Vec<GaussianSet> {
        (0..self.term_counts[attribute])
            .filter_map(|j| self.term(attribute, j))
            .collect()
    }

    pub(crate) fn centers_widths_mut(&mut self) -> (&mut Array2<f64>, &mut Array2<f64>) {
        (&mut self.centers, &mut self.widths)
    }

    /// Appends a term to `attribute`, growing the dense storage if needed.
    /// Returns the new term's index. Existing terms are untouched.
    pub fn add_term(&mut self, attribute: usize, set: GaussianSet) -> Result<usize> {
        if attribute >= self.attribute_count() {
            return Err(structural(format!("attribute {attribute} out of range")));
        }
        let set = GaussianSet::new(set.center, set.width.max(self.width_floor[attribute]))?;
        let j = self.term_counts[attribute];
        if j == self.capacity() {
            self.grow_capacity(j + 1);
        }
        self.centers[[attribute, j]] = set.center;
        self.widths[[attribute, j]] = set.width;
        self.mask[[attribute, j]] = true;
        self.term_counts[attribute] += 1;
        self.clamp_widths();
        Ok(j)
    }

    fn grow_capacity(&mut self, capacity: usize) {
        let attrs = self.attribute_count();
        let old = self.capacity();
        let mut centers = Array2::zeros((attrs, capacity));
        let mut widths = Array2::zeros((attrs, capacity));
        let mut mask = Array2::from_elem((attrs, capacity), false);
        for i in 0..attrs {
            for j in 0..old {
                centers[[i, j]] = self.centers[[i, j]];
                widths[[i, j]] = self.widths[[i, j]];
                mask[[i, j]] = self.mask[[i, j]];
            }
        }
        self.centers = centers;
        self.widths = widths;
        self.mask = mask;
    }

    /// Clamps existing widths into `[floor, ceiling]` and zeroes every
    /// masked slot. Called after each optimizer step.
    pub fn clamp_widths(&mut self) {
        for i in 0..self.attribute_count() {
            let floor = self.width_floor[i];
            for j in 0..self.capacity() {
                if self.mask[[i, j]] {
                    let mut w = self.widths[[i, j]].max(floor);
                    if let Some(c) = self.width_ceiling {
                        w = w.min(c.max(floor));
                    }
                    self.widths[[i, j]] = w;
                } else {
                    self.widths[[i, j]] = 0.0;
                    self.centers[[i, j]] = 0.0;
                }
            }
        }
    }

    pub(crate) fn check_batch(&self, batch: ArrayView2<'_, f64>) -> Result<()> {
        if batch.ncols() != self.attribute_count() {
            return Err(structural(format!(
                "batch has {} attributes, layer expects {}",
                batch.ncols(),
                self.attribute_count()
            )));
        }
        if let Some(((b, i), v)) = batch.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(input(format!("non-finite input {v} at ({b}, {i})")));
        }
        Ok(())
    }

    /// Membership tensor `|X| × |C| × capacity`; exactly zero where masked.
    pub fn membership(&self, batch: ArrayView2<'_, f64>) -> Result<Array3<f64>> {
        let q = self.standardized_squares(batch)?;
        let mut mu = q.mapv(|v| (-v).exp());
        self.zero_masked(&mut mu);
        Ok(mu)
    }

    /// Negative log-memberships `(x - c)^2 / (2 sigma^2)` per
    /// `(observation, attribute, term)`; zero where masked.
    pub fn standardized_squares(&self, batch: ArrayView2<'_, f64>) -> Result<Array3<f64>> {
        self.check_batch(batch)?;
        let (n, attrs, cap) = (batch.nrows(), self.attribute_count(), self.capacity());
        let mut q = Array3::zeros((n, attrs, cap));
        for b in 0..n {
            for i in 0..attrs {
                let x = batch[[b, i]];
                for j in 0..self.term_counts[i] {
                    let z = (x - self.centers[[i, j]]) / self.widths[[i, j]];
                    q[[b, i, j]] = 0.5 * z * z;
                }
            }
        }
        Ok(q)
    }

    fn zero_masked(&self, t: &mut Array3<f64>) {
        for ((_, i, j), v) in t.indexed_iter_mut() {
            if !self.mask[[i, j]] {
                *v = 0.0;
            }
        }
    }

    /// Reverse-mode pass through [`membership`](Self::membership).
    pub fn membership_gradients(
        &self,
        batch: ArrayView2<'_, f64>,
        upstream: ArrayView3<'_, f64>,
    ) -> Result<MembershipGradients> {
        self.check_batch(batch)?;
        let (n, attrs, cap) = (batch.nrows(), self.attribute_count(), self.capacity());
        if upstream.dim() != (n, attrs, cap) {
            return Err(structural(format!(
                "upstream shape {:?} does not match membership shape {:?}",
                upstream.dim(),
                (n, attrs, cap)
            )));
        }
        let mut d_centers = Array2::zeros((attrs, cap));
        let mut d_widths = Array2::zeros((attrs, cap));
        let mut d_input = Array2::zeros((n, attrs));
        for b in 0..n {
            for i in 0..attrs {
                let x = batch[[b, i]];
                for j in 0..self.term_counts[i] {
                    let (c, s) = (self.centers[[i, j]], self.widths[[i, j]]);
                    let diff = x - c;
                    let mu = (-0.5 * diff * diff / (s * s)).exp();
                    let g = upstream[[b, i, j]];
                    let dc = mu * diff / (s * s);
                    d_centers[[i, j]] += g * dc;
                    d_widths[[i, j]] += g * mu * diff * diff / (s * s * s);
                    d_input[[b, i]] -= g * dc;
                }
            }
        }
        Ok(MembershipGradients {
            centers: d_centers,
            widths: d_widths,
            input: d_input,
        })
    }

    /// Lists every `(observation, attribute)` whose best existing term has a
    /// membership below `epsilon`.
    pub fn check_completeness(&self, batch: ArrayView2<'_, f64>, epsilon: f64) -> Result<CompletenessReport> {
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return Err(config(format!("epsilon must lie in (0, 1), got {epsilon}")));
        }
        self.check_batch(batch)?;
        let mut failing = Vec::new();
        for b in 0..batch.nrows() {
            for i in 0..self.attribute_count() {
                let x = batch[[b, i]];
                let best = (0..self.term_counts[i])
                    .map(|j| {
                        let z = (x - self.centers[[i, j]]) / self.widths[[i, j]];
                        (-0.5 * z * z).exp()
                    })
                    .fold(0.0_f64, f64::max);
                if best < epsilon {
                    failing.push((b, i));
                }
            }
        }
        Ok(CompletenessReport { failing, epsilon })
    }

    pub fn to_document(&self) -> LayerDocument {
        LayerDocument {
            version: LAYER_DOCUMENT_VERSION,
            attributes: (0..self.attribute_count())
                .map(|i| AttributeDocument {
                    width_floor: self.width_floor[i],
                    terms: self.terms(i).into_iter().map(|s| [s.center, s.width]).collect(),
                })
                .collect(),
            width_ceiling: self.width_ceiling,
        }
    }

    pub fn from_document(doc: &LayerDocument) -> Result<Self> {
        if doc.version != LAYER_DOCUMENT_VERSION {
            return Err(config(format!("unsupported layer document version {}", doc.version)));
        }
        let terms: Vec<Vec<GaussianSet>> = doc
            .attributes
            .iter()
            .map(|a| {
                a.terms
                    .iter()
                    .map(|&[c, w]| GaussianSet { center: c, width: w })
                    .collect()
            })
            .collect();
        let mut layer = Self::from_terms(&terms)?;
        layer.width_floor = doc.attributes.iter().map(|a| a.width_floor).collect();
        layer.width_ceiling = doc.width_ceiling;
        Ok(layer)
    }
}

/// Versioned text form of a membership layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDocument {
    pub version: u32,
    pub attributes: Vec<AttributeDocument>,
    #[serde(default)]
    pub width_ceiling: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeDocument {
    pub width_floor: f64,
    /// `(center, width)` pairs in term order.
    pub terms: Vec<[f64; 2]>,
}
