//! Affine rule consequents and the weighted-average defuzzifier.

use ndarray::{Array1, Array2, Array3, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::firing::row_major;
use crate::error::{structural, Result};

/// How certainty factors weight the normalized firing levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum CertaintyMode {
    #[default]
    Off,
    /// `cf_u * w_u / sum_v cf_v * w_v`; outputs stay convex combinations.
    Renormalized,
    /// `cf_u * w_u` without renormalization.
    Raw,
}

/// Decision layer: `g_u(x) = W_u x + b_u` per rule, optionally with
/// certainty factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TskHead {
    /// `|U| × |D| × |C|`
    pub(crate) weights: Array3<f64>,
    /// `|U| × |D|`
    pub(crate) bias: Array2<f64>,
    pub(crate) cf: Option<Array1<f64>>,
    pub(crate) cf_mode: CertaintyMode,
}

impl TskHead {
    /// Uniform `±1/sqrt(|C|)` initialization; certainty factors start at 1.
    pub fn new(rules: usize, inputs: usize, outputs: usize, cf_mode: CertaintyMode, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (inputs.max(1) as f64).sqrt();
        let weights = Array3::from_shape_fn((rules, outputs, inputs), |_| rng.gen_range(-bound..bound));
        let bias = Array2::from_shape_fn((rules, outputs), |_| rng.gen_range(-bound..bound));
        Self::from_parts(weights, bias, cf_mode)
    }

    pub fn from_parts(weights: Array3<f64>, bias: Array2<f64>, cf_mode: CertaintyMode) -> Self {
        let rules = weights.dim().0;
        let cf = match cf_mode {
            CertaintyMode::Off => None,
            _ => Some(Array1::ones(rules)),
        };
        Self {
            weights: row_major(weights),
            bias,
            cf,
            cf_mode,
        }
    }

    pub fn rule_count(&self) -> usize {
        self.weights.dim().0
    }

    pub fn output_dim(&self) -> usize {
        self.weights.dim().1
    }

    pub fn input_dim(&self) -> usize {
        self.weights.dim().2
    }

    pub fn weights(&self) -> &Array3<f64> {
        &self.weights
    }

    pub fn bias(&self) -> &Array2<f64> {
        &self.bias
    }

    pub fn certainty_factors(&self) -> Option<&Array1<f64>> {
        self.cf.as_ref()
    }

    pub fn certainty_mode(&self) -> CertaintyMode {
        self.cf_mode
    }

    /// Rule recommendations `g[b][u][d]`.
    pub fn consequents(&self, x: ArrayView2<'_, f64>) -> Result<Array3<f64>> {
        let (rules, outputs, inputs) = self.weights.dim();
        if x.ncols() != inputs {
            return Err(structural(format!(
                "consequents expect {inputs} inputs, got {}",
                x.ncols()
            )));
        }
        let w2 = self
            .weights
            .view()
            .into_shape_with_order((rules * outputs, inputs))
            .expect("contiguous weights");
        let mut g = row_major(x.dot(&w2.t()))
            .into_shape_with_order((x.nrows(), rules, outputs))
            .expect("shape");
        for mut obs in g.outer_iter_mut() {
            obs += &self.bias;
        }
        Ok(g)
    }

    /// Per-rule mixing weights applied to the consequents.
    pub fn mixing_weights(&self, firing: ArrayView2<'_, f64>) -> Array2<f64> {
        match (&self.cf, self.cf_mode) {
            (Some(cf), CertaintyMode::Renormalized) => {
                let mut a = &firing * cf;
                for mut row in a.rows_mut() {
                    let total = row.sum();
                    row.mapv_inplace(|v| v / total);
                }
                a
            }
            (Some(cf), CertaintyMode::Raw) => &firing * cf,
            _ => firing.to_owned(),
        }
    }

    /// `y[b] = sum_u a[b][u] g[b][u]` for the mixing weights `a`.
    pub fn defuzzify(&self, x: ArrayView2<'_, f64>, firing: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if firing.dim() != (x.nrows(), self.rule_count()) {
            return Err(structural(format!(
                "firing shape {:?} does not match ({}, {})",
                firing.dim(),
                x.nrows(),
                self.rule_count()
            )));
        }
        let g = self.consequents(x)?;
        let a = self.mixing_weights(firing);
        Ok(mix(&g, &a))
    }
}

pub(crate) fn mix(g: &Array3<f64>, a: &Array2<f64>) -> Array2<f64> {
    let (n, rules, outputs) = g.dim();
    let mut y = Array2::zeros((n, outputs));
    for b in 0..n {
        for u in 0..rules {
            let au = a[[b, u]];
            if au == 0.0 {
                continue;
            }
            for d in 0..outputs {
                y[[b, d]] += au * g[[b, u, d]];
            }
        }
    }
    y
}

/// Gradients of the decision layer.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradients {
    pub weights: Array3<f64>,
    pub bias: Array2<f64>,
    pub cf: Option<Array1<f64>>,
    pub firing: Array2<f64>,
    pub input: Array2<f64>,
}

impl TskHead {
    /// Reverse pass through [`defuzzify`](Self::defuzzify).
    pub fn backward(
        &self,
        x: ArrayView2<'_, f64>,
        firing: ArrayView2<'_, f64>,
        g: &Array3<f64>,
        upstream: &Array2<f64>,
    ) -> HeadGradients {
        let (n, rules, outputs) = g.dim();
        let inputs = self.input_dim();
        let a = self.mixing_weights(firing);

        // dg[b][u][d] = a[b][u] * dy[b][d];  da[b][u] = <g[b][u], dy[b]>
        let mut dg = Array3::zeros((n, rules, outputs));
        let mut da = Array2::zeros((n, rules));
        for b in 0..n {
            for u in 0..rules {
                let mut acc = 0.0;
                for d in 0..outputs {
                    dg[[b, u, d]] = a[[b, u]] * upstream[[b, d]];
                    acc += g[[b, u, d]] * upstream[[b, d]];
                }
                da[[b, u]] = acc;
            }
        }

        let dg2 = dg.view().into_shape_with_order((n, rules * outputs)).expect("shape");
        let d_weights = row_major(dg2.t().dot(&x))
            .into_shape_with_order((rules, outputs, inputs))
            .expect("shape");
        let d_bias = dg.sum_axis(ndarray::Axis(0));
        let w2 = self
            .weights
            .view()
            .into_shape_with_order((rules * outputs, inputs))
            .expect("shape");
        let d_input = dg2.dot(&w2);

        let (d_firing, d_cf) = match (&self.cf, self.cf_mode) {
            (Some(cf), CertaintyMode::Renormalized) => {
                let mut d_firing = Array2::zeros((n, rules));
                let mut d_cf = Array1::zeros(rules);
                for b in 0..n {
                    let total: f64 = (0..rules).map(|u| cf[u] * firing[[b, u]]).sum();
                    let dot: f64 = (0..rules).map(|u| a[[b, u]] * da[[b, u]]).sum();
                    for u in 0..rules {
                        let dv = (da[[b, u]] - dot) / total;
                        d_firing[[b, u]] = cf[u] * dv;
                        d_cf[u] += firing[[b, u]] * dv;
                    }
                }
                (d_firing, Some(d_cf))
            }
            (Some(cf), CertaintyMode::Raw) => {
                let d_firing = &da * cf;
                let d_cf = (&da * &firing).sum_axis(ndarray::Axis(0));
                (d_firing, Some(d_cf))
            }
            _ => (da, None),
        };

        HeadGradients {
            weights: d_weights,
            bias: d_bias,
            cf: d_cf,
            firing: d_firing,
            input: d_input,
        }
    }
}
