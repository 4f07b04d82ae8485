//! Rule firing levels in log space.
//!
//! With Gaussian terms and a product t-norm, the normalized firing of a TSK
//! rule is a softmax over `w_u = -sum_i (x_i - c)^2 / (2 sigma^2)`. Working on
//! `w_u` directly avoids the underflow of multiplying many memberships.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{config, input, structural, Result};
use crate::fuzzy::MembershipLayer;
use crate::rules::HardSelection;

/// Bisection steps for the 1.5-entmax threshold (interval of width 1).
pub const ENTMAX_BISECTION_STEPS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FiringMode {
    /// Sum of negative log-memberships.
    Sum,
    /// Same sum divided by the number of condition attributes.
    Mean,
}

impl FiringMode {
    pub fn scale(self, attributes: usize) -> f64 {
        match self {
            FiringMode::Sum => 1.0,
            FiringMode::Mean => 1.0 / attributes as f64,
        }
    }
}

/// Normalization of preliminary firing levels (the `alpha` of alpha-entmax).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Normalizer {
    /// alpha = 1.0
    Softmax,
    /// alpha = 1.5
    Entmax15,
}

impl Normalizer {
    pub fn from_alpha(alpha: f64) -> Result<Self> {
        if alpha == 1.0 {
            Ok(Normalizer::Softmax)
        } else if alpha == 1.5 {
            Ok(Normalizer::Entmax15)
        } else {
            Err(config(format!("alpha must be 1.0 or 1.5, got {alpha}")))
        }
    }

    pub fn alpha(self) -> f64 {
        match self {
            Normalizer::Softmax => 1.0,
            Normalizer::Entmax15 => 1.5,
        }
    }
}

/// Preliminary firing for a hard selection, evaluated straight from the
/// Gaussian parameters: `w[b][u] = -scale * sum_i (x_bi - c)^2 / (2 sigma^2)`
/// over the term chosen by rule `u` for attribute `i`.
pub fn preliminary_firing(
    layer: &MembershipLayer,
    batch: ArrayView2<'_, f64>,
    selection: &HardSelection,
    mode: FiringMode,
) -> Result<Array2<f64>> {
    layer.check_batch(batch)?;
    let attrs = layer.attribute_count();
    if selection.chosen.ncols() != attrs {
        return Err(structural(format!(
            "selection covers {} attributes, layer has {attrs}",
            selection.chosen.ncols()
        )));
    }
    for ((u, i), &j) in selection.chosen.indexed_iter() {
        if j >= layer.term_counts()[i] {
            return Err(structural(format!(
                "rule {u} selects nonexistent term {j} of attribute {i}"
            )));
        }
    }
    let scale = mode.scale(attrs);
    let (c, s) = (layer.centers(), layer.widths());
    let mut w = Array2::zeros((batch.nrows(), selection.rule_count()));
    for b in 0..batch.nrows() {
        for (u, row) in selection.chosen.axis_iter(Axis(0)).enumerate() {
            let mut acc = 0.0;
            for (i, &j) in row.iter().enumerate() {
                let z = (batch[[b, i]] - c[[i, j]]) / s[[i, j]];
                acc += 0.5 * z * z;
            }
            w[[b, u]] = -scale * acc;
        }
    }
    Ok(w)
}

/// Matrix products may come back column-major; reshaping needs row-major.
pub(crate) fn row_major<D: ndarray::Dimension>(a: ndarray::Array<f64, D>) -> ndarray::Array<f64, D> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

fn flatten3(t: ArrayView3<'_, f64>) -> ArrayView2<'_, f64> {
    let (a, b, c) = t.dim();
    t.into_shape_with_order((a, b * c)).expect("contiguous tensor")
}

/// Preliminary firing for a (possibly relaxed) selection tensor `U × C × T`
/// applied to negative log-memberships `q` (`X × C × T`).
pub(crate) fn preliminary_from_weights(q: &Array3<f64>, weights: &Array3<f64>, scale: f64) -> Array2<f64> {
    let q2 = flatten3(q.view());
    let w2 = flatten3(weights.view());
    let mut w = q2.dot(&w2.t());
    w.mapv_inplace(|v| -scale * v);
    w
}

/// Backward of [`preliminary_from_weights`]: returns `(dq, d_weights)`.
pub(crate) fn preliminary_backward(
    q: &Array3<f64>,
    weights: &Array3<f64>,
    scale: f64,
    upstream: &Array2<f64>,
) -> (Array3<f64>, Array3<f64>) {
    let q2 = flatten3(q.view());
    let w2 = flatten3(weights.view());
    let mut dq = upstream.dot(&w2);
    dq.mapv_inplace(|v| -scale * v);
    let mut dw = upstream.t().dot(&q2);
    dw.mapv_inplace(|v| -scale * v);
    let dq = row_major(dq).into_shape_with_order(q.dim()).expect("shape");
    let dw = row_major(dw).into_shape_with_order(weights.dim()).expect("shape");
    (dq, dw)
}

/// Cached statistics of a layer-normalization pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormCache {
    pub normalized: Array2<f64>,
    pub inv_std: Array1<f64>,
}

/// Per-row layer normalization over the rule dimension:
/// `gain * (w - mean) / sqrt(var + eps) + bias` with population variance.
pub fn layer_normalize(
    w: ArrayView2<'_, f64>,
    gain: ArrayView1<'_, f64>,
    bias: ArrayView1<'_, f64>,
    eps: f64,
) -> Result<(Array2<f64>, LayerNormCache)> {
    let (n, rules) = w.dim();
    if gain.len() != rules || bias.len() != rules {
        return Err(structural(format!(
            "layer norm over {rules} rules got gain {} / bias {}",
            gain.len(),
            bias.len()
        )));
    }
    let mut normalized = Array2::zeros((n, rules));
    let mut inv_std = Array1::zeros(n);
    let mut out = Array2::zeros((n, rules));
    for b in 0..n {
        let row = w.row(b);
        let mean = row.sum() / rules as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / rules as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[b] = is;
        for u in 0..rules {
            let xh = (row[u] - mean) * is;
            normalized[[b, u]] = xh;
            out[[b, u]] = gain[u] * xh + bias[u];
        }
    }
    Ok((out, LayerNormCache { normalized, inv_std }))
}

/// Backward of [`layer_normalize`]: returns `(dw, d_gain, d_bias)`.
pub fn layer_normalize_backward(
    cache: &LayerNormCache,
    gain: ArrayView1<'_, f64>,
    upstream: &Array2<f64>,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let (n, rules) = upstream.dim();
    let mut dw = Array2::zeros((n, rules));
    let mut d_gain = Array1::zeros(rules);
    let mut d_bias = Array1::zeros(rules);
    let m = rules as f64;
    for b in 0..n {
        let mut sum_dxh = 0.0;
        let mut sum_dxh_xh = 0.0;
        for u in 0..rules {
            let g = upstream[[b, u]];
            let xh = cache.normalized[[b, u]];
            d_gain[u] += g * xh;
            d_bias[u] += g;
            let dxh = g * gain[u];
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xh;
        }
        let is = cache.inv_std[b];
        for u in 0..rules {
            let dxh = upstream[[b, u]] * gain[u];
            let xh = cache.normalized[[b, u]];
            dw[[b, u]] = is / m * (m * dxh - sum_dxh - xh * sum_dxh_xh);
        }
    }
    (dw, d_gain, d_bias)
}

/// Max-subtracted softmax of one row.
pub fn softmax_row(w: ArrayView1<'_, f64>) -> Array1<f64> {
    let max = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p = w.mapv(|v| (v - max).exp());
    let total = p.sum();
    p.mapv_inplace(|v| v / total);
    p
}

/// Exact 1.5-entmax of one row: `p_u = max(w_u / 2 - t, 0)^2` with the
/// threshold `t` found by bisection so that `sum p = 1`.
pub fn entmax15_row(w: ArrayView1<'_, f64>) -> Array1<f64> {
    let max = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // shift so that max(z) = 0; the threshold then lies in [-1, 0]
    let z = w.mapv(|v| 0.5 * (v - max));
    let mass = |t: f64| z.iter().map(|&v| (v - t).max(0.0).powi(2)).sum::<f64>();
    let (mut lo, mut hi) = (-1.0_f64, 0.0_f64);
    for _ in 0..ENTMAX_BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        if mass(mid) >= 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let t = 0.5 * (lo + hi);
    let mut p = z.mapv(|v| (v - t).max(0.0).powi(2));
    let total = p.sum();
    p.mapv_inplace(|v| v / total);
    p
}

/// Normalized firing levels, one row per observation.
pub fn normalize_firing(w: ArrayView2<'_, f64>, normalizer: Normalizer) -> Result<Array2<f64>> {
    if let Some(((b, u), v)) = w.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(input(format!("non-finite firing level {v} at ({b}, {u})")));
    }
    let mut out = Array2::zeros(w.dim());
    for (b, row) in w.axis_iter(Axis(0)).enumerate() {
        let p = match normalizer {
            Normalizer::Softmax => softmax_row(row),
            Normalizer::Entmax15 => entmax15_row(row),
        };
        out.row_mut(b).assign(&p);
    }
    Ok(out)
}

/// Backward of [`normalize_firing`] given its output `p`.
pub fn normalize_firing_backward(p: &Array2<f64>, upstream: &Array2<f64>, normalizer: Normalizer) -> Array2<f64> {
    let mut dw = Array2::zeros(p.dim());
    for b in 0..p.nrows() {
        let (pr, gr) = (p.row(b), upstream.row(b));
        match normalizer {
            Normalizer::Softmax => {
                let dot: f64 = pr.iter().zip(gr).map(|(a, g)| a * g).sum();
                for u in 0..pr.len() {
                    dw[[b, u]] = pr[u] * (gr[u] - dot);
                }
            }
            Normalizer::Entmax15 => {
                // Jacobian diag(s) - s s^T / sum(s) with s = sqrt(p)
                let s = pr.mapv(f64::sqrt);
                let s_sum = s.sum();
                let sg: f64 = s.iter().zip(gr).map(|(a, g)| a * g).sum();
                for u in 0..pr.len() {
                    dw[[b, u]] = s[u] * gr[u] - s[u] * sg / s_sum;
                }
            }
        }
    }
    dw
}

/// Shannon entropy of each row divided by `ln(|U|)`.
pub fn normalized_entropy(p: ArrayView2<'_, f64>) -> Array1<f64> {
    let rules = p.ncols();
    let denom = (rules as f64).ln();
    p.axis_iter(Axis(0))
        .map(|row| {
            let h: f64 = row.iter().filter(|v| **v > 0.0).map(|v| -v * v.ln()).sum();
            if denom > 0.0 {
                h / denom
            } else {
                0.0
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fuzzy::GaussianSet;
    use ndarray::{array, Array2};
    use proptest::prelude::*;

    #[test]
    fn preliminary_hand_values() {
        let layer = MembershipLayer::from_terms(&[
            vec![GaussianSet::new(0.0, 1.0).unwrap()],
            vec![GaussianSet::new(0.0, 1.0).unwrap(), GaussianSet::new(5.0, 2.0).unwrap()],
        ])
        .unwrap();
        let sel = HardSelection {
            chosen: array![[0, 0], [0, 1]],
            one_hot: Array3::zeros((2, 2, 2)),
        };
        let x = array![[1.0, 1.0], [0.0, 5.0]];
        let sum = preliminary_firing(&layer, x.view(), &sel, FiringMode::Sum).unwrap();
        let mean = preliminary_firing(&layer, x.view(), &sel, FiringMode::Mean).unwrap();
        assert_eq!(sum[[0, 0]], -1.0);
        assert_eq!(mean[[0, 0]], -0.5);
        assert_eq!(sum[[1, 1]], 0.0);
        for (s, m) in sum.iter().zip(mean.iter()) {
            assert!((s / 2.0 - m).abs() < 1e-15);
        }
        let bad = HardSelection {
            chosen: array![[1, 0]],
            one_hot: Array3::zeros((1, 2, 2)),
        };
        assert!(matches!(
            preliminary_firing(&layer, x.view(), &bad, FiringMode::Sum),
            Err(crate::NfnError::Structural(_))
        ));
    }

    #[test]
    fn softmax_cases() {
        let p = normalize_firing(array![[0.0, 0.0, 0.0]].view(), Normalizer::Softmax).unwrap();
        for v in p.iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = normalize_firing(array![[1000.0, 0.0]].view(), Normalizer::Softmax).unwrap();
        assert_eq!(p[[0, 0]], 1.0);
        assert!(p[[0, 1]] >= 0.0 && p[[0, 1]] < 1e-300);
    }

    #[test]
    fn entmax_cases() {
        let p = normalize_firing(array![[3.7, 3.7]].view(), Normalizer::Entmax15).unwrap();
        assert_eq!(p, array![[0.5, 0.5]]);
        let p = normalize_firing(array![[10.0, 0.0]].view(), Normalizer::Entmax15).unwrap();
        assert_eq!(p, array![[1.0, 0.0]]);
        assert!(normalize_firing(array![[f64::NAN, 0.0]].view(), Normalizer::Entmax15).is_err());
    }

    #[test]
    fn alpha_validation() {
        assert_eq!(Normalizer::from_alpha(1.0).unwrap(), Normalizer::Softmax);
        assert_eq!(Normalizer::from_alpha(1.5).unwrap(), Normalizer::Entmax15);
        assert!(Normalizer::from_alpha(2.0).is_err());
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let w = array![[4.0, 4.0, 4.0]];
        let (out, _) = layer_normalize(w.view(), Array1::ones(3).view(), Array1::zeros(3).view(), 1e-5).unwrap();
        assert!(out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn layer_norm_statistics() {
        let w = array![[1.0, -2.0, 5.0, 0.5]];
        let bias = array![0.1, 0.2, 0.3, 0.4];
        let (out, _) = layer_normalize(w.view(), Array1::ones(4).view(), bias.view(), 1e-5).unwrap();
        let mean = out.sum() / 4.0;
        assert!((mean - bias.sum() / 4.0).abs() < 1e-12);
        let (out, _) = layer_normalize(w.view(), Array1::ones(4).view(), Array1::zeros(4).view(), 1e-5).unwrap();
        let var = out.iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!((var - 1.0).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_gradient_matches_finite_differences() {
        let w = array![[0.3, -1.2, 2.0, 0.7, -0.1]];
        let gain = array![1.1, 0.9, -0.5, 1.3, 0.8];
        let bias = array![0.1, -0.2, 0.0, 0.3, 0.05];
        let coef = array![[0.5, -1.0, 0.25, 2.0, -0.75]];
        let loss = |w: &Array2<f64>, g: &Array1<f64>, bi: &Array1<f64>| {
            let (o, _) = layer_normalize(w.view(), g.view(), bi.view(), 1e-5).unwrap();
            (&o * &coef).sum()
        };
        let (_, cache) = layer_normalize(w.view(), gain.view(), bias.view(), 1e-5).unwrap();
        let (dw, dg, db) = layer_normalize_backward(&cache, gain.view(), &coef);
        let h = 1e-6;
        for u in 0..5 {
            let (mut wp, mut wm) = (w.clone(), w.clone());
            wp[[0, u]] += h;
            wm[[0, u]] -= h;
            let num = (loss(&wp, &gain, &bias) - loss(&wm, &gain, &bias)) / (2.0 * h);
            assert!((num - dw[[0, u]]).abs() <= 1e-4 * num.abs().max(1e-6), "dw {u}");
            let (mut gp, mut gm) = (gain.clone(), gain.clone());
            gp[u] += h;
            gm[u] -= h;
            let num = (loss(&w, &gp, &bias) - loss(&w, &gm, &bias)) / (2.0 * h);
            assert!((num - dg[u]).abs() <= 1e-4 * num.abs().max(1e-6), "dgain {u}");
            assert!((db[u] - coef[[0, u]]).abs() < 1e-15);
        }
    }

    #[test]
    fn entmax_backward_matches_finite_differences() {
        let w = array![[0.9, 0.1, 1.3, -4.0, 0.6]];
        let coef = array![[1.0, -2.0, 0.5, 3.0, 0.25]];
        let loss = |w: &Array2<f64>| (&normalize_firing(w.view(), Normalizer::Entmax15).unwrap() * &coef).sum();
        let p = normalize_firing(w.view(), Normalizer::Entmax15).unwrap();
        assert_eq!(p[[0, 3]], 0.0);
        let dw = normalize_firing_backward(&p, &coef, Normalizer::Entmax15);
        let h = 1e-6;
        for u in 0..5 {
            let (mut wp, mut wm) = (w.clone(), w.clone());
            wp[[0, u]] += h;
            wm[[0, u]] -= h;
            let num = (loss(&wp) - loss(&wm)) / (2.0 * h);
            assert!(
                (num - dw[[0, u]]).abs() <= 1e-4 * num.abs().max(1e-6),
                "{u}: {num} vs {}",
                dw[[0, u]]
            );
        }
    }

    proptest! {
        #[test]
        fn normalized_rows_are_distributions(
            row in proptest::collection::vec(-50.0f64..50.0, 2..12),
            shift in -100.0f64..100.0,
            entmax in any::<bool>(),
        ) {
            let norm = if entmax { Normalizer::Entmax15 } else { Normalizer::Softmax };
            let w = Array2::from_shape_vec((1, row.len()), row.clone()).unwrap();
            let p = normalize_firing(w.view(), norm).unwrap();
            prop_assert!((p.sum() - 1.0).abs() < 1e-9);
            prop_assert!(p.iter().all(|v| *v >= 0.0));
            for a in 0..row.len() {
                for b in 0..row.len() {
                    if row[a] >= row[b] {
                        prop_assert!(p[[0, a]] >= p[[0, b]]);
                    }
                }
            }
            let shifted = w.mapv(|v| v + shift);
            let q = normalize_firing(shifted.view(), norm).unwrap();
            for (x, y) in p.iter().zip(q.iter()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn softmax_has_no_exact_zero(row in proptest::collection::vec(-30.0f64..30.0, 2..10)) {
            let w = Array2::from_shape_vec((1, row.len()), row).unwrap();
            let p = normalize_firing(w.view(), Normalizer::Softmax).unwrap();
            prop_assert!(p.iter().all(|v| *v > 0.0));
        }
    }
}
