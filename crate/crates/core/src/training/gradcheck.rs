//! Central finite-difference verification of the analytic backward pass.
//!
//! Hard structures are not differentiable, so the numeric side perturbs the
//! surrogate selection `one_hot + soft(logits') - soft(logits)`. Its value
//! equals the one-hot at the unperturbed logits and its derivative is exactly
//! the straight-through gradient.

use ndarray::{Array2, Array3, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::adam::Parameterized;
use super::backward::backward;
use crate::error::{structural, Result};
use crate::inference::{BlockConfig, BlockTape, CertaintyMode, FiringMode, Network, Normalizer};
use crate::rules::{Estimator, StructureSample};

/// Mean squared error over every entry and its gradient.
pub fn mse_loss(y: &Array2<f64>, target: ArrayView2<'_, f64>) -> Result<(f64, Array2<f64>)> {
    if y.dim() != target.dim() {
        return Err(structural(format!(
            "prediction {:?} and target {:?} differ in shape",
            y.dim(),
            target.dim()
        )));
    }
    let n = y.len().max(1) as f64;
    let diff = y - &target;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
    Ok((loss, diff.mapv(|d| 2.0 * d / n)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    /// Step is `relative_step * max(1, |theta|)`.
    pub relative_step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            relative_step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub path: String,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Entries whose perturbation moved a sparse normalizer's support.
    pub skipped: usize,
    pub max_relative_error: f64,
    pub worst: Option<GradCheckEntry>,
    pub failures: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn surrogate_selections(net: &Network, base_soft: &[Array3<f64>], structures: &[StructureSample]) -> Vec<Array3<f64>> {
    net.blocks()
        .iter()
        .zip(structures)
        .zip(base_soft)
        .map(|((block, s), soft0)| {
            let soft = block.rules().soft_from(block.rules().logits(), s.noise.as_ref());
            &s.selection.one_hot + &(soft - soft0)
        })
        .collect()
}

fn support(tapes: &[BlockTape]) -> Vec<bool> {
    tapes
        .iter()
        .flat_map(|t| t.firing.iter().map(|p| *p > 0.0).collect::<Vec<_>>())
        .collect()
}

fn surrogate_loss(
    net: &Network,
    base_soft: &[Array3<f64>],
    x: ArrayView2<'_, f64>,
    target: ArrayView2<'_, f64>,
    structures: &[StructureSample],
) -> Result<(f64, Vec<bool>)> {
    let selections = surrogate_selections(net, base_soft, structures);
    let (y, tapes) = net.forward_relaxed(x, &selections)?;
    Ok((mse_loss(&y, target)?.0, support(&tapes)))
}

/// Compares every analytic parameter gradient of the MSE loss against
/// central finite differences.
pub fn check_gradients(
    network: &Network,
    x: ArrayView2<'_, f64>,
    target: ArrayView2<'_, f64>,
    structures: &[StructureSample],
    config: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let (y, tape) = network.forward(x, structures)?;
    let (_, dy) = mse_loss(&y, target)?;
    let analytic = backward(network, &tape, &dy)?.named();

    let base_soft: Vec<Array3<f64>> = network
        .blocks()
        .iter()
        .zip(structures)
        .map(|(b, s)| b.rules().soft_from(b.rules().logits(), s.noise.as_ref()))
        .collect();
    let (_, base_support) = surrogate_loss(network, &base_soft, x, target, structures)?;

    let mut work = network.clone();
    let mut report = GradCheckReport::default();
    for (k, (name, grad)) in analytic.iter().enumerate() {
        for (e, &a) in grad.iter().enumerate() {
            let original = {
                let params = work.parameters_mut();
                *params[k].1.iter().nth(e).expect("entry")
            };
            let h = config.relative_step * original.abs().max(1.0);
            let mut eval = |value: f64| -> Result<(f64, Vec<bool>)> {
                {
                    let mut params = work.parameters_mut();
                    *params[k].1.iter_mut().nth(e).expect("entry") = value;
                }
                surrogate_loss(&work, &base_soft, x, target, structures)
            };
            let (plus, s_plus) = eval(original + h)?;
            let (minus, s_minus) = eval(original - h)?;
            eval(original)?;
            if s_plus != base_support || s_minus != base_support {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * h);
            let rel = relative_error(a, numeric, config.floor);
            report.checked += 1;
            let entry = GradCheckEntry {
                path: format!("{name}[{e}]"),
                analytic: a,
                numeric,
                relative_error: rel,
            };
            if rel > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = report.max_relative_error.max(rel);
                report.worst = Some(entry.clone());
            }
            if rel > config.tolerance {
                report.failures.push(entry);
            }
        }
    }
    Ok(report)
}

/// One configuration of the gradient suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuiteCell {
    pub firing_mode: FiringMode,
    pub normalizer: Normalizer,
    pub layer_norm: bool,
    pub certainty: bool,
    /// STE, or STGE with its Gumbel noise held fixed.
    pub estimator: Estimator,
}

impl SuiteCell {
    /// All 32 combinations.
    pub fn all() -> Vec<Self> {
        let mut out = Vec::with_capacity(32);
        for firing_mode in [FiringMode::Sum, FiringMode::Mean] {
            for normalizer in [Normalizer::Softmax, Normalizer::Entmax15] {
                for layer_norm in [false, true] {
                    for certainty in [false, true] {
                        for estimator in [Estimator::Ste, Estimator::Stge] {
                            out.push(Self {
                                firing_mode,
                                normalizer,
                                layer_norm,
                                certainty,
                                estimator,
                            });
                        }
                    }
                }
            }
        }
        out
    }

    fn block_config(&self, inputs: usize, outputs: usize, rules: usize) -> BlockConfig {
        let mut cfg = BlockConfig::new(inputs, outputs, rules);
        cfg.inference.firing_mode = self.firing_mode;
        cfg.inference.normalizer = self.normalizer;
        cfg.inference.layer_norm = self.layer_norm;
        cfg.certainty = if self.certainty {
            CertaintyMode::Renormalized
        } else {
            CertaintyMode::Off
        };
        cfg.rule_bank.estimator = self.estimator;
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub cell: SuiteCell,
    pub networks: usize,
    pub checked: usize,
    pub skipped: usize,
    pub max_relative_error: f64,
    pub worst: Option<GradCheckEntry>,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub cells: Vec<CellReport>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.cells.iter().all(|c| c.failures == 0 && c.checked > 0)
    }

    pub fn max_relative_error(&self) -> f64 {
        self.cells.iter().map(|c| c.max_relative_error).fold(0.0, f64::max)
    }
}

/// Random single-block network of the given cell with every parameter
/// moved away from its initial value: at most 6 attributes, 8 rules and
/// 3 outputs.
pub fn random_suite_network(cell: &SuiteCell, rng: &mut ChaCha8Rng) -> Result<Network> {
    let inputs = rng.gen_range(1..=6);
    let rules = rng.gen_range(2..=8);
    let outputs = rng.gen_range(1..=3);
    let mut cfg = cell.block_config(inputs, outputs, rules);
    cfg.initial_terms = rng.gen_range(1..=3);
    let mut net = Network::from_configs(&[cfg], rng)?;
    for (name, mut values) in net.parameters_mut() {
        for v in values.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            if name.ends_with("widths") {
                *v *= (0.2 * z).exp();
            } else {
                *v += 0.3 * z;
            }
        }
    }
    net.after_step();
    Ok(net)
}

/// Smallest per-row standard deviation of the raw firing across rules.
fn min_firing_spread(net: &Network, x: &Array2<f64>, structures: &[StructureSample]) -> Result<f64> {
    let (_, tape) = net.forward(x.view(), structures)?;
    Ok(tape
        .blocks
        .iter()
        .flat_map(|b| b.raw_firing.rows().into_iter().map(|r| r.std(0.0)).collect::<Vec<_>>())
        .fold(f64::INFINITY, f64::min))
}

const LN_MIN_SPREAD: f64 = 0.05;
const MAX_REDRAWS: usize = 100;

/// Finite-difference check of `networks` random networks in every cell.
pub fn gradient_suite(seed: u64, networks: usize, config: &GradCheckConfig) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cells = Vec::new();
    for cell in SuiteCell::all() {
        let mut report = CellReport {
            cell,
            networks,
            checked: 0,
            skipped: 0,
            max_relative_error: 0.0,
            worst: None,
            failures: 0,
        };
        for _ in 0..networks {
            // near-tied rules put layer norm in its epsilon-dominated regime, where
            // central differences at the fixed step measure only roundoff
            let mut draw = 0;
            let (net, structures, x) = loop {
                let mut net = random_suite_network(&cell, &mut rng)?;
                let structures = net.sample_structures(&mut rng)?;
                let batch = rng.gen_range(2..=5);
                let x = Array2::from_shape_fn((batch, net.input_dim()), |_| rng.gen_range(-1.2..1.2));
                draw += 1;
                if !cell.layer_norm || draw >= MAX_REDRAWS || min_firing_spread(&net, &x, &structures)? >= LN_MIN_SPREAD
                {
                    break (net, structures, x);
                }
            };
            let batch = x.nrows();
            let t = Array2::from_shape_fn((batch, net.output_dim()), |_| rng.gen_range(-1.0..1.0));
            let r = check_gradients(&net, x.view(), t.view(), &structures, config)?;
            report.checked += r.checked;
            report.skipped += r.skipped;
            report.failures += r.failures.len();
            if r.max_relative_error >= report.max_relative_error {
                report.max_relative_error = r.max_relative_error;
                report.worst = r.worst;
            }
        }
        cells.push(report);
    }
    Ok(SuiteReport { cells })
}
