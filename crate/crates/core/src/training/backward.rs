//! Reverse-mode pass through a neuro-fuzzy stack.

use ndarray::{Array1, Array2, Array3, ArrayViewMutD};

use super::adam::{NamedGradients, Parameterized};
use crate::error::{structural, NfnError, Result};
use crate::inference::firing::{layer_normalize_backward, normalize_firing_backward, preliminary_backward};
use crate::inference::{BlockTape, Network, NfnBlock, Tape};
use crate::rules::{structure_gradient, StructureSample};

/// Gradients of every trainable tensor of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockGradients {
    pub centers: Array2<f64>,
    pub widths: Array2<f64>,
    pub logits: Array3<f64>,
    pub weights: Array3<f64>,
    pub bias: Array2<f64>,
    pub cf: Option<Array1<f64>>,
    pub ln_gain: Option<Array1<f64>>,
    pub ln_bias: Option<Array1<f64>>,
}

impl BlockGradients {
    fn tensors(&self) -> Vec<(&'static str, ndarray::ArrayViewD<'_, f64>)> {
        let mut out = vec![
            ("centers", self.centers.view().into_dyn()),
            ("widths", self.widths.view().into_dyn()),
            ("logits", self.logits.view().into_dyn()),
            ("weights", self.weights.view().into_dyn()),
            ("bias", self.bias.view().into_dyn()),
        ];
        if let Some(cf) = &self.cf {
            out.push(("cf", cf.view().into_dyn()));
        }
        if let (Some(g), Some(b)) = (&self.ln_gain, &self.ln_bias) {
            out.push(("ln_gain", g.view().into_dyn()));
            out.push(("ln_bias", b.view().into_dyn()));
        }
        out
    }
}

/// Gradients for a whole stack, block by block.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub blocks: Vec<BlockGradients>,
    /// Gradient with respect to the network input.
    pub input: Array2<f64>,
}

impl GradientSet {
    pub fn named(&self) -> NamedGradients {
        let mut out = Vec::new();
        for (k, b) in self.blocks.iter().enumerate() {
            for (name, t) in b.tensors() {
                out.push((format!("block{k}.{name}"), t.to_owned()));
            }
        }
        out
    }

    pub fn is_zero(&self) -> bool {
        self.named().iter().all(|(_, t)| t.iter().all(|v| *v == 0.0))
    }
}

fn block_parameters(block: &mut NfnBlock, k: usize) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
    let NfnBlock {
        membership,
        rules,
        head,
        layer_norm,
        ..
    } = block;
    let mut out: Vec<(String, ArrayViewMutD<'_, f64>)> = Vec::new();
    let (centers, widths) = membership.centers_widths_mut();
    out.push((format!("block{k}.centers"), centers.view_mut().into_dyn()));
    out.push((format!("block{k}.widths"), widths.view_mut().into_dyn()));
    out.push((format!("block{k}.logits"), rules.logits_mut().view_mut().into_dyn()));
    out.push((format!("block{k}.weights"), head.weights.view_mut().into_dyn()));
    out.push((format!("block{k}.bias"), head.bias.view_mut().into_dyn()));
    if let Some(cf) = head.cf.as_mut() {
        out.push((format!("block{k}.cf"), cf.view_mut().into_dyn()));
    }
    if let Some(ln) = layer_norm.as_mut() {
        out.push((format!("block{k}.ln_gain"), ln.gain.view_mut().into_dyn()));
        out.push((format!("block{k}.ln_bias"), ln.bias.view_mut().into_dyn()));
    }
    out
}

impl Parameterized for Network {
    fn parameters_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        self.blocks
            .iter_mut()
            .enumerate()
            .flat_map(|(k, b)| block_parameters(b, k))
            .collect()
    }

    fn after_step(&mut self) {
        for b in &mut self.blocks {
            b.membership.clamp_widths();
            b.rules.pin_masked();
        }
        self.touch();
    }
}

/// Backward pass through one block; returns its gradients and the gradient
/// with respect to its input.
pub fn block_backward(
    block: &NfnBlock,
    tape: &BlockTape,
    structure: Option<&StructureSample>,
    upstream: &Array2<f64>,
) -> Result<(BlockGradients, Array2<f64>)> {
    if upstream.dim() != tape.output.dim() {
        return Err(structural(format!(
            "upstream shape {:?} does not match output {:?}",
            upstream.dim(),
            tape.output.dim()
        )));
    }
    let x = tape.input.view();
    let head = block.head.backward(x, tape.firing.view(), &tape.consequents, upstream);
    let d_pre = normalize_firing_backward(&tape.firing, &head.firing, block.inference.normalizer);
    let (d_raw, ln_gain, ln_bias) = match (&block.layer_norm, &tape.layer_norm) {
        (Some(ln), Some(cache)) => {
            let (dw, dg, db) = layer_normalize_backward(cache, ln.gain.view(), &d_pre);
            (dw, Some(dg), Some(db))
        }
        _ => (d_pre, None, None),
    };
    let scale = block.inference.firing_mode.scale(block.input_dim());
    let (dq, d_selection) = preliminary_backward(&tape.q, &tape.selection, scale, &d_raw);

    let layer = &block.membership;
    let (attrs, cap) = (layer.attribute_count(), layer.capacity());
    let mut centers = Array2::zeros((attrs, cap));
    let mut widths = Array2::zeros((attrs, cap));
    let mut d_input = head.input;
    for b in 0..x.nrows() {
        for i in 0..attrs {
            let xi = x[[b, i]];
            for j in 0..layer.term_counts()[i] {
                let g = dq[[b, i, j]];
                if g == 0.0 {
                    continue;
                }
                let (c, s) = (layer.centers()[[i, j]], layer.widths()[[i, j]]);
                let z = xi - c;
                let s2 = s * s;
                centers[[i, j]] -= g * z / s2;
                widths[[i, j]] -= g * z * z / (s2 * s);
                d_input[[b, i]] += g * z / s2;
            }
        }
    }

    let logits = match structure {
        Some(s) => structure_gradient(s, d_selection.view())?,
        None => Array3::zeros(block.rules.logits().dim()),
    };

    Ok((
        BlockGradients {
            centers,
            widths,
            logits,
            weights: head.weights,
            bias: head.bias,
            cf: head.cf,
            ln_gain,
            ln_bias,
        },
        d_input,
    ))
}

/// Backward pass through a stack; `d_output` is `dLoss/dY`.
pub fn backward(network: &Network, tape: &Tape, d_output: &Array2<f64>) -> Result<GradientSet> {
    if tape.generation != network.generation() {
        return Err(NfnError::Usage(format!(
            "tape recorded at generation {} but the network is at {}",
            tape.generation,
            network.generation()
        )));
    }
    if tape.blocks.len() != network.blocks().len() {
        return Err(structural("tape and network disagree on block count"));
    }
    let mut upstream = d_output.clone();
    let mut blocks = Vec::with_capacity(tape.blocks.len());
    for k in (0..tape.blocks.len()).rev() {
        let (g, d_in) = block_backward(&network.blocks()[k], &tape.blocks[k], tape.structures.get(k), &upstream)?;
        blocks.push(g);
        upstream = d_in;
    }
    blocks.reverse();
    Ok(GradientSet {
        blocks,
        input: upstream,
    })
}
