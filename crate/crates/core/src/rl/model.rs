//! Function approximators usable as dueling heads.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use ndarray::{Array1, Array2, ArrayView2, ArrayViewMutD, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, structural, Result};
use crate::inference::{firing::row_major, Network, Tape};
use crate::neurogenesis::NeurogenesisRecord;
use crate::training::{Adam, NamedGradients, NfnModel, Parameterized};

/// A trainable map from observation batches to output batches.
pub trait Approximator: Clone {
    type Tape;

    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;

    /// Evaluation-mode output; mutates nothing.
    fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>>;

    /// Draws this training step's randomness (rule structures).
    fn begin_step(&mut self, rng: &mut ChaCha8Rng) -> Result<()>;

    fn forward_train(&self, x: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Self::Tape)>;
    fn gradients(&self, tape: &Self::Tape, d_output: &Array2<f64>) -> Result<NamedGradients>;
    fn apply(&mut self, optimizer: &mut Adam, grads: &NamedGradients) -> Result<()>;

    /// Structural adaptation after an update (neurogenesis).
    fn after_update(&mut self, tape: &Self::Tape, step: u64) -> Result<Vec<NeurogenesisRecord>>;

    /// Hash of every parameter's bit pattern.
    fn fingerprint(&self) -> u64;
}

fn hash_values<'a>(h: &mut DefaultHasher, values: impl IntoIterator<Item = &'a f64>) {
    for v in values {
        v.to_bits().hash(h);
    }
}

pub fn network_fingerprint(net: &Network) -> u64 {
    let mut h = DefaultHasher::new();
    for b in net.blocks() {
        b.membership().term_counts().hash(&mut h);
        hash_values(&mut h, b.membership().centers());
        hash_values(&mut h, b.membership().widths());
        hash_values(&mut h, b.rules().logits());
        hash_values(&mut h, b.head().weights());
        hash_values(&mut h, b.head().bias());
        if let Some(cf) = b.head().certainty_factors() {
            hash_values(&mut h, cf);
        }
        if let Some(ln) = b.layer_norm() {
            hash_values(&mut h, &ln.gain);
            hash_values(&mut h, &ln.bias);
        }
    }
    h.finish()
}

impl Approximator for NfnModel {
    type Tape = Tape;

    fn input_dim(&self) -> usize {
        self.network().input_dim()
    }

    fn output_dim(&self) -> usize {
        self.network().output_dim()
    }

    fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.forward_eval(x)
    }

    fn begin_step(&mut self, rng: &mut ChaCha8Rng) -> Result<()> {
        NfnModel::begin_step(self, rng).map(|_| ())
    }

    fn forward_train(&self, x: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Tape)> {
        NfnModel::forward_train(self, x)
    }

    fn gradients(&self, tape: &Tape, d_output: &Array2<f64>) -> Result<NamedGradients> {
        Ok(self.backward(tape, d_output)?.named())
    }

    fn apply(&mut self, optimizer: &mut Adam, grads: &NamedGradients) -> Result<()> {
        optimizer.step(self.network_mut(), grads)
    }

    fn after_update(&mut self, tape: &Tape, step: u64) -> Result<Vec<NeurogenesisRecord>> {
        Ok(self.grow(tape, step)?.events)
    }

    fn fingerprint(&self) -> u64 {
        network_fingerprint(self.network())
    }
}

/// Hidden-unit nonlinearities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Sigmoid,
    Tanh,
    Relu,
    Relu6,
    LeakyRelu,
    Elu,
    Celu,
    Selu,
    Gelu,
    Silu,
    Mish,
    Softplus,
    Softsign,
    LogSigmoid,
    Tanhshrink,
    Softshrink,
    Hardshrink,
    Hardtanh,
    Hardsigmoid,
    Hardswish,
}

const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
const SELU_ALPHA: f64 = 1.673_263_242_354_377_2;
const LEAKY_SLOPE: f64 = 0.01;
const SHRINK_LAMBDA: f64 = 0.5;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Activation {
    pub const ALL: [Activation; 21] = [
        Self::Identity,
        Self::Sigmoid,
        Self::Tanh,
        Self::Relu,
        Self::Relu6,
        Self::LeakyRelu,
        Self::Elu,
        Self::Celu,
        Self::Selu,
        Self::Gelu,
        Self::Silu,
        Self::Mish,
        Self::Softplus,
        Self::Softsign,
        Self::LogSigmoid,
        Self::Tanhshrink,
        Self::Softshrink,
        Self::Hardshrink,
        Self::Hardtanh,
        Self::Hardsigmoid,
        Self::Hardswish,
    ];

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Self::Identity => x,
            Self::Sigmoid => sigmoid(x),
            Self::Tanh => x.tanh(),
            Self::Relu => x.max(0.0),
            Self::Relu6 => x.clamp(0.0, 6.0),
            Self::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
            Self::Elu | Self::Celu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Self::Selu => SELU_LAMBDA * if x > 0.0 { x } else { SELU_ALPHA * x.exp_m1() },
            Self::Gelu => 0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)),
            Self::Silu => x * sigmoid(x),
            Self::Mish => x * softplus(x).tanh(),
            Self::Softplus => softplus(x),
            Self::Softsign => x / (1.0 + x.abs()),
            Self::LogSigmoid => -softplus(-x),
            Self::Tanhshrink => x - x.tanh(),
            Self::Softshrink => {
                if x > SHRINK_LAMBDA {
                    x - SHRINK_LAMBDA
                } else if x < -SHRINK_LAMBDA {
                    x + SHRINK_LAMBDA
                } else {
                    0.0
                }
            }
            Self::Hardshrink => {
                if x.abs() > SHRINK_LAMBDA {
                    x
                } else {
                    0.0
                }
            }
            Self::Hardtanh => x.clamp(-1.0, 1.0),
            Self::Hardsigmoid => (x / 6.0 + 0.5).clamp(0.0, 1.0),
            Self::Hardswish => x * (x / 6.0 + 0.5).clamp(0.0, 1.0),
        }
    }

    /// Derivative at `x`; one-sided at kinks.
    pub fn derivative(self, x: f64) -> f64 {
        let step = |c: bool| if c { 1.0 } else { 0.0 };
        match self {
            Self::Identity => 1.0,
            Self::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            Self::Tanh => 1.0 - x.tanh().powi(2),
            Self::Relu => step(x > 0.0),
            Self::Relu6 => step(x > 0.0 && x < 6.0),
            Self::LeakyRelu => {
                if x > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            Self::Elu | Self::Celu => {
                if x > 0.0 {
                    1.0
                } else {
                    x.exp()
                }
            }
            Self::Selu => SELU_LAMBDA * if x > 0.0 { 1.0 } else { SELU_ALPHA * x.exp() },
            Self::Gelu => {
                let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
                let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
                cdf + x * pdf
            }
            Self::Silu => {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            }
            Self::Mish => {
                let t = softplus(x).tanh();
                t + x * (1.0 - t * t) * sigmoid(x)
            }
            Self::Softplus => sigmoid(x),
            Self::Softsign => 1.0 / (1.0 + x.abs()).powi(2),
            Self::LogSigmoid => sigmoid(-x),
            Self::Tanhshrink => x.tanh().powi(2),
            Self::Softshrink | Self::Hardshrink => step(x.abs() > SHRINK_LAMBDA),
            Self::Hardtanh => step(x > -1.0 && x < 1.0),
            Self::Hardsigmoid => step(x > -3.0 && x < 3.0) / 6.0,
            Self::Hardswish => {
                if x <= -3.0 {
                    0.0
                } else if x >= 3.0 {
                    1.0
                } else {
                    (2.0 * x + 3.0) / 6.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    /// Hidden layer widths; empty gives a linear model.
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128],
            activation: Activation::Relu,
        }
    }
}

/// Fully connected network: hidden layers with a shared activation and a
/// linear output layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
    activation: Activation,
}

/// Layer inputs and pre-activations of one forward pass.
#[derive(Debug, Clone)]
pub struct MlpTape {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

impl Mlp {
    pub fn new(inputs: usize, outputs: usize, cfg: &MlpConfig, rng: &mut impl Rng) -> Result<Self> {
        if inputs == 0 || outputs == 0 || cfg.hidden.contains(&0) {
            return Err(config("layer widths must be positive"));
        }
        let mut dims = vec![inputs];
        dims.extend(&cfg.hidden);
        dims.push(outputs);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in dims.windows(2) {
            let bound = 1.0 / (pair[0] as f64).sqrt();
            weights.push(Array2::from_shape_fn((pair[1], pair[0]), |_| {
                rng.gen_range(-bound..bound)
            }));
            biases.push(Array1::from_shape_fn(pair[1], |_| rng.gen_range(-bound..bound)));
        }
        Ok(Self {
            weights,
            biases,
            activation: cfg.activation,
        })
    }

    pub fn layers(&self) -> usize {
        self.weights.len()
    }

    fn run(&self, x: ArrayView2<'_, f64>) -> Result<(Array2<f64>, MlpTape)> {
        if x.ncols() != self.input_dim() {
            return Err(structural(format!(
                "mlp expects {} inputs, got {}",
                self.input_dim(),
                x.ncols()
            )));
        }
        let mut h = x.to_owned();
        let mut tape = MlpTape {
            inputs: Vec::new(),
            pre: Vec::new(),
        };
        let last = self.layers() - 1;
        for (k, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let z = row_major(h.dot(&w.t())) + b;
            let next = if k == last {
                z.clone()
            } else {
                z.mapv(|v| self.activation.apply(v))
            };
            tape.inputs.push(h);
            tape.pre.push(z);
            h = next;
        }
        Ok((h, tape))
    }

    pub fn backward(&self, tape: &MlpTape, d_output: &Array2<f64>) -> Result<NamedGradients> {
        let mut grads = vec![None; self.layers()];
        let mut delta = d_output.clone();
        for k in (0..self.layers()).rev() {
            if k != self.layers() - 1 {
                let act = self.activation;
                delta.zip_mut_with(&tape.pre[k], |d, &z| *d *= act.derivative(z));
            }
            let dw = delta.t().dot(&tape.inputs[k]);
            let db = delta.sum_axis(Axis(0));
            let next = delta.dot(&self.weights[k]);
            grads[k] = Some((dw, db));
            delta = next;
        }
        let mut out = Vec::new();
        for (k, g) in grads.into_iter().enumerate() {
            let (dw, db) = g.expect("filled");
            out.push((format!("layer{k}.weight"), dw.into_dyn()));
            out.push((format!("layer{k}.bias"), db.into_dyn()));
        }
        Ok(out)
    }
}

impl Parameterized for Mlp {
    fn parameters_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out = Vec::new();
        for (k, (w, b)) in self.weights.iter_mut().zip(self.biases.iter_mut()).enumerate() {
            out.push((format!("layer{k}.weight"), w.view_mut().into_dyn()));
            out.push((format!("layer{k}.bias"), b.view_mut().into_dyn()));
        }
        out
    }
}

impl Approximator for Mlp {
    type Tape = MlpTape;

    fn input_dim(&self) -> usize {
        self.weights[0].ncols()
    }

    fn output_dim(&self) -> usize {
        self.weights.last().expect("at least one layer").nrows()
    }

    fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Ok(self.run(x)?.0)
    }

    fn begin_step(&mut self, _: &mut ChaCha8Rng) -> Result<()> {
        Ok(())
    }

    fn forward_train(&self, x: ArrayView2<'_, f64>) -> Result<(Array2<f64>, MlpTape)> {
        self.run(x)
    }

    fn gradients(&self, tape: &MlpTape, d_output: &Array2<f64>) -> Result<NamedGradients> {
        self.backward(tape, d_output)
    }

    fn apply(&mut self, optimizer: &mut Adam, grads: &NamedGradients) -> Result<()> {
        optimizer.step(self, grads)
    }

    fn after_update(&mut self, _: &MlpTape, _: u64) -> Result<Vec<NeurogenesisRecord>> {
        Ok(Vec::new())
    }

    fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            w.shape().hash(&mut h);
            hash_values(&mut h, w);
            hash_values(&mut h, b);
        }
        h.finish()
    }
}
