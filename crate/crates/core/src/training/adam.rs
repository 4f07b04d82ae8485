use ndarray::{ArrayD, ArrayViewMutD, Dimension, IxDyn, Slice};
use serde::{Deserialize, Serialize};

use crate::error::{NfnError, Result};

/// Named gradient tensors, in the same order as
/// [`Parameterized::parameters_mut`].
pub type NamedGradients = Vec<(String, ArrayD<f64>)>;

/// Anything whose parameters an optimizer can update in place.
pub trait Parameterized {
    /// Every trainable tensor with a stable dotted name.
    fn parameters_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)>;

    /// Re-establishes invariants after an update (clamps, masks).
    fn after_step(&mut self) {}
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Moments {
    name: String,
    first: ArrayD<f64>,
    second: ArrayD<f64>,
}

impl Moments {
    fn zeros(name: &str, shape: &[usize]) -> Self {
        Self {
            name: name.to_owned(),
            first: ArrayD::zeros(IxDyn(shape)),
            second: ArrayD::zeros(IxDyn(shape)),
        }
    }

    /// Pads both moments with zeros when a parameter grew along trailing
    /// positions of its axes.
    fn fit(&mut self, shape: &[usize]) {
        if self.first.shape() == shape {
            return;
        }
        let old = self.first.shape().to_vec();
        let mut first = ArrayD::zeros(IxDyn(shape));
        let mut second = ArrayD::zeros(IxDyn(shape));
        if old.len() == shape.len() {
            let overlap: Vec<usize> = old.iter().zip(shape).map(|(a, b)| (*a).min(*b)).collect();
            let cut = |ax: ndarray::AxisDescription| Slice::from(0..overlap[ax.axis.index()]);
            first.slice_each_axis_mut(cut).assign(&self.first.slice_each_axis(cut));
            second
                .slice_each_axis_mut(cut)
                .assign(&self.second.slice_each_axis(cut));
        }
        self.first = first;
        self.second = second;
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    moments: Vec<Moments>,
}

fn first_non_finite(name: &str, g: &ArrayD<f64>) -> Option<NfnError> {
    g.indexed_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(idx, v)| NfnError::Training {
            path: format!("{name}{:?}", idx.slice()),
            message: format!("non-finite gradient {v}"),
        })
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// First-moment estimate for a parameter, if it has been seen.
    pub fn first_moment(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.moments.iter().find(|m| m.name == name).map(|m| &m.first)
    }

    pub fn step<M: Parameterized + ?Sized>(&mut self, model: &mut M, grads: &[(String, ArrayD<f64>)]) -> Result<()> {
        for (name, g) in grads {
            if let Some(err) = first_non_finite(name, g) {
                return Err(err);
            }
        }
        {
            let params = model.parameters_mut();
            if params.len() != grads.len() {
                return Err(NfnError::Structural(format!(
                    "{} parameters but {} gradients",
                    params.len(),
                    grads.len()
                )));
            }
            for ((pname, p), (gname, g)) in params.iter().zip(grads) {
                if pname != gname || p.shape() != g.shape() {
                    return Err(NfnError::Structural(format!(
                        "gradient `{gname}` {:?} does not match parameter `{pname}` {:?}",
                        g.shape(),
                        p.shape()
                    )));
                }
            }
            self.step += 1;
            let AdamConfig {
                learning_rate,
                beta1,
                beta2,
                epsilon,
            } = self.config;
            let t = self.step as i32;
            let correct1 = 1.0 - beta1.powi(t);
            let correct2 = 1.0 - beta2.powi(t);
            for (k, ((name, mut p), (_, g))) in params.into_iter().zip(grads).enumerate() {
                if k >= self.moments.len() {
                    self.moments.push(Moments::zeros(&name, p.shape()));
                } else if self.moments[k].name != name {
                    self.moments[k] = Moments::zeros(&name, p.shape());
                }
                let mom = &mut self.moments[k];
                mom.fit(p.shape());
                ndarray::Zip::from(&mut p)
                    .and(g)
                    .and(&mut mom.first)
                    .and(&mut mom.second)
                    .for_each(|p, &g, m, v| {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        let m_hat = *m / correct1;
                        let v_hat = *v / correct2;
                        *p -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
                    });
            }
            self.moments.truncate(grads.len());
        }
        model.after_step();
        Ok(())
    }
}
