//! Parameterised building blocks bound to a [`ParamStore`] by name.

use rand::Rng as _;

use super::graph::{Activation, Graph, Var};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::Result;
use crate::rng::Rng;

pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Uniform fan-in scaled initialisation: `U(-√(6/fan_in), √(6/fan_in))`.
pub fn kaiming_uniform(rng: &mut Rng, fan_in: usize, shape: &[usize]) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches count")
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, din: usize, dout: usize) -> Self {
        Self { name: name.into(), din, dout }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        store.insert_param(self.weight_name(), kaiming_uniform(rng, self.din, &[self.din, self.dout]));
        store.insert_param(self.bias_name(), Tensor::zeros(&[self.dout]));
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, &self.weight_name())?;
        let b = g.param(store, &self.bias_name())?;
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub name: String,
    pub dim: usize,
}

impl BatchNorm {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        Self { name: name.into(), dim }
    }

    fn key(&self, part: &str) -> String {
        format!("{}.{part}", self.name)
    }

    pub fn init(&self, store: &mut ParamStore) {
        store.insert_param(self.key("gamma"), Tensor::filled(&[self.dim], 1.0));
        store.insert_param(self.key("beta"), Tensor::zeros(&[self.dim]));
        store.insert_buffer(self.key("running_mean"), Tensor::zeros(&[self.dim]));
        store.insert_buffer(self.key("running_var"), Tensor::filled(&[self.dim], 1.0));
    }

    /// Training mode normalises with batch statistics and records the
    /// running-statistics update on the graph; evaluation mode uses the
    /// stored running statistics.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: Mode) -> Result<Var> {
        let gamma = g.param(store, &self.key("gamma"))?;
        let beta = g.param(store, &self.key("beta"))?;
        let rm = store.get(&self.key("running_mean"))?;
        let rv = store.get(&self.key("running_var"))?;
        match mode {
            Mode::Train => {
                let (y, stats) = g.batch_norm(x, gamma, beta, None)?;
                let stats = stats.expect("training mode returns batch statistics");
                let blend = |old: &[f64], new: &[f64]| -> Vec<f64> {
                    old.iter()
                        .zip(new)
                        .map(|(o, n)| (1.0 - BN_MOMENTUM) * o + BN_MOMENTUM * n)
                        .collect()
                };
                let mean = blend(rm.data(), &stats.mean);
                let var = blend(rv.data(), &stats.var_unbiased);
                g.record_buffer_update(self.key("running_mean"), Tensor::new(vec![self.dim], mean)?);
                g.record_buffer_update(self.key("running_var"), Tensor::new(vec![self.dim], var)?);
                Ok(y)
            }
            Mode::Eval => {
                let (y, _) = g.batch_norm(x, gamma, beta, Some((rm.data(), rv.data())))?;
                Ok(y)
            }
        }
    }
}

/// Stack of `Linear → BatchNorm → ReLU` blocks.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<(Linear, BatchNorm)>,
}

impl Mlp {
    pub fn new(name: &str, widths: &[usize]) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                (
                    Linear::new(format!("{name}.{i}.linear"), w[0], w[1]),
                    BatchNorm::new(format!("{name}.{i}.bn"), w[1]),
                )
            })
            .collect();
        Self { layers }
    }

    pub fn out_width(&self) -> Option<usize> {
        self.layers.last().map(|(l, _)| l.dout)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        for (lin, bn) in &self.layers {
            lin.init(store, rng);
            bn.init(store);
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, mut x: Var, mode: Mode) -> Result<Var> {
        for (lin, bn) in &self.layers {
            x = lin.forward(g, store, x)?;
            x = bn.forward(g, store, x, mode)?;
            x = g.activation(x, Activation::Relu);
        }
        Ok(x)
    }
}
