//! Learnable Fourier-feature encoder: random-feature map with trainable
//! frequencies, one GeLU hidden layer and a bias-free projection.

use super::sinusoidal::frequency_ladder;
use super::PositionSequence;
use crate::error::{Error, Result};
use crate::numerics::{kaiming_uniform, Activation, Graph, Linear, ParamStore, Tensor, Var};
use crate::rng::Rng;

#[derive(Clone, Debug)]
pub struct FourierEncoder {
    pub prefix: String,
    pub dim: usize,
}

impl FourierEncoder {
    pub fn new(prefix: impl Into<String>, dim: usize) -> Result<Self> {
        if dim == 0 || dim % 2 != 0 {
            return Err(Error::Config(format!("fourier encoder width must be even, got {dim}")));
        }
        Ok(Self { prefix: prefix.into(), dim })
    }

    pub fn freq_name(&self) -> String {
        format!("{}.freq", self.prefix)
    }

    pub fn proj_name(&self) -> String {
        format!("{}.proj", self.prefix)
    }

    pub fn hidden(&self) -> Linear {
        Linear::new(format!("{}.hidden", self.prefix), self.dim, self.dim)
    }

    /// Frequencies start on the sinusoidal ladder for `tau`.
    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng, tau: f64) {
        let ladder = frequency_ladder(self.dim, tau);
        store.insert_param(
            self.freq_name(),
            Tensor::new(vec![1, self.dim / 2], ladder).expect("ladder width"),
        );
        self.hidden().init(store, rng);
        store.insert_param(self.proj_name(), kaiming_uniform(rng, self.dim, &[self.dim, self.dim]));
    }

    /// Encodes `positions.len()` scalars into an `[N×D]` node.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, positions: &[f64]) -> Result<Var> {
        let freq = g.param(store, &self.freq_name())?;
        if g.value(freq).shape() != [1, self.dim / 2] {
            return Err(Error::Shape(format!(
                "fourier frequencies have shape {:?}, expected [1, {}]",
                g.value(freq).shape(),
                self.dim / 2
            )));
        }
        let pos = g.constant(Tensor::new(vec![positions.len(), 1], positions.to_vec())?);
        let r = fourier_features(g, pos, freq)?;
        let h = self.hidden().forward(g, store, r)?;
        let h = g.activation(h, Activation::Gelu);
        let proj = g.param(store, &self.proj_name())?;
        g.matmul(h, proj)
    }

    pub fn encode(&self, store: &ParamStore, positions: &PositionSequence) -> Result<Tensor> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, store, positions.values())?;
        Ok(g.value(out).clone())
    }
}

/// `r(t) = (1/√D)[cos(t·W_r) ‖ sin(t·W_r)]` for positions `[N×1]` and
/// frequencies `[1×D/2]`.
pub fn fourier_features(g: &mut Graph, positions: Var, freq: Var) -> Result<Var> {
    let wt = g.matmul(positions, freq)?;
    let d = 2 * g.value(freq).len();
    let c = g.cos(wt);
    let s = g.sin(wt);
    let r = g.concat_cols(&[c, s])?;
    Ok(g.affine(r, 1.0 / (d as f64).sqrt(), 0.0))
}
