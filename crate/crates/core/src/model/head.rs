use crate::error::{Error, Result};
use crate::numerics::{Graph, Linear, ParamStore, Var};
use crate::rng::Rng;

/// Classifier MLP: linear layers with ReLU between them, raw logits out.
#[derive(Clone, Debug)]
pub struct Head {
    layers: Vec<Linear>,
}

impl Head {
    /// `hidden` lists the widths between the input and the `classes` output.
    pub fn new(d_in: usize, hidden: &[usize], classes: usize) -> Result<Self> {
        if classes < 2 || d_in == 0 || hidden.contains(&0) {
            return Err(Error::Config("classifier widths must be positive with at least 2 classes".into()));
        }
        let mut widths = vec![d_in];
        widths.extend_from_slice(hidden);
        widths.push(classes);
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(format!("head.{i}"), w[0], w[1]))
            .collect();
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        for l in &self.layers {
            l.init(store, rng);
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, features: Var) -> Result<Var> {
        let din = self.layers[0].din;
        if g.value(features).shape().get(1) != Some(&din) {
            return Err(Error::Shape(format!(
                "classifier expects width {din}, got shape {:?}",
                g.value(features).shape()
            )));
        }
        let mut x = features;
        for (i, l) in self.layers.iter().enumerate() {
            if i > 0 {
                x = g.relu(x);
            }
            x = l.forward(g, store, x)?;
        }
        Ok(x)
    }
}
