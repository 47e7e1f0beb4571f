//! Temporal attention with one learned query per head over disjoint channel
//! groups.

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Linear, Mlp, Mode, ParamStore, Tensor, Var};
use crate::rng::Rng;

#[derive(Clone, Debug)]
pub struct Ltae {
    pub d_model: usize,
    pub heads: usize,
    pub d_k: usize,
    keys: Vec<Linear>,
    post: Mlp,
}

impl Ltae {
    pub fn new(d_model: usize, heads: usize, d_k: usize) -> Result<Self> {
        if heads == 0 || d_k == 0 || d_model == 0 || d_model % heads != 0 {
            return Err(Error::Config(format!(
                "model width {d_model} must be a positive multiple of the head count {heads}"
            )));
        }
        let group = d_model / heads;
        let keys = (0..heads).map(|h| Linear::new(format!("ltae.head{h}.key"), group, d_k)).collect();
        Ok(Self { d_model, heads, d_k, keys, post: Mlp::new("ltae.out", &[d_model, d_model]) })
    }

    pub fn query_name(h: usize) -> String {
        format!("ltae.head{h}.query")
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        let normal = Normal::new(0.0, (1.0 / self.d_k as f64).sqrt()).expect("positive std");
        for (h, key) in self.keys.iter().enumerate() {
            key.init(store, rng);
            let q = (0..self.d_k).map(|_| normal.sample(rng)).collect();
            store.insert_param(Self::query_name(h), Tensor::new(vec![self.d_k, 1], q).expect("query shape"));
        }
        self.post.init(store, rng);
    }

    /// Attention weights `[B×T]` per head and the pooled output `[B×D]`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_with_weights(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        embeddings: Var,
        pe: Option<Var>,
        mask: &[bool],
        batch: usize,
        steps: usize,
        mode: Mode,
    ) -> Result<(Var, Vec<Var>)> {
        if g.value(embeddings).shape() != [batch * steps, self.d_model] {
            return Err(Error::Shape(format!(
                "embeddings of shape {:?} for a {batch}×{steps} batch of width {}",
                g.value(embeddings).shape(),
                self.d_model
            )));
        }
        if mask.len() != batch * steps {
            return Err(Error::Shape(format!("mask of length {} for {batch}×{steps}", mask.len())));
        }
        let x = match pe {
            Some(p) => g.add(embeddings, p)?,
            None => embeddings,
        };
        let group = self.d_model / self.heads;
        let scale = 1.0 / (self.d_k as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for (h, key) in self.keys.iter().enumerate() {
            let values = g.slice_cols(x, h * group, group)?;
            let k = key.forward(g, store, values)?;
            let q = g.param(store, &Self::query_name(h))?;
            let scores = g.matmul(k, q)?;
            let scores = g.affine(scores, scale, 0.0);
            let scores = g.reshape(scores, &[batch, steps])?;
            let w = g.masked_softmax(scores, mask)?;
            outs.push(g.attn_pool(w, values)?);
            weights.push(w);
        }
        let joined = g.concat_cols(&outs)?;
        Ok((self.post.forward(g, store, joined, mode)?, weights))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        embeddings: Var,
        pe: Option<Var>,
        mask: &[bool],
        batch: usize,
        steps: usize,
        mode: Mode,
    ) -> Result<Var> {
        Ok(self.forward_with_weights(g, store, embeddings, pe, mask, batch, steps, mode)?.0)
    }
}
