//! Pixel-set encoder: shared per-pixel MLP, mean/std pooling over the pixel
//! set, optional appended thermal position, then a projection MLP.

use super::batch::PixelSetBatch;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Mlp, Mode, ParamStore, Tensor, Var};
use crate::rng::Rng;

#[derive(Clone, Debug)]
pub struct Pse {
    pub channels: usize,
    pub d_model: usize,
    pub concat: bool,
    pub concat_divisor: f64,
    mlp1: Mlp,
    mlp2: Mlp,
    pooled: usize,
}

impl Pse {
    pub fn new(channels: usize, mlp1: &[usize], d_model: usize, concat: bool, concat_divisor: f64) -> Result<Self> {
        if channels == 0 || mlp1.is_empty() || mlp1.contains(&0) || d_model == 0 {
            return Err(Error::Config("pixel-set encoder widths must be positive and non-empty".into()));
        }
        if !(concat_divisor.is_finite() && concat_divisor > 0.0) {
            return Err(Error::Config(format!("concat divisor must be positive, got {concat_divisor}")));
        }
        let mut widths = vec![channels];
        widths.extend_from_slice(mlp1);
        let pooled = 2 * mlp1[mlp1.len() - 1];
        let mlp2_in = pooled + usize::from(concat);
        Ok(Self {
            channels,
            d_model,
            concat,
            concat_divisor,
            mlp1: Mlp::new("pse.mlp1", &widths),
            mlp2: Mlp::new("pse.mlp2", &[mlp2_in, d_model]),
            pooled,
        })
    }

    pub fn mlp2_input_width(&self) -> usize {
        self.pooled + usize::from(self.concat)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        self.mlp1.init(store, rng);
        self.mlp2.init(store, rng);
    }

    /// Embeds every observed step; returns `[(B·T)×D]` with zero rows at
    /// padded steps. Only observed steps enter the batch statistics.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &PixelSetBatch,
        concat_positions: Option<&[f64]>,
        mode: Mode,
    ) -> Result<Var> {
        let (pooled, rows) = self.pooled(g, store, batch, concat_positions, mode)?;
        let e = self.mlp2.forward(g, store, pooled, mode)?;
        g.scatter_rows(e, &rows, batch.batch * batch.steps)
    }

    /// Pooled per-step features `[mean ‖ std (‖ position)]` of the observed
    /// steps, with their flat row indices.
    pub fn pooled(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &PixelSetBatch,
        concat_positions: Option<&[f64]>,
        mode: Mode,
    ) -> Result<(Var, Vec<usize>)> {
        if batch.channels != self.channels {
            return Err(Error::Shape(format!(
                "batch has {} channels, encoder expects {}",
                batch.channels, self.channels
            )));
        }
        let rows = batch.valid_rows();
        let per_step = batch.pixels * batch.channels;
        let mut x = Vec::with_capacity(rows.len() * per_step);
        for &r in &rows {
            x.extend_from_slice(&batch.values[r * per_step..(r + 1) * per_step]);
        }
        let x = g.constant(Tensor::new(vec![rows.len() * batch.pixels, batch.channels], x)?);
        let h = self.mlp1.forward(g, store, x, mode)?;
        let mut pooled = g.pool_mean_std(h, batch.pixels)?;
        if self.concat {
            let pos = concat_positions.ok_or_else(|| {
                Error::InvalidInput("thermal concatenation needs per-step positions".into())
            })?;
            if pos.len() != batch.batch * batch.steps {
                return Err(Error::Shape(format!(
                    "{} concat positions for a {}×{} batch",
                    pos.len(),
                    batch.batch,
                    batch.steps
                )));
            }
            let col: Vec<f64> = rows.iter().map(|&r| pos[r] / self.concat_divisor).collect();
            let col = g.constant(Tensor::new(vec![rows.len(), 1], col)?);
            pooled = g.concat_cols(&[pooled, col])?;
        }
        Ok((pooled, rows))
    }
}
