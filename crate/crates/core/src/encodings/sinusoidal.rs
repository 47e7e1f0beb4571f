use super::PositionSequence;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Fixed sinusoidal encoding width and wavelength base.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SinusoidalConfig {
    pub dim: usize,
    pub tau: f64,
}

impl SinusoidalConfig {
    pub fn new(dim: usize, tau: f64) -> Result<Self> {
        let cfg = Self { dim, tau };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.dim % 2 != 0 {
            return Err(Error::Config(format!(
                "sinusoidal dimension must be a positive even number, got {}",
                self.dim
            )));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }

    /// `ω_i = (1/τ)^(2i/D)` for `i = 1..=D/2`.
    pub fn frequencies(&self) -> Vec<f64> {
        frequency_ladder(self.dim, self.tau)
    }
}

pub fn frequency_ladder(dim: usize, tau: f64) -> Vec<f64> {
    (1..=dim / 2)
        .map(|i| (1.0 / tau).powf(2.0 * i as f64 / dim as f64))
        .collect()
}

/// Encodes raw position values as rows `[sin ω_1 t, cos ω_1 t, sin ω_2 t, …]`.
pub fn encode_values(values: &[f64], cfg: &SinusoidalConfig) -> Result<Tensor> {
    cfg.validate()?;
    if values.is_empty() {
        return Err(Error::InvalidInput("no positions to encode".into()));
    }
    let freqs = cfg.frequencies();
    let mut out = Vec::with_capacity(values.len() * cfg.dim);
    for &t in values {
        for &w in &freqs {
            let (s, c) = (w * t).sin_cos();
            out.push(s);
            out.push(c);
        }
    }
    Tensor::new(vec![values.len(), cfg.dim], out)
}

pub fn sinusoidal_encode(positions: &PositionSequence, cfg: &SinusoidalConfig) -> Result<Tensor> {
    encode_values(positions.values(), cfg)
}
