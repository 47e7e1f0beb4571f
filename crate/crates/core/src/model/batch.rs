use crate::error::{Error, Result};

/// One parcel time series ready for batching: `pixels` holds
/// `positions.len() × S × C` reflectances, row-major.
#[derive(Clone, Copy, Debug)]
pub struct SequenceInput<'a> {
    pub pixels: &'a [f64],
    pub positions: &'a [f64],
}

/// Padded batch of pixel-set time series.
///
/// Sequences shorter than `steps` are padded at the end with zero pixels,
/// their last valid position, and `mask = false`.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelSetBatch {
    pub batch: usize,
    pub steps: usize,
    pub pixels: usize,
    pub channels: usize,
    /// `B×T×S×C`.
    pub values: Vec<f64>,
    /// `B×T`.
    pub positions: Vec<f64>,
    /// `B×T`, true for observed steps.
    pub mask: Vec<bool>,
}

impl PixelSetBatch {
    pub fn new(samples: &[SequenceInput<'_>], pixels: usize, channels: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        if pixels == 0 || channels == 0 {
            return Err(Error::InvalidInput("pixel and channel counts must be positive".into()));
        }
        let steps = samples.iter().map(|s| s.positions.len()).max().unwrap_or(0);
        let per_step = pixels * channels;
        let b = samples.len();
        let mut values = vec![0.0; b * steps * per_step];
        let mut positions = vec![0.0; b * steps];
        let mut mask = vec![false; b * steps];
        for (i, s) in samples.iter().enumerate() {
            let t = s.positions.len();
            if t == 0 {
                return Err(Error::InvalidInput(format!("sample {i} has no observations")));
            }
            if s.pixels.len() != t * per_step {
                return Err(Error::Shape(format!(
                    "sample {i}: {} pixel values for {t} steps of {pixels}×{channels}",
                    s.pixels.len()
                )));
            }
            if let Some(v) = s.pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::InvalidInput(format!("sample {i}: reflectance {v} outside [0, 1]")));
            }
            if s.positions.iter().any(|p| !p.is_finite()) {
                return Err(Error::InvalidInput(format!("sample {i}: non-finite position")));
            }
            let base = i * steps;
            values[base * per_step..(base + t) * per_step].copy_from_slice(s.pixels);
            positions[base..base + t].copy_from_slice(s.positions);
            let last = s.positions[t - 1];
            positions[base + t..base + steps].fill(last);
            mask[base..base + t].fill(true);
        }
        Ok(Self { batch: b, steps, pixels, channels, values, positions, mask })
    }

    /// Flat `b·T + t` indices of observed steps in ascending order.
    pub fn valid_rows(&self) -> Vec<usize> {
        self.mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
    }
}
