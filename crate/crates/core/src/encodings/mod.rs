//! Positional encodings over calendar days or cumulative growing degree days.

pub mod fourier;
pub mod recurrent;
pub mod sinusoidal;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::thermal::{ThermalTimeline, DAYS_PER_YEAR};

pub use fourier::{fourier_features, FourierEncoder};
pub use recurrent::RecurrentEncoder;
pub use sinusoidal::{encode_values, frequency_ladder, sinusoidal_encode, SinusoidalConfig};

pub const DEFAULT_MAX_SHIFT_DAYS: u32 = 60;
pub const CALENDAR_TAU: f64 = 1000.0;
pub const THERMAL_TAU: f64 = 10_000.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositionKind {
    Calendar,
    Thermal,
}

impl PositionKind {
    pub fn default_tau(self) -> f64 {
        match self {
            PositionKind::Calendar => CALENDAR_TAU,
            PositionKind::Thermal => THERMAL_TAU,
        }
    }
}

/// Non-decreasing positions of one time series.
///
/// Calendar values lie in `[1 − s, 365 + s]` where `s` is the largest shift
/// applied so far (0 for unshifted sequences). Thermal values are `≥ 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionSequence {
    values: Vec<f64>,
    kind: PositionKind,
    slack: u32,
}

impl PositionSequence {
    pub fn new(values: Vec<f64>, kind: PositionKind) -> Result<Self> {
        Self::with_slack(values, kind, 0)
    }

    fn with_slack(values: Vec<f64>, kind: PositionKind, slack: u32) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("empty position sequence".into()));
        }
        for (i, &v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::InvalidInput(format!("position {i} is not finite")));
            }
            let ok = match kind {
                PositionKind::Calendar => {
                    v >= 1.0 - slack as f64 && v <= (DAYS_PER_YEAR + slack as usize) as f64
                }
                PositionKind::Thermal => v >= 0.0,
            };
            if !ok {
                return Err(Error::InvalidInput(format!("{kind:?} position {v} at index {i} out of range")));
            }
            if i > 0 && v < values[i - 1] {
                return Err(Error::InvalidInput(format!("positions decrease at index {i}")));
            }
        }
        Ok(Self { values, kind, slack })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn kind(&self) -> PositionKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Adds `delta` days to every calendar position.
    pub fn shifted(&self, delta: i64) -> Result<Self> {
        if self.kind != PositionKind::Calendar {
            return Err(Error::InvalidInput("shift augmentation applies to calendar positions only".into()));
        }
        let slack = self.slack.max(delta.unsigned_abs() as u32);
        let values = self.values.iter().map(|v| v + delta as f64).collect();
        Self::with_slack(values, PositionKind::Calendar, slack)
    }
}

/// Uniform integer in `[−max_shift, max_shift]`.
pub fn draw_shift(rng: &mut Rng, max_shift: u32) -> i64 {
    let m = max_shift as i64;
    rng.random_range(-m..=m)
}

pub fn shift_aug(positions: &PositionSequence, rng: &mut Rng, max_shift: u32) -> Result<PositionSequence> {
    if positions.kind() != PositionKind::Calendar {
        return Err(Error::InvalidInput("shift augmentation applies to calendar positions only".into()));
    }
    positions.shifted(draw_shift(rng, max_shift))
}

pub fn make_positions(
    days: &[u32],
    timeline: Option<&ThermalTimeline>,
    kind: PositionKind,
) -> Result<PositionSequence> {
    let values = match kind {
        PositionKind::Calendar => days.iter().map(|&d| d as f64).collect(),
        PositionKind::Thermal => {
            let tl = timeline.ok_or_else(|| {
                Error::InvalidInput("thermal positions need a thermal timeline".into())
            })?;
            tl.at_days(days)?
        }
    };
    PositionSequence::new(values, kind)
}
