use std::f64::consts::PI;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::thermal::{TemperatureSeries, DAYS_PER_YEAR};

/// Half the daily temperature range; `tmin`/`tmax` sit this far either side
/// of the daily mean.
pub const DIURNAL_HALF_RANGE_C: f64 = 5.0;

/// Annual cosine temperature cycle with its minimum at `phase_day`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClimateModel {
    pub mean_c: f64,
    pub amplitude_c: f64,
    pub phase_day: f64,
    #[serde(default)]
    pub noise_c: f64,
}

impl ClimateModel {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.mean_c, self.amplitude_c, self.phase_day, self.noise_c]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.amplitude_c < 0.0 || self.noise_c < 0.0 {
            return Err(Error::Config(format!("invalid climate {self:?}")));
        }
        Ok(())
    }

    /// Noise-free daily mean on 1-based `day`. The phase offset is reduced
    /// modulo the year first, so climates whose phases differ by a whole
    /// number of days give exactly circularly shifted series.
    pub fn mean_on(&self, day: usize) -> f64 {
        let k = (day as f64 - self.phase_day).rem_euclid(DAYS_PER_YEAR as f64);
        self.mean_c - self.amplitude_c * (2.0 * PI * k / DAYS_PER_YEAR as f64).cos()
    }

    /// Same climate with its phase moved `delta` days later.
    pub fn delayed(&self, delta: f64) -> Self {
        Self { phase_day: self.phase_day + delta, ..self.clone() }
    }
}

pub fn gen_region_temperature(region_id: &str, climate: &ClimateModel, rng: &mut Rng) -> Result<TemperatureSeries> {
    climate.validate()?;
    let noise = Normal::new(0.0, climate.noise_c).map_err(|e| Error::Config(e.to_string()))?;
    let mut tmin = Vec::with_capacity(DAYS_PER_YEAR);
    let mut tmax = Vec::with_capacity(DAYS_PER_YEAR);
    for day in 1..=DAYS_PER_YEAR {
        let eps = if climate.noise_c > 0.0 { noise.sample(rng) } else { 0.0 };
        let avg = climate.mean_on(day) + eps;
        tmin.push(avg - DIURNAL_HALF_RANGE_C);
        tmax.push(avg + DIURNAL_HALF_RANGE_C);
    }
    TemperatureSeries::new(region_id, tmin, tmax)
}
