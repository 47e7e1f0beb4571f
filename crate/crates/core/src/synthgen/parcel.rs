//! Double-logistic crop phenology evaluated in thermal time.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::sigmoid;
use crate::rng::Rng;
use crate::thermal::{ThermalTimeline, DAYS_PER_YEAR};

pub const MIN_OBSERVATIONS: usize = 4;
/// Largest raw reflectance code; stored reflectances are multiples of its inverse.
pub const RAW_MAX: f64 = 65535.0;

/// One growth pulse: `v(g) = σ((g − g_sos)/r1) − σ((g − g_eos)/r2)` scaled
/// per channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pulse {
    pub amplitude: Vec<f64>,
    pub g_sos: f64,
    pub g_eos: f64,
    pub r1: f64,
    pub r2: f64,
}

impl Pulse {
    pub fn growth(&self, g: f64) -> f64 {
        sigmoid((g - self.g_sos) / self.r1) - sigmoid((g - self.g_eos) / self.r2)
    }

    fn validate(&self, channels: usize, class: usize) -> Result<()> {
        if self.amplitude.len() != channels {
            return Err(Error::Config(format!(
                "class {class}: pulse has {} amplitudes for {channels} channels",
                self.amplitude.len()
            )));
        }
        if !(0.0 <= self.g_sos && self.g_sos < self.g_eos) || !(self.r1 > 0.0 && self.r2 > 0.0) {
            return Err(Error::Config(format!(
                "class {class}: need 0 ≤ g_sos < g_eos and positive slopes"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropPrototype {
    pub class_id: usize,
    pub name: String,
    pub base: Vec<f64>,
    pub amplitude: Vec<f64>,
    pub g_sos: f64,
    pub g_eos: f64,
    pub r1: f64,
    pub r2: f64,
    pub pixel_noise: f64,
    /// Further pulses with their own spectral signature.
    #[serde(default)]
    pub extra_pulses: Vec<Pulse>,
    /// Standard deviation of a per-parcel phenology offset (°C·day).
    #[serde(default)]
    pub gdd_jitter: f64,
    /// Standard deviation of a per-parcel, per-channel reflectance offset.
    #[serde(default)]
    pub parcel_noise: f64,
}

impl CropPrototype {
    pub fn main_pulse(&self) -> Pulse {
        Pulse {
            amplitude: self.amplitude.clone(),
            g_sos: self.g_sos,
            g_eos: self.g_eos,
            r1: self.r1,
            r2: self.r2,
        }
    }

    pub fn pulses(&self) -> Vec<Pulse> {
        let mut p = vec![self.main_pulse()];
        p.extend(self.extra_pulses.iter().cloned());
        p
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.base.len() != channels {
            return Err(Error::Config(format!(
                "class {}: {} base values for {channels} channels",
                self.class_id,
                self.base.len()
            )));
        }
        for p in self.pulses() {
            p.validate(channels, self.class_id)?;
        }
        if [self.pixel_noise, self.gdd_jitter, self.parcel_noise].iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Config(format!("class {}: noise levels must be non-negative", self.class_id)));
        }
        Ok(())
    }

    /// The same crop with every pulse moved `dg` °C·day later.
    pub fn delayed(&self, dg: f64) -> Result<CropPrototype> {
        let mut out = self.clone();
        out.g_sos += dg;
        out.g_eos += dg;
        for p in &mut out.extra_pulses {
            p.g_sos += dg;
            p.g_eos += dg;
        }
        for p in out.pulses() {
            p.validate(self.base.len(), self.class_id)?;
        }
        Ok(out)
    }

    /// Same reflectance model up to the phenology timing of the main pulse.
    pub fn is_timing_twin_of(&self, other: &CropPrototype) -> bool {
        let strip = |p: &CropPrototype| (p.base.clone(), p.amplitude.clone(), p.r1, p.r2, p.g_eos - p.g_sos, p.pixel_noise);
        self.g_sos != other.g_sos
            && strip(self) == strip(other)
            && self.extra_pulses.is_empty()
            && other.extra_pulses.is_empty()
    }

    /// Noise-free reflectance of channel `c` at thermal time `g`, before clamping.
    pub fn signal(&self, c: usize, g: f64) -> f64 {
        let mut v = self.base[c] + self.amplitude[c] * self.main_pulse().growth(g);
        for p in &self.extra_pulses {
            v += p.amplitude[c] * p.growth(g);
        }
        v
    }
}

/// Every `cadence`-th day from a random offset, each kept with probability
/// `1 − dropout`, redrawn until at least four survive. Days stay within
/// `1..=last_day`.
pub fn draw_days(cadence: u32, dropout: f64, last_day: u32, rng: &mut Rng) -> Result<Vec<u32>> {
    if cadence == 0 || !(0.0..1.0).contains(&dropout) || last_day as usize > DAYS_PER_YEAR {
        return Err(Error::Config("cadence ≥ 1, dropout in [0, 1) and days within a year required".into()));
    }
    if (last_day / cadence) < MIN_OBSERVATIONS as u32 {
        return Err(Error::Config(format!("cadence {cadence} leaves fewer than {MIN_OBSERVATIONS} slots")));
    }
    loop {
        let offset = rng.random_range(1..=cadence);
        let days: Vec<u32> = (offset..=last_day)
            .step_by(cadence as usize)
            .filter(|_| rng.random::<f64>() >= dropout)
            .collect();
        if days.len() >= MIN_OBSERVATIONS {
            return Ok(days);
        }
    }
}

/// Per-parcel draws shared by all its observations.
#[derive(Clone, Debug, PartialEq)]
pub struct ParcelDraw {
    pub gdd_offset: f64,
    pub offsets: Vec<f64>,
}

pub fn draw_parcel_effects(proto: &CropPrototype, rng: &mut Rng) -> ParcelDraw {
    let gdd_offset = if proto.gdd_jitter > 0.0 {
        Normal::new(0.0, proto.gdd_jitter).expect("positive std").sample(rng)
    } else {
        0.0
    };
    let offsets = (0..proto.base.len())
        .map(|_| {
            if proto.parcel_noise > 0.0 {
                Normal::new(0.0, proto.parcel_noise).expect("positive std").sample(rng)
            } else {
                0.0
            }
        })
        .collect();
    ParcelDraw { gdd_offset, offsets }
}

/// Quantizes a reflectance to the 16-bit grid after clamping to `[0, 1]`.
pub fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * RAW_MAX).round() / RAW_MAX
}

/// Renders `gdd.len() × pixels × C` reflectances. `region_offset` (one per
/// channel, or empty) models region-specific radiometry.
pub fn render_pixels(
    proto: &CropPrototype,
    gdd: &[f64],
    pixels: usize,
    region_offset: &[f64],
    draw: &ParcelDraw,
    rng: &mut Rng,
) -> Vec<f64> {
    let c = proto.base.len();
    let noise = (proto.pixel_noise > 0.0).then(|| Normal::new(0.0, proto.pixel_noise).expect("positive std"));
    let mut out = Vec::with_capacity(gdd.len() * pixels * c);
    for &g in gdd {
        let clean: Vec<f64> = (0..c)
            .map(|ch| {
                proto.signal(ch, g - draw.gdd_offset)
                    + draw.offsets[ch]
                    + region_offset.get(ch).copied().unwrap_or(0.0)
            })
            .collect();
        for _ in 0..pixels {
            for &v in &clean {
                let e = noise.map_or(0.0, |n| n.sample(rng));
                out.push(quantize(v + e));
            }
        }
    }
    out
}

/// A labeled parcel before it is assigned to a split.
#[derive(Clone, Debug, PartialEq)]
pub struct ParcelSample {
    pub label: usize,
    pub days: Vec<u32>,
    /// `days.len() × pixels × C`.
    pub pixels: Vec<f64>,
}

/// Draws observation days and renders one parcel in the region described by
/// `timeline`.
pub fn gen_parcel(
    proto: &CropPrototype,
    timeline: &ThermalTimeline,
    pixels: usize,
    cadence: u32,
    dropout: f64,
    region_offset: &[f64],
    rng: &mut Rng,
) -> Result<ParcelSample> {
    let days = draw_days(cadence, dropout, DAYS_PER_YEAR as u32, rng)?;
    let draw = draw_parcel_effects(proto, rng);
    let gdd = timeline.at_days(&days)?;
    let pixels = render_pixels(proto, &gdd, pixels, region_offset, &draw, rng);
    Ok(ParcelSample { label: proto.class_id, days, pixels })
}
