//! Synthetic multi-region crop datasets whose classes are defined in thermal
//! time, so the same crop appears earlier in warmer regions.

pub mod climate;
pub mod parcel;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::rng::{indexed_stream, Rng};
use crate::thermal::{
    accumulate, load_temperature_csv, temperature_csv, TemperatureSeries, ThermalConfig, ThermalTimeline,
    DAYS_PER_YEAR,
};

pub use climate::{gen_region_temperature, ClimateModel, DIURNAL_HALF_RANGE_C};
pub use parcel::{
    draw_days, draw_parcel_effects, gen_parcel, quantize, render_pixels, CropPrototype, ParcelSample, Pulse,
    MIN_OBSERVATIONS, RAW_MAX,
};

pub const PARCELS_FILE: &str = "parcels.jsonl";
pub const TEMPERATURES_FILE: &str = "temperatures.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionSpec {
    pub id: String,
    pub climate: ClimateModel,
    /// Additive per-channel reflectance offset; empty means none.
    #[serde(default)]
    pub spectral_offset: Vec<f64>,
    /// Thermal-time delay of every class's phenology in this region
    /// (locally adapted varieties), °C·day.
    #[serde(default)]
    pub phenology_offset_gdd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub regions: Vec<RegionSpec>,
    pub classes: Vec<CropPrototype>,
    pub parcels_per_class: usize,
    pub pixels: usize,
    pub channels: usize,
    pub cadence_days: u32,
    pub dropout: f64,
    pub seed: u64,
    #[serde(default)]
    pub thermal: ThermalConfig,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.regions.len() < 2 || self.classes.len() < 2 {
            return Err(Error::Config("a dataset needs at least 2 regions and 2 classes".into()));
        }
        let ids: BTreeSet<&str> = self.regions.iter().map(|r| r.id.as_str()).collect();
        if ids.len() != self.regions.len() || ids.iter().any(|id| id.is_empty() || id.contains(',')) {
            return Err(Error::Config("region ids must be unique, non-empty and comma-free".into()));
        }
        for r in &self.regions {
            r.climate.validate()?;
            if !r.spectral_offset.is_empty() && r.spectral_offset.len() != self.channels {
                return Err(Error::Config(format!("region {}: offset width differs from channel count", r.id)));
            }
            if !r.phenology_offset_gdd.is_finite() {
                return Err(Error::Config(format!("region {}: phenology offset must be finite", r.id)));
            }
        }
        for (i, c) in self.classes.iter().enumerate() {
            if c.class_id != i {
                return Err(Error::Config(format!("class at position {i} has id {}", c.class_id)));
            }
            c.validate(self.channels)?;
        }
        let has_pair = self
            .classes
            .iter()
            .enumerate()
            .any(|(i, a)| self.classes[i + 1..].iter().any(|b| a.is_timing_twin_of(b)));
        if !has_pair {
            return Err(Error::Config(
                "class list needs a timing pair: identical spectra, different start of season".into(),
            ));
        }
        if self.cadence_days == 0 || !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("cadence must be ≥ 1 day and dropout in [0, 1)".into()));
        }
        if self.pixels == 0 || self.channels == 0 || self.parcels_per_class == 0 {
            return Err(Error::Config("pixels, channels and parcels per class must be positive".into()));
        }
        self.thermal.validate()
    }

    pub fn region(&self, id: &str) -> Option<&RegionSpec> {
        self.regions.iter().find(|r| r.id == id)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split `{s}`"))),
        }
    }
}

/// Split sizes for `n` items: 70 % train, 10 % validation, the rest test.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = (n as f64 * 0.7).round() as usize;
    let val = ((n as f64 * 0.1).round() as usize).min(n - train);
    (train, val, n - train - val)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parcel {
    pub id: String,
    pub region_id: String,
    pub split: Split,
    pub label: usize,
    pub days: Vec<u32>,
    /// `days.len() × S × C`.
    pub pixels: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ParcelRecord<P> {
    parcel_id: String,
    region_id: String,
    split: Split,
    label: usize,
    days: Vec<u32>,
    pixels: Vec<Vec<Vec<P>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub temperatures: Vec<TemperatureSeries>,
    pub parcels: Vec<Parcel>,
}

impl Dataset {
    pub fn region_ids(&self) -> Vec<String> {
        self.spec.regions.iter().map(|r| r.id.clone()).collect()
    }

    pub fn classes(&self) -> usize {
        self.spec.classes.len()
    }

    pub fn timelines(&self, cfg: &ThermalConfig) -> Result<BTreeMap<String, ThermalTimeline>> {
        self.temperatures
            .iter()
            .map(|s| Ok((s.region_id().to_string(), accumulate(s, cfg)?)))
            .collect()
    }

    pub fn parcels_in<'a>(&'a self, region: &'a str, split: Option<Split>) -> impl Iterator<Item = &'a Parcel> + 'a {
        self.parcels
            .iter()
            .filter(move |p| p.region_id == region && split.is_none_or(|s| p.split == s))
    }
}

/// Generates every region's temperatures and parcels. Each parcel draws from
/// its own stream indexed by (region, class, parcel).
pub fn gen_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut temperatures = Vec::with_capacity(spec.regions.len());
    let mut parcels = Vec::new();
    for (ri, region) in spec.regions.iter().enumerate() {
        let series = gen_region_temperature(
            &region.id,
            &region.climate,
            &mut indexed_stream(spec.seed, "climate", &[ri as u64]),
        )?;
        let timeline = accumulate(&series, &spec.thermal)?;
        temperatures.push(series);
        for (ci, proto) in spec.classes.iter().enumerate() {
            let proto = &proto.delayed(region.phenology_offset_gdd)?;
            let n = spec.parcels_per_class;
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut indexed_stream(spec.seed, "split", &[ri as u64, ci as u64]));
            let (train, val, _) = split_sizes(n);
            let mut split_of = vec![Split::Test; n];
            for (rank, &idx) in order.iter().enumerate() {
                split_of[idx] = if rank < train {
                    Split::Train
                } else if rank < train + val {
                    Split::Val
                } else {
                    Split::Test
                };
            }
            for (pi, split) in split_of.into_iter().enumerate() {
                let mut rng = indexed_stream(spec.seed, "parcel", &[ri as u64, ci as u64, pi as u64]);
                let s = gen_parcel(
                    proto,
                    &timeline,
                    spec.pixels,
                    spec.cadence_days,
                    spec.dropout,
                    &region.spectral_offset,
                    &mut rng,
                )?;
                parcels.push(Parcel {
                    id: format!("{}-c{ci}-{pi:04}", region.id),
                    region_id: region.id.clone(),
                    split,
                    label: s.label,
                    days: s.days,
                    pixels: s.pixels,
                });
            }
        }
    }
    Ok(Dataset { spec: spec.clone(), temperatures, parcels })
}

fn nest(p: &Parcel, pixels: usize, channels: usize) -> Vec<Vec<Vec<f64>>> {
    p.pixels
        .chunks(pixels * channels)
        .map(|step| step.chunks(channels).map(<[f64]>::to_vec).collect())
        .collect()
}

pub fn parcels_jsonl(dataset: &Dataset) -> Result<String> {
    let mut out = String::new();
    for p in &dataset.parcels {
        let rec = ParcelRecord {
            parcel_id: p.id.clone(),
            region_id: p.region_id.clone(),
            split: p.split,
            label: p.label,
            days: p.days.clone(),
            pixels: nest(p, dataset.spec.pixels, dataset.spec.channels),
        };
        out.push_str(&serde_json::to_string(&rec)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn manifest_json(dataset: &Dataset) -> Result<String> {
    let counts: BTreeMap<String, usize> = dataset
        .region_ids()
        .into_iter()
        .map(|r| {
            let n = dataset.parcels_in(&r, None).count();
            (r, n)
        })
        .collect();
    let manifest = serde_json::json!({
        "seed": dataset.spec.seed,
        "spec": dataset.spec,
        "parcels_per_region": counts,
        "files": [PARCELS_FILE, TEMPERATURES_FILE],
    });
    Ok(serde_json::to_string_pretty(&manifest)? + "\n")
}

/// Writes parcels, temperatures and the manifest into `dir`.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    write_atomic(&dir.join(PARCELS_FILE), parcels_jsonl(dataset)?.as_bytes())?;
    write_atomic(&dir.join(TEMPERATURES_FILE), temperature_csv(&dataset.temperatures).as_bytes())?;
    write_atomic(&dir.join(MANIFEST_FILE), manifest_json(dataset)?.as_bytes())
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn flatten<P: Copy>(
    rec: &ParcelRecord<P>,
    spec: &DatasetSpec,
    path: &Path,
    line: usize,
    convert: impl Fn(P) -> Result<f64>,
) -> Result<Vec<f64>> {
    let bad = |msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
    if rec.pixels.len() != rec.days.len() || rec.days.len() < MIN_OBSERVATIONS {
        return Err(bad(format!("{} pixel steps for {} days", rec.pixels.len(), rec.days.len())));
    }
    if rec.days.iter().any(|&d| d == 0 || d as usize > DAYS_PER_YEAR) || rec.days.windows(2).any(|w| w[1] <= w[0]) {
        return Err(bad("observation days must increase within 1..=365".into()));
    }
    if rec.label >= spec.classes.len() || spec.region(&rec.region_id).is_none() {
        return Err(bad(format!("unknown label {} or region `{}`", rec.label, rec.region_id)));
    }
    let mut out = Vec::with_capacity(rec.days.len() * spec.pixels * spec.channels);
    for step in &rec.pixels {
        if step.len() != spec.pixels {
            return Err(bad(format!("{} pixels where {} expected", step.len(), spec.pixels)));
        }
        for px in step {
            if px.len() != spec.channels {
                return Err(bad(format!("{} channels where {} expected", px.len(), spec.channels)));
            }
            for &v in px {
                let v = convert(v).map_err(|e| bad(e.to_string()))?;
                out.push(v);
            }
        }
    }
    Ok(out)
}

fn parse_parcels<P: Copy + for<'de> Deserialize<'de>>(
    text: &str,
    spec: &DatasetSpec,
    path: &Path,
    convert: impl Fn(P) -> Result<f64>,
) -> Result<Vec<Parcel>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ParcelRecord<P> = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        let pixels = flatten(&rec, spec, path, i + 1, &convert)?;
        out.push(Parcel {
            id: rec.parcel_id,
            region_id: rec.region_id,
            split: rec.split,
            label: rec.label,
            days: rec.days,
            pixels,
        });
    }
    Ok(out)
}

fn load_spec(dir: &Path) -> Result<DatasetSpec> {
    let path = dir.join(MANIFEST_FILE);
    let manifest: serde_json::Value = serde_json::from_str(&read(&path)?)?;
    let spec: DatasetSpec = serde_json::from_value(
        manifest.get("spec").cloned().ok_or_else(|| Error::Config(format!("{} lacks `spec`", path.display())))?,
    )?;
    spec.validate()?;
    Ok(spec)
}

/// Reads a dataset directory written by [`write_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let spec = load_spec(dir)?;
    let temperatures = load_temperature_csv(&dir.join(TEMPERATURES_FILE))?;
    for r in &spec.regions {
        if !temperatures.iter().any(|t| t.region_id() == r.id) {
            return Err(Error::Config(format!("no temperatures for region `{}`", r.id)));
        }
    }
    let path = dir.join(PARCELS_FILE);
    let parcels = parse_parcels::<f64>(&read(&path)?, &spec, &path, |v| {
        if (0.0..=1.0).contains(&v) {
            Ok(v)
        } else {
            Err(Error::InvalidInput(format!("reflectance {v} outside [0, 1]")))
        }
    })?;
    Ok(Dataset { spec, temperatures, parcels })
}

/// Parcels whose pixels are raw 16-bit codes; values are divided by
/// `2^16 − 1` on load.
pub fn parse_raw_parcels(text: &str, spec: &DatasetSpec, path: &Path) -> Result<Vec<Parcel>> {
    parse_parcels::<u16>(text, spec, path, |v| Ok(v as f64 / RAW_MAX))
}

/// Raw 16-bit rendering of a dataset's parcels, one JSON object per line.
pub fn raw_parcels_jsonl(dataset: &Dataset) -> Result<String> {
    let mut out = String::new();
    for p in &dataset.parcels {
        let pixels: Vec<Vec<Vec<u16>>> = nest(p, dataset.spec.pixels, dataset.spec.channels)
            .into_iter()
            .map(|s| s.into_iter().map(|px| px.into_iter().map(|v| (v * RAW_MAX).round() as u16).collect()).collect())
            .collect();
        let rec = ParcelRecord {
            parcel_id: p.id.clone(),
            region_id: p.region_id.clone(),
            split: p.split,
            label: p.label,
            days: p.days.clone(),
            pixels,
        };
        out.push_str(&serde_json::to_string(&rec)?);
        out.push('\n');
    }
    Ok(out)
}

/// True when the last `delta` days of `climate` contribute no thermal time,
/// so delaying it by `delta` days gives a region with a dormant lead-in.
pub fn has_dormant_lead_in(climate: &ClimateModel, delta: u32, cfg: &ThermalConfig) -> bool {
    climate.noise_c == 0.0
        && (DAYS_PER_YEAR + 1 - delta as usize..=DAYS_PER_YEAR)
            .all(|d| climate.mean_on(d) <= cfg.t_base)
}

/// A noise-free region and its copy delayed by `delta` days.
pub fn twin_regions(base: &RegionSpec, delta: u32, cfg: &ThermalConfig) -> Result<(RegionSpec, RegionSpec)> {
    let climate = ClimateModel { noise_c: 0.0, ..base.climate.clone() };
    if !has_dormant_lead_in(&climate, delta, cfg) {
        return Err(Error::Config(format!(
            "region `{}` is not dormant over the final {delta} days; the delayed copy would not align",
            base.id
        )));
    }
    let a = RegionSpec { climate: climate.clone(), ..base.clone() };
    let b = RegionSpec {
        id: format!("{}+{delta}", base.id),
        climate: climate.delayed(delta as f64),
        ..base.clone()
    };
    Ok((a, b))
}

/// The same parcel observed in a region and in its `delta`-day delayed twin:
/// days of the second copy are those of the first plus `delta`, and both
/// copies share every random draw.
#[allow(clippy::too_many_arguments)]
pub fn gen_twin_parcels(
    proto: &CropPrototype,
    timeline_a: &ThermalTimeline,
    timeline_b: &ThermalTimeline,
    delta: u32,
    pixels: usize,
    cadence: u32,
    dropout: f64,
    region_offset: &[f64],
    rng: &mut Rng,
) -> Result<(ParcelSample, ParcelSample)> {
    let days_a = draw_days(cadence, dropout, DAYS_PER_YEAR as u32 - delta, rng)?;
    let days_b: Vec<u32> = days_a.iter().map(|d| d + delta).collect();
    let draw = draw_parcel_effects(proto, rng);
    let mut rng_b = rng.clone();
    let pa = render_pixels(proto, &timeline_a.at_days(&days_a)?, pixels, region_offset, &draw, rng);
    let pb = render_pixels(proto, &timeline_b.at_days(&days_b)?, pixels, region_offset, &draw, &mut rng_b);
    Ok((
        ParcelSample { label: proto.class_id, days: days_a, pixels: pa },
        ParcelSample { label: proto.class_id, days: days_b, pixels: pb },
    ))
}
