//! Growing degree days from daily minimum and maximum temperatures.
//!
//! A day contributes its mean temperature clipped to `[t_base, t_cap]`, minus
//! `t_base`. Contributions accumulate from a start day (January 1 by default),
//! which makes the timeline non-decreasing and usable in place of
//! day-of-year as a time position.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DAYS_PER_YEAR: usize = 365;

/// Daily temperatures of one region for one non-leap year; index `i` is day `i + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct TemperatureSeries {
    region_id: String,
    tmin_c: Vec<f64>,
    tmax_c: Vec<f64>,
}

impl TemperatureSeries {
    pub fn new(region_id: impl Into<String>, tmin_c: Vec<f64>, tmax_c: Vec<f64>) -> Result<Self> {
        let region_id = region_id.into();
        if tmin_c.len() != DAYS_PER_YEAR || tmax_c.len() != DAYS_PER_YEAR {
            return Err(Error::InvalidInput(format!(
                "region {region_id}: expected {DAYS_PER_YEAR} days, got {} minima and {} maxima",
                tmin_c.len(),
                tmax_c.len()
            )));
        }
        for (i, (lo, hi)) in tmin_c.iter().zip(&tmax_c).enumerate() {
            if !lo.is_finite() || !hi.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "region {region_id}: non-finite temperature on day {}",
                    i + 1
                )));
            }
            if lo > hi {
                return Err(Error::InvalidInput(format!(
                    "region {region_id}: tmin {lo} exceeds tmax {hi} on day {}",
                    i + 1
                )));
            }
        }
        Ok(Self { region_id, tmin_c, tmax_c })
    }

    pub fn region_id(&self) -> &str {
        &self.region_id
    }

    pub fn tmin(&self) -> &[f64] {
        &self.tmin_c
    }

    pub fn tmax(&self) -> &[f64] {
        &self.tmax_c
    }

    pub fn daily_mean(&self) -> Vec<f64> {
        self.tmin_c.iter().zip(&self.tmax_c).map(|(a, b)| (a + b) / 2.0).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThermalConfig {
    pub t_base: f64,
    pub t_cap: f64,
    /// First accumulated day, 1-based.
    pub start_day: usize,
}

impl Default for ThermalConfig {
    fn default() -> Self {
        Self { t_base: 0.0, t_cap: 30.0, start_day: 1 }
    }
}

impl ThermalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_base < self.t_cap) {
            return Err(Error::InvalidInput(format!(
                "t_base {} must be below t_cap {}",
                self.t_base, self.t_cap
            )));
        }
        if !(1..=DAYS_PER_YEAR).contains(&self.start_day) {
            return Err(Error::InvalidInput(format!(
                "accumulation start day {} outside 1..={DAYS_PER_YEAR}",
                self.start_day
            )));
        }
        Ok(())
    }
}

/// Cumulative growing degree days per calendar day.
#[derive(Clone, Debug, PartialEq)]
pub struct ThermalTimeline {
    pub region_id: String,
    /// `gdd[i]` is the total up to and including day `i + 1`.
    pub gdd: Vec<f64>,
}

/// Growing-degree contribution of one day.
pub fn daily_contribution(tmin: f64, tmax: f64, cfg: &ThermalConfig) -> Result<f64> {
    if tmin > tmax {
        return Err(Error::InvalidInput(format!("tmin {tmin} exceeds tmax {tmax}")));
    }
    let avg = (tmin + tmax) / 2.0;
    Ok(avg.max(cfg.t_base).min(cfg.t_cap) - cfg.t_base)
}

pub fn accumulate(series: &TemperatureSeries, cfg: &ThermalConfig) -> Result<ThermalTimeline> {
    cfg.validate()?;
    let mut gdd = vec![0.0; DAYS_PER_YEAR];
    let mut total = 0.0;
    for day in cfg.start_day..=DAYS_PER_YEAR {
        total += daily_contribution(series.tmin_c[day - 1], series.tmax_c[day - 1], cfg)?;
        gdd[day - 1] = total;
    }
    Ok(ThermalTimeline { region_id: series.region_id.clone(), gdd })
}

impl ThermalTimeline {
    /// Cumulative GDD at each 1-based day of year, in input order.
    pub fn at_days(&self, days: &[u32]) -> Result<Vec<f64>> {
        gdd_at_days(self, days)
    }

    pub fn total(&self) -> f64 {
        *self.gdd.last().unwrap_or(&0.0)
    }
}

pub fn gdd_at_days(timeline: &ThermalTimeline, days: &[u32]) -> Result<Vec<f64>> {
    days.iter()
        .map(|&d| {
            if d == 0 || d as usize > timeline.gdd.len() {
                Err(Error::InvalidInput(format!(
                    "observation day {d} outside 1..={}",
                    timeline.gdd.len()
                )))
            } else {
                Ok(timeline.gdd[d as usize - 1])
            }
        })
        .collect()
}

pub const CSV_HEADER: [&str; 4] = ["region_id", "day_of_year", "tmin_c", "tmax_c"];

#[derive(Debug, Deserialize)]
struct CsvRow {
    region_id: String,
    day_of_year: u32,
    tmin_c: f64,
    tmax_c: f64,
}

/// Reads `region_id,day_of_year,tmin_c,tmax_c` rows; regions keep the order
/// of their first appearance and rows of different regions may interleave.
pub fn load_temperature_csv(path: &Path) -> Result<Vec<TemperatureSeries>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_temperature_csv(&text, path)
}

pub fn parse_temperature_csv(text: &str, path: &Path) -> Result<Vec<TemperatureSeries>> {
    let parse_err = |line: usize, msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != CSV_HEADER {
        return Err(parse_err(1, format!("expected header {}", CSV_HEADER.join(","))));
    }
    let mut order: Vec<String> = Vec::new();
    let mut days: HashMap<String, Vec<Option<(f64, f64)>>> = HashMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let row: CsvRow = record
            .deserialize(Some(&headers))
            .map_err(|e| parse_err(line, format!("malformed row: {e}")))?;
        if row.day_of_year == 0 || row.day_of_year as usize > DAYS_PER_YEAR {
            return Err(parse_err(line, format!("day_of_year {} outside 1..={DAYS_PER_YEAR}", row.day_of_year)));
        }
        if row.tmin_c > row.tmax_c {
            return Err(parse_err(
                line,
                format!(
                    "region {} day {}: tmin {} exceeds tmax {}",
                    row.region_id, row.day_of_year, row.tmin_c, row.tmax_c
                ),
            ));
        }
        let slots = days.entry(row.region_id.clone()).or_insert_with(|| {
            order.push(row.region_id.clone());
            vec![None; DAYS_PER_YEAR]
        });
        let slot = &mut slots[row.day_of_year as usize - 1];
        if slot.is_some() {
            return Err(parse_err(
                line,
                format!("region {} day {} appears twice", row.region_id, row.day_of_year),
            ));
        }
        *slot = Some((row.tmin_c, row.tmax_c));
    }
    order
        .into_iter()
        .map(|region| {
            let slots = &days[&region];
            let mut tmin = Vec::with_capacity(DAYS_PER_YEAR);
            let mut tmax = Vec::with_capacity(DAYS_PER_YEAR);
            for (i, s) in slots.iter().enumerate() {
                let (lo, hi) = s.ok_or_else(|| {
                    Error::InvalidInput(format!("region {region} is missing day {}", i + 1))
                })?;
                tmin.push(lo);
                tmax.push(hi);
            }
            TemperatureSeries::new(region, tmin, tmax)
        })
        .collect()
}

/// Renders series in the CSV layout read by [`load_temperature_csv`].
pub fn temperature_csv(series: &[TemperatureSeries]) -> String {
    let mut out = CSV_HEADER.join(",");
    out.push('\n');
    for s in series {
        for (i, (lo, hi)) in s.tmin_c.iter().zip(&s.tmax_c).enumerate() {
            out.push_str(&format!("{},{},{},{}\n", s.region_id, i + 1, lo, hi));
        }
    }
    out
}
