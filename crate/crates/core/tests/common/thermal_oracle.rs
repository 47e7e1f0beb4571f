//! Naive growing-degree-day oracle and random temperature series.

use rand::Rng;
use tpe_core::thermal::{TemperatureSeries, ThermalConfig, DAYS_PER_YEAR};

/// Recomputes every day's total from scratch, inlining the clipped mean.
pub fn naive_gdd(tmin: &[f64], tmax: &[f64], cfg: &ThermalConfig) -> Vec<f64> {
    (1..=tmin.len())
        .map(|t| {
            let mut total = 0.0;
            for i in cfg.start_day..=t {
                let avg = (tmin[i - 1] + tmax[i - 1]) / 2.0;
                let clipped = if avg < cfg.t_base {
                    cfg.t_base
                } else if avg > cfg.t_cap {
                    cfg.t_cap
                } else {
                    avg
                };
                total += clipped - cfg.t_base;
            }
            total
        })
        .collect()
}

pub fn random_series(seed: u64) -> TemperatureSeries {
    let mut r = super::rng(seed);
    let mid: f64 = r.random_range(-15.0..25.0);
    let amp: f64 = r.random_range(0.0..20.0);
    let mut tmin = Vec::with_capacity(DAYS_PER_YEAR);
    let mut tmax = Vec::with_capacity(DAYS_PER_YEAR);
    for d in 0..DAYS_PER_YEAR {
        let season = mid - amp * (2.0 * std::f64::consts::PI * d as f64 / 365.0).cos();
        let lo = season + r.random_range(-12.0..6.0);
        tmin.push(lo);
        tmax.push(lo + r.random_range(0.0..18.0));
    }
    TemperatureSeries::new(format!("R{seed}"), tmin, tmax).unwrap()
}
