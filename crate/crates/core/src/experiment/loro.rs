//! Leave-one-region-out benchmark and its aggregated table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::metrics::EvalReport;
use super::train::{evaluate_examples, prepare_examples, train, TrainConfig};
use crate::error::{Error, Result};
use crate::model::Variant;
use crate::synthgen::{Dataset, Parcel, Split};
use crate::thermal::ThermalTimeline;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoroConfig {
    /// Shared training settings; `variant` and `seed` are set per run.
    pub train: TrainConfig,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    /// Variant trained on every region's training split, if any.
    pub upper_bound: Option<Variant>,
    /// Worker threads; 0 uses every available core.
    pub jobs: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    HeldOut,
    UpperBound,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub mode: RunMode,
    pub best_epoch: usize,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellStats {
    pub macro_f1_mean: f64,
    pub macro_f1_std: f64,
    pub overall_accuracy_mean: f64,
    pub overall_accuracy_std: f64,
    pub runs: usize,
}

impl CellStats {
    fn from_pairs(pairs: &[(f64, f64)]) -> Self {
        let f1: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let oa: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let (macro_f1_mean, macro_f1_std) = mean_std(&f1);
        let (overall_accuracy_mean, overall_accuracy_std) = mean_std(&oa);
        Self { macro_f1_mean, macro_f1_std, overall_accuracy_mean, overall_accuracy_std, runs: pairs.len() }
    }
}

/// Mean and sample standard deviation (zero for fewer than two values).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub label: String,
    pub mode: RunMode,
    pub variant: Variant,
    /// One cell per region, in table region order.
    pub cells: Vec<CellStats>,
    /// Per-seed region averages, summarized over seeds.
    pub average: CellStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoroTable {
    pub regions: Vec<String>,
    pub seeds: Vec<u64>,
    pub rows: Vec<TableRow>,
    pub runs: Vec<RunRecord>,
}

impl LoroTable {
    fn build(regions: Vec<String>, seeds: Vec<u64>, runs: Vec<RunRecord>) -> Result<Self> {
        let mut keys: Vec<(RunMode, Variant)> = Vec::new();
        for r in &runs {
            let v: Variant = r.report.variant.parse()?;
            if !keys.contains(&(r.mode, v)) {
                keys.push((r.mode, v));
            }
        }
        let rows = keys
            .into_iter()
            .map(|(mode, variant)| {
                let mine: Vec<&RunRecord> =
                    runs.iter().filter(|r| r.mode == mode && r.report.variant == variant.name()).collect();
                let cells = regions
                    .iter()
                    .map(|reg| {
                        let pairs: Vec<(f64, f64)> = mine
                            .iter()
                            .filter(|r| &r.report.region_id == reg)
                            .map(|r| (r.report.macro_f1, r.report.overall_accuracy))
                            .collect();
                        CellStats::from_pairs(&pairs)
                    })
                    .collect();
                let per_seed: Vec<(f64, f64)> = seeds
                    .iter()
                    .map(|&s| {
                        let rs: Vec<&&RunRecord> = mine.iter().filter(|r| r.report.seed == s).collect();
                        let n = rs.len() as f64;
                        (
                            rs.iter().map(|r| r.report.macro_f1).sum::<f64>() / n,
                            rs.iter().map(|r| r.report.overall_accuracy).sum::<f64>() / n,
                        )
                    })
                    .collect();
                let label = match mode {
                    RunMode::HeldOut => variant.name().to_string(),
                    RunMode::UpperBound => format!("upper_bound ({})", variant.name()),
                };
                TableRow { label, mode, variant, cells, average: CellStats::from_pairs(&per_seed) }
            })
            .collect();
        Ok(Self { regions, seeds, rows, runs })
    }

    pub fn row(&self, mode: RunMode, variant: Variant) -> Option<&TableRow> {
        self.rows.iter().find(|r| r.mode == mode && r.variant == variant)
    }

    /// Mean held-out macro F1 averaged over regions and seeds.
    pub fn held_out_mean_f1(&self, variant: Variant) -> Option<f64> {
        self.row(RunMode::HeldOut, variant).map(|r| r.average.macro_f1_mean)
    }

    /// One line per run with its raw metrics.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::InvalidInput(format!("csv: {e}"));
        w.write_record(["mode", "variant", "seed", "region", "macro_f1", "overall_accuracy", "total", "best_epoch"])
            .map_err(csv_err)?;
        for r in &self.runs {
            let mode = match r.mode {
                RunMode::HeldOut => "held_out",
                RunMode::UpperBound => "upper_bound",
            };
            w.write_record([
                mode.to_string(),
                r.report.variant.clone(),
                r.report.seed.to_string(),
                r.report.region_id.clone(),
                r.report.macro_f1.to_string(),
                r.report.overall_accuracy.to_string(),
                r.report.total.to_string(),
                r.best_epoch.to_string(),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidInput(format!("csv: {e}")))?;
        String::from_utf8(bytes).map_err(|e| Error::InvalidInput(format!("csv: {e}")))
    }

    /// Fixed-width table: per-region F1 and OA columns, then the average.
    pub fn render(&self) -> String {
        let label_w = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(6).max(6);
        let mut out = String::new();
        let cell_w = 15;
        let _ = write!(out, "{:label_w$}", "Method");
        for reg in self.regions.iter().map(String::as_str).chain(["Avg."]) {
            let _ = write!(out, " | {:^w$}", reg, w = 2 * cell_w + 1);
        }
        out.push('\n');
        let _ = write!(out, "{:label_w$}", "");
        for _ in 0..=self.regions.len() {
            let _ = write!(out, " | {:^cell_w$} {:^cell_w$}", "F1", "OA");
        }
        out.push('\n');
        out.push_str(&"-".repeat(label_w + (self.regions.len() + 1) * (2 * cell_w + 4)));
        out.push('\n');
        let fmt = |m: f64, s: f64| format!("{:.1} ± {:.1}", 100.0 * m, 100.0 * s);
        for row in &self.rows {
            let _ = write!(out, "{:label_w$}", row.label);
            for c in row.cells.iter().chain([&row.average]) {
                let _ = write!(
                    out,
                    " | {:>cell_w$} {:>cell_w$}",
                    fmt(c.macro_f1_mean, c.macro_f1_std),
                    fmt(c.overall_accuracy_mean, c.overall_accuracy_std)
                );
            }
            out.push('\n');
        }
        let _ = writeln!(out, "seeds: {:?}; cells are mean ± sample std in percent", self.seeds);
        out
    }
}

#[derive(Clone, Copy, Debug)]
enum Task {
    HeldOut { variant: Variant, region: usize, seed: u64 },
    UpperBound { variant: Variant, seed: u64 },
}

fn pooled<'a>(dataset: &'a Dataset, regions: &[&'a str], split: Split) -> Vec<&'a Parcel> {
    regions.iter().flat_map(|r| dataset.parcels_in(r, Some(split))).collect()
}

fn run_cfg(base: &TrainConfig, variant: Variant, seed: u64) -> TrainConfig {
    TrainConfig { variant, seed, ..base.clone() }
}

pub fn timelines(dataset: &Dataset, cfg: &TrainConfig) -> Result<BTreeMap<String, ThermalTimeline>> {
    dataset.timelines(&cfg.thermal)
}

/// Trains on the training splits of `train_regions`, selecting on their
/// validation splits.
pub fn train_on_regions(
    dataset: &Dataset,
    cfg: &TrainConfig,
    tl: &BTreeMap<String, ThermalTimeline>,
    train_regions: &[&str],
) -> Result<super::train::TrainOutcome> {
    let tr = prepare_examples(dataset, &pooled(dataset, train_regions, Split::Train), cfg.variant, tl)?;
    let va = prepare_examples(dataset, &pooled(dataset, train_regions, Split::Val), cfg.variant, tl)?;
    train(cfg, &tr, &va, dataset.spec.channels, dataset.classes())
}

/// Trains on every region except `held_out` and evaluates on all of its parcels.
pub fn held_out_run(dataset: &Dataset, base: &TrainConfig, variant: Variant, held_out: &str, seed: u64) -> Result<RunRecord> {
    let cfg = run_cfg(base, variant, seed);
    let tl = timelines(dataset, &cfg)?;
    let ids = dataset.region_ids();
    if !ids.iter().any(|r| r == held_out) {
        return Err(Error::InvalidInput(format!("dataset has no region `{held_out}`")));
    }
    let others: Vec<&str> = ids.iter().map(String::as_str).filter(|r| *r != held_out).collect();
    let outcome = train_on_regions(dataset, &cfg, &tl, &others)?;
    let test = prepare_examples(dataset, &dataset.parcels_in(held_out, None).collect::<Vec<_>>(), variant, &tl)?;
    let report = evaluate_examples(&outcome.model, &outcome.store, &test, cfg.pixel_sample, held_out, seed)?;
    Ok(RunRecord { mode: RunMode::HeldOut, best_epoch: outcome.best_epoch, report })
}

/// Trains once on every region's training split and evaluates on each
/// region's test split.
pub fn upper_bound_runs(dataset: &Dataset, base: &TrainConfig, variant: Variant, seed: u64) -> Result<Vec<RunRecord>> {
    let cfg = run_cfg(base, variant, seed);
    let tl = timelines(dataset, &cfg)?;
    let ids = dataset.region_ids();
    let all: Vec<&str> = ids.iter().map(String::as_str).collect();
    let outcome = train_on_regions(dataset, &cfg, &tl, &all)?;
    all.iter()
        .map(|r| {
            let test = prepare_examples(dataset, &dataset.parcels_in(r, Some(Split::Test)).collect::<Vec<_>>(), variant, &tl)?;
            let report = evaluate_examples(&outcome.model, &outcome.store, &test, cfg.pixel_sample, r, seed)?;
            Ok(RunRecord { mode: RunMode::UpperBound, best_epoch: outcome.best_epoch, report })
        })
        .collect()
}

fn execute(dataset: &Dataset, cfg: &LoroConfig, regions: &[String], task: Task) -> Result<Vec<RunRecord>> {
    let start = Instant::now();
    let out = match task {
        Task::HeldOut { variant, region, seed } => vec![held_out_run(dataset, &cfg.train, variant, &regions[region], seed)?],
        Task::UpperBound { variant, seed } => upper_bound_runs(dataset, &cfg.train, variant, seed)?,
    };
    log::info!("{task:?} finished in {:.1} s", start.elapsed().as_secs_f64());
    Ok(out)
}

/// Every (variant, held-out region, seed) run plus the optional upper-bound
/// runs, aggregated into a table. Results do not depend on `jobs`.
pub fn leave_one_region_out(dataset: &Dataset, cfg: &LoroConfig) -> Result<LoroTable> {
    let regions = dataset.region_ids();
    if regions.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "leave-one-region-out needs at least 2 regions, dataset has {}",
            regions.len()
        )));
    }
    if cfg.variants.is_empty() || cfg.seeds.is_empty() {
        return Err(Error::Config("benchmark needs at least one variant and one seed".into()));
    }
    cfg.train.validate()?;
    let mut tasks = Vec::new();
    for &variant in &cfg.variants {
        for region in 0..regions.len() {
            for &seed in &cfg.seeds {
                tasks.push(Task::HeldOut { variant, region, seed });
            }
        }
    }
    if let Some(variant) = cfg.upper_bound {
        tasks.extend(cfg.seeds.iter().map(|&seed| Task::UpperBound { variant, seed }));
    }
    let jobs = match cfg.jobs {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        j => j,
    }
    .min(tasks.len());
    let results: Mutex<Vec<Option<Result<Vec<RunRecord>>>>> = Mutex::new((0..tasks.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&task) = tasks.get(i) else { break };
                let r = execute(dataset, cfg, &regions, task);
                results.lock().expect("result slots")[i] = Some(r);
            });
        }
    });
    let mut runs = Vec::new();
    for r in results.into_inner().expect("result slots") {
        runs.extend(r.expect("every task ran")?);
    }
    LoroTable::build(regions, cfg.seeds.clone(), runs)
}
