//! `tpe`: data generation, growing degree days, training, evaluation and the
//! leave-one-region-out benchmark.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use config::{ConfigError, RunConfig};
use tpe_core::experiment::{evaluate_checkpoint, leave_one_region_out, timelines, train_on_regions, LoroTable};
use tpe_core::io::write_atomic;
use tpe_core::numerics::Checkpoint;
use tpe_core::synthgen::{gen_dataset, load_dataset, write_dataset, Dataset, DatasetSpec, Split};
use tpe_core::thermal::{accumulate, load_temperature_csv, ThermalConfig};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const CONFIG_FILE: &str = "config.txt";
pub const TABLE_FILE: &str = "loro_table.json";
pub const RUNS_CSV_FILE: &str = "loro_runs.csv";

#[derive(Parser)]
#[command(name = "tpe", about = "Thermal positional encoding for crop-type time series")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-region dataset from a JSON spec.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print cumulative growing degree days of one region as CSV.
    Gdd {
        #[arg(long)]
        temps: PathBuf,
        #[arg(long)]
        region: String,
        #[arg(long, default_value_t = 0.0)]
        t_base: f64,
        #[arg(long, default_value_t = 30.0)]
        t_cap: f64,
        #[arg(long, default_value_t = 1)]
        start_day: usize,
    },
    /// Train one model on the configured dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override one config key, e.g. `optimizer.lr=0`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint on one region and print the report as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        region: String,
        /// Restrict to one split; all parcels of the region otherwise.
        #[arg(long)]
        split: Option<Split>,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the leave-one-region-out benchmark.
    Loro {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Worker threads; overrides `loro.jobs`.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Render a benchmark table as text.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

fn load_config(path: &Path, overrides: &[String]) -> anyhow::Result<RunConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let mut cfg = RunConfig::parse(&text, &path.display().to_string())?;
    for o in overrides {
        cfg.set(o)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dataset_for(cfg: &RunConfig) -> anyhow::Result<Dataset> {
    match (cfg.data_dir(), cfg.data_spec()) {
        (Some(dir), None) => Ok(load_dataset(&dir)?),
        (None, Some(spec)) => {
            let text = std::fs::read_to_string(&spec).with_context(|| format!("reading spec {}", spec.display()))?;
            let spec: DatasetSpec = serde_json::from_str(&text).with_context(|| format!("parsing {}", spec.display()))?;
            Ok(gen_dataset(&spec)?)
        }
        _ => Err(ConfigError("set exactly one of data.dir and data.spec".into()).into()),
    }
}

fn train_regions(cfg: &RunConfig, dataset: &Dataset) -> anyhow::Result<Vec<String>> {
    let all = dataset.region_ids();
    let wanted = cfg.data_regions();
    if let Some(bad) = wanted.iter().find(|r| !all.contains(r)) {
        bail!("data.regions names unknown region `{bad}`");
    }
    Ok(all.into_iter().filter(|r| wanted.is_empty() || wanted.contains(r)).collect())
}

fn cmd_gen_data(spec: &Path, out: &Path) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(spec).with_context(|| format!("reading spec {}", spec.display()))?;
    let spec: DatasetSpec = serde_json::from_str(&text).with_context(|| format!("parsing {}", spec.display()))?;
    let dataset = gen_dataset(&spec)?;
    write_dataset(&dataset, out)?;
    log::info!("wrote {} parcels to {}", dataset.parcels.len(), out.display());
    Ok(())
}

fn cmd_gdd(temps: &Path, region: &str, cfg: ThermalConfig) -> anyhow::Result<()> {
    let series = load_temperature_csv(temps)?;
    let s = series
        .iter()
        .find(|s| s.region_id() == region)
        .with_context(|| format!("region `{region}` not in {}", temps.display()))?;
    let tl = accumulate(s, &cfg)?;
    let mut out = String::from("day_of_year,gdd\n");
    for (i, g) in tl.gdd.iter().enumerate() {
        out.push_str(&format!("{},{g}\n", i + 1));
    }
    print!("{out}");
    Ok(())
}

fn cmd_train(cfg: &RunConfig) -> anyhow::Result<()> {
    let dataset = dataset_for(cfg)?;
    let tc = cfg.train_config()?;
    let regions = train_regions(cfg, &dataset)?;
    let refs: Vec<&str> = regions.iter().map(String::as_str).collect();
    let start = Instant::now();
    let outcome = train_on_regions(&dataset, &tc, &timelines(&dataset, &tc)?, &refs)?;
    log::info!("trained {} in {:.1} s, best epoch {}", tc.variant, start.elapsed().as_secs_f64(), outcome.best_epoch);
    let dir = cfg.output_dir();
    write_atomic(&dir.join(CHECKPOINT_FILE), &outcome.checkpoint(&tc).encode())?;
    write_atomic(&dir.join(TRAIN_LOG_FILE), outcome.log_jsonl()?.as_bytes())?;
    write_atomic(&dir.join(CONFIG_FILE), cfg.to_text().as_bytes())?;
    Ok(())
}

fn cmd_eval(checkpoint: &Path, data: &Path, region: &str, split: Option<Split>, out: Option<&Path>) -> anyhow::Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let dataset = load_dataset(data)?;
    let report = evaluate_checkpoint(&ckpt, &dataset, region, split)?;
    let json = serde_json::to_string_pretty(&report)? + "\n";
    if let Some(path) = out {
        write_atomic(path, json.as_bytes())?;
    }
    print!("{json}");
    Ok(())
}

fn cmd_loro(cfg: &RunConfig, jobs: Option<usize>) -> anyhow::Result<()> {
    let dataset = dataset_for(cfg)?;
    let mut lc = cfg.loro_config()?;
    if let Some(j) = jobs {
        lc.jobs = j;
    }
    let start = Instant::now();
    let table = leave_one_region_out(&dataset, &lc)?;
    log::info!("benchmark finished in {:.1} s", start.elapsed().as_secs_f64());
    let dir = cfg.output_dir();
    write_atomic(&dir.join(TABLE_FILE), (serde_json::to_string_pretty(&table)? + "\n").as_bytes())?;
    write_atomic(&dir.join(RUNS_CSV_FILE), table.to_csv()?.as_bytes())?;
    write_atomic(&dir.join(CONFIG_FILE), cfg.to_text().as_bytes())?;
    print!("{}", table.render());
    Ok(())
}

fn cmd_report(input: &Path) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
    let table: LoroTable = serde_json::from_str(&text).with_context(|| format!("parsing {}", input.display()))?;
    print!("{}", table.render());
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData { spec, out } => cmd_gen_data(&spec, &out),
        Command::Gdd { temps, region, t_base, t_cap, start_day } => {
            let cfg = ThermalConfig { t_base, t_cap, start_day };
            cfg.validate().map_err(|e| ConfigError(e.to_string()))?;
            cmd_gdd(&temps, &region, cfg)
        }
        Command::Train { config, overrides } => cmd_train(&load_config(&config, &overrides)?),
        Command::Eval { checkpoint, data, region, split, out } => {
            cmd_eval(&checkpoint, &data, &region, split, out.as_deref())
        }
        Command::Loro { config, overrides, jobs } => cmd_loro(&load_config(&config, &overrides)?, jobs),
        Command::Report { input } => cmd_report(&input),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
