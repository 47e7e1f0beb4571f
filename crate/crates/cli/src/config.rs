//! Flat `key = value` run configuration with a closed key set.

use std::collections::BTreeMap;
use std::path::PathBuf;

use tpe_core::experiment::{LoroConfig, TrainConfig};
use tpe_core::model::{Model, Variant};
use tpe_core::thermal::ThermalConfig;

/// Every accepted key with its default value. An empty default means unset.
const SCHEMA: &[(&str, &str)] = &[
    ("seed", "0"),
    ("data.dir", ""),
    ("data.spec", ""),
    ("data.regions", ""),
    ("output.dir", "out"),
    ("pe.kind", "tpe_sin"),
    ("pe.tau", ""),
    ("pe.max_shift_days", "60"),
    ("model.d_model", "128"),
    ("model.heads", "16"),
    ("model.d_k", "8"),
    ("model.mlp1", "32,64"),
    ("model.decoder", "64,32"),
    ("model.concat_divisor", "1"),
    ("train.epochs", "100"),
    ("train.batch_size", "128"),
    ("train.pixel_sample", "32"),
    ("optimizer.lr", "0.001"),
    ("optimizer.weight_decay", "0.0001"),
    ("thermal_time.t_base", "0"),
    ("thermal_time.t_cap", "30"),
    ("thermal_time.start_day", "1"),
    ("loro.variants", "none,calendar,calendar_shiftaug,tpe_sin,tpe_concat,tpe_fourier,tpe_recurrent"),
    ("loro.seeds", "1,2,3"),
    ("loro.upper_bound", "off"),
    ("loro.jobs", "1"),
];

/// A rejected configuration; maps to the usage-error exit status.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { values: SCHEMA.iter().map(|&(k, v)| (k, v.to_string())).collect() }
    }
}

fn schema_key(key: &str) -> Result<&'static str> {
    SCHEMA
        .iter()
        .map(|&(k, _)| k)
        .find(|k| *k == key)
        .ok_or_else(|| ConfigError(format!("unknown config key `{key}`")))
}

impl RunConfig {
    /// Parses file text; `#` starts a comment, blank lines are skipped.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ConfigError(format!("{origin}:{}: expected `key = value`", i + 1)))?;
            let key = schema_key(k.trim()).map_err(|e| ConfigError(format!("{origin}:{}: {e}", i + 1)))?;
            if let Some(prev) = seen.insert(key, i + 1) {
                return Err(ConfigError(format!("{origin}:{}: `{key}` already set on line {prev}", i + 1)));
            }
            cfg.values.insert(key, v.trim().to_string());
        }
        Ok(cfg)
    }

    /// Applies one `key=value` override.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| ConfigError(format!("override `{assignment}` is not `key=value`")))?;
        let key = schema_key(k.trim())?;
        self.values.insert(key, v.trim().to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    /// The effective configuration in the same format it is read from.
    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key);
        v.parse().map_err(|_| ConfigError(format!("config key `{key}`: cannot parse `{v}`")))
    }

    fn list<T: std::str::FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let v = self.get(key);
        if v.is_empty() {
            return Ok(Vec::new());
        }
        v.split(',')
            .map(|p| p.trim().parse().map_err(|_| ConfigError(format!("config key `{key}`: cannot parse `{p}`"))))
            .collect()
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        let v = self.get(key);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    pub fn data_dir(&self) -> Option<PathBuf> {
        self.path("data.dir")
    }

    pub fn data_spec(&self) -> Option<PathBuf> {
        self.path("data.spec")
    }

    pub fn data_regions(&self) -> Vec<String> {
        self.list("data.regions").unwrap_or_default()
    }

    pub fn output_dir(&self) -> PathBuf {
        PathBuf::from(self.get("output.dir"))
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let tau = match self.get("pe.tau") {
            "" => None,
            _ => Some(self.parsed::<f64>("pe.tau")?),
        };
        let cfg = TrainConfig {
            variant: self.parsed::<Variant>("pe.kind")?,
            epochs: self.parsed("train.epochs")?,
            batch_size: self.parsed("train.batch_size")?,
            lr: self.parsed("optimizer.lr")?,
            weight_decay: self.parsed("optimizer.weight_decay")?,
            seed: self.parsed("seed")?,
            pixel_sample: self.parsed("train.pixel_sample")?,
            max_shift_days: self.parsed("pe.max_shift_days")?,
            d_model: self.parsed("model.d_model")?,
            heads: self.parsed("model.heads")?,
            d_k: self.parsed("model.d_k")?,
            mlp1: self.list("model.mlp1")?,
            decoder: self.list("model.decoder")?,
            tau,
            concat_divisor: self.parsed("model.concat_divisor")?,
            thermal: ThermalConfig {
                t_base: self.parsed("thermal_time.t_base")?,
                t_cap: self.parsed("thermal_time.t_cap")?,
                start_day: self.parsed("thermal_time.start_day")?,
            },
        };
        cfg.validate().map_err(|e| ConfigError(e.to_string()))?;
        // Layout errors (head count, widths) surface before any data is read.
        Model::new(cfg.model_config(1, 2)).map_err(|e| ConfigError(e.to_string()))?;
        Ok(cfg)
    }

    pub fn loro_config(&self) -> Result<LoroConfig> {
        let upper_bound = match self.get("loro.upper_bound") {
            "off" => None,
            _ => Some(self.parsed::<Variant>("loro.upper_bound")?),
        };
        let cfg = LoroConfig {
            train: self.train_config()?,
            variants: self.list("loro.variants")?,
            seeds: self.list("loro.seeds")?,
            upper_bound,
            jobs: self.parsed("loro.jobs")?,
        };
        if cfg.variants.is_empty() || cfg.seeds.is_empty() {
            return Err(ConfigError("loro.variants and loro.seeds must not be empty".into()));
        }
        Ok(cfg)
    }

    /// Checks every key's value, so bad input fails before work starts.
    pub fn validate(&self) -> Result<()> {
        self.loro_config()?;
        if self.data_dir().is_some() && self.data_spec().is_some() {
            return Err(ConfigError("set at most one of data.dir and data.spec".into()));
        }
        if self.get("output.dir").is_empty() {
            return Err(ConfigError("output.dir must not be empty".into()));
        }
        Ok(())
    }
}
