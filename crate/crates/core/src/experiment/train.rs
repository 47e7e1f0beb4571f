//! Mini-batch training with cosine-annealed Adam and best-validation selection.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::metrics::EvalReport;
use crate::encodings::{draw_shift, PositionKind, DEFAULT_MAX_SHIFT_DAYS};
use crate::error::{Error, Result};
use crate::model::{build_model, Model, ModelConfig, PixelSetBatch, SequenceInput, Variant};
use crate::numerics::{Adam, AdamConfig, Checkpoint, Graph, LrSchedule, Mode, ParamStore};
use crate::rng::{indexed_stream, Rng};
use crate::synthgen::{Dataset, Parcel, Split};
use crate::thermal::{ThermalConfig, ThermalTimeline};

/// Samples per evaluation forward pass; predictions do not depend on it.
const EVAL_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub variant: Variant,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub pixel_sample: usize,
    pub max_shift_days: u32,
    pub d_model: usize,
    pub heads: usize,
    pub d_k: usize,
    pub mlp1: Vec<usize>,
    pub decoder: Vec<usize>,
    /// Wavelength base; the variant's default when absent.
    pub tau: Option<f64>,
    pub concat_divisor: f64,
    pub thermal: ThermalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::TpeSin,
            epochs: 100,
            batch_size: 128,
            lr: 1e-3,
            weight_decay: 1e-4,
            seed: 0,
            pixel_sample: 32,
            max_shift_days: DEFAULT_MAX_SHIFT_DAYS,
            d_model: 128,
            heads: 16,
            d_k: 8,
            mlp1: vec![32, 64],
            decoder: vec![64, 32],
            tau: None,
            concat_divisor: 1.0,
            thermal: ThermalConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2 for batch normalization".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("learning rate and weight decay must be finite and non-negative".into()));
        }
        if self.pixel_sample == 0 {
            return Err(Error::Config("pixel sample size must be positive".into()));
        }
        self.thermal.validate()
    }

    pub fn model_config(&self, channels: usize, classes: usize) -> ModelConfig {
        ModelConfig {
            variant: self.variant,
            channels,
            classes,
            d_model: self.d_model,
            heads: self.heads,
            d_k: self.d_k,
            tau: self.tau.unwrap_or_else(|| self.variant.default_tau()),
            mlp1: self.mlp1.clone(),
            decoder: self.decoder.clone(),
            concat_divisor: self.concat_divisor,
        }
    }
}

/// A parcel with the positions its model variant consumes.
#[derive(Clone, Debug)]
pub struct Example {
    pub label: usize,
    pub positions: Vec<f64>,
    /// `T × pixel_count × C`.
    pub pixels: Vec<f64>,
    pub pixel_count: usize,
    pub channels: usize,
}

impl Example {
    pub fn steps(&self) -> usize {
        self.positions.len()
    }

    /// Reflectances of the pixels at `indices`, for every step.
    fn select(&self, indices: &[usize]) -> Vec<f64> {
        let c = self.channels;
        let mut out = Vec::with_capacity(self.steps() * indices.len() * c);
        for t in 0..self.steps() {
            let step = &self.pixels[t * self.pixel_count * c..(t + 1) * self.pixel_count * c];
            for &i in indices {
                out.extend_from_slice(&step[i * c..(i + 1) * c]);
            }
        }
        out
    }

    /// The first `s` pixels, cycling when the parcel has fewer.
    pub fn eval_pixels(&self, s: usize) -> Vec<f64> {
        let idx: Vec<usize> = (0..s).map(|i| i % self.pixel_count).collect();
        self.select(&idx)
    }

    /// `s` pixels without replacement, or with replacement when the parcel
    /// has fewer than `s`. The same pixels are used at every step.
    pub fn sample_pixels(&self, s: usize, rng: &mut Rng) -> Vec<f64> {
        let idx: Vec<usize> = if self.pixel_count >= s {
            rand::seq::index::sample(rng, self.pixel_count, s).into_vec()
        } else {
            (0..s).map(|_| rng.random_range(0..self.pixel_count)).collect()
        };
        self.select(&idx)
    }
}

/// Positions for `variant`: day of year, or growing degree days of the
/// parcel's region. The position-free variant carries days of year.
pub fn prepare_examples(
    dataset: &Dataset,
    parcels: &[&Parcel],
    variant: Variant,
    timelines: &BTreeMap<String, ThermalTimeline>,
) -> Result<Vec<Example>> {
    parcels
        .iter()
        .map(|p| {
            let positions = match variant.position_kind() {
                Some(PositionKind::Thermal) => timelines
                    .get(&p.region_id)
                    .ok_or_else(|| Error::InvalidInput(format!("no timeline for region `{}`", p.region_id)))?
                    .at_days(&p.days)?,
                _ => p.days.iter().map(|&d| d as f64).collect(),
            };
            Ok(Example {
                label: p.label,
                positions,
                pixels: p.pixels.clone(),
                pixel_count: dataset.spec.pixels,
                channels: dataset.spec.channels,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_macro_f1: f64,
    pub val_overall_accuracy: f64,
}

pub struct TrainOutcome {
    pub model: Model,
    /// Parameters of the best validation epoch.
    pub store: ParamStore,
    pub initial: ParamStore,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
}

impl TrainOutcome {
    /// Checkpoint of the selected parameters. The header records what
    /// evaluation needs beyond the model layout.
    pub fn checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        self.model.checkpoint(&self.store, &checkpoint_extras(cfg, self.best_epoch))
    }

    pub fn log_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.log {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }
}

fn checkpoint_extras(cfg: &TrainConfig, best_epoch: usize) -> Vec<(String, String)> {
    [
        ("seed", cfg.seed.to_string()),
        ("pixel_sample", cfg.pixel_sample.to_string()),
        ("thermal.t_base", cfg.thermal.t_base.to_string()),
        ("thermal.t_cap", cfg.thermal.t_cap.to_string()),
        ("thermal.start_day", cfg.thermal.start_day.to_string()),
        ("best_epoch", best_epoch.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

fn header_parse<T: std::str::FromStr>(ckpt: &Checkpoint, key: &str) -> Result<T> {
    ckpt.header_value(key)
        .ok_or_else(|| Error::Checkpoint(format!("header lacks `{key}`")))?
        .parse()
        .map_err(|_| Error::Checkpoint(format!("header `{key}` is malformed")))
}

/// Evaluates a saved model on `region`, restricted to `split` when given.
pub fn evaluate_checkpoint(ckpt: &Checkpoint, dataset: &Dataset, region: &str, split: Option<Split>) -> Result<EvalReport> {
    let (model, store) = Model::from_checkpoint(ckpt)?;
    let (c, k) = (dataset.spec.channels, dataset.classes());
    if model.config.channels != c || model.config.classes != k {
        return Err(Error::Checkpoint(format!(
            "checkpoint expects {} channels and {} classes, dataset has {c} and {k}",
            model.config.channels, model.config.classes
        )));
    }
    if dataset.spec.region(region).is_none() {
        return Err(Error::InvalidInput(format!("dataset has no region `{region}`")));
    }
    let thermal = ThermalConfig {
        t_base: header_parse(ckpt, "thermal.t_base")?,
        t_cap: header_parse(ckpt, "thermal.t_cap")?,
        start_day: header_parse(ckpt, "thermal.start_day")?,
    };
    let pixel_sample: usize = header_parse(ckpt, "pixel_sample")?;
    let seed: u64 = header_parse(ckpt, "seed")?;
    let parcels: Vec<&Parcel> = dataset.parcels_in(region, split).collect();
    if parcels.is_empty() {
        return Err(Error::InvalidInput(format!("region `{region}` has no parcels in the requested split")));
    }
    let examples = prepare_examples(dataset, &parcels, model.config.variant, &dataset.timelines(&thermal)?)?;
    evaluate_examples(&model, &store, &examples, pixel_sample, region, seed)
}

fn batch_from(samples: &[(Vec<f64>, Vec<f64>)], s: usize, c: usize) -> Result<PixelSetBatch> {
    let inputs: Vec<SequenceInput> = samples
        .iter()
        .map(|(pixels, positions)| SequenceInput { pixels, positions })
        .collect();
    PixelSetBatch::new(&inputs, s, c)
}

/// Contiguous batches of `size`, with a trailing single sample folded into
/// the previous batch so every batch has at least two samples.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        out.pop();
        let n = out.len();
        let start = (n - 1) * size;
        out[n - 1] = &order[start..];
    }
    out
}

/// Evaluation-mode logits, one row of `K` per example.
pub fn logits(model: &Model, store: &ParamStore, examples: &[Example], pixel_sample: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(EVAL_CHUNK) {
        let samples: Vec<(Vec<f64>, Vec<f64>)> =
            chunk.iter().map(|e| (e.eval_pixels(pixel_sample), e.positions.clone())).collect();
        let batch = batch_from(&samples, pixel_sample, model.config.channels)?;
        let t = model.predict(store, &batch)?;
        out.extend(t.data().chunks(model.config.classes).map(<[f64]>::to_vec));
    }
    Ok(out)
}

/// Evaluation-mode predictions with deterministic pixel selection.
pub fn predict(model: &Model, store: &ParamStore, examples: &[Example], pixel_sample: usize) -> Result<Vec<usize>> {
    Ok(logits(model, store, examples, pixel_sample)?
        .iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect())
}

pub fn evaluate_examples(
    model: &Model,
    store: &ParamStore,
    examples: &[Example],
    pixel_sample: usize,
    region_id: &str,
    seed: u64,
) -> Result<EvalReport> {
    let preds = predict(model, store, examples, pixel_sample)?;
    let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
    EvalReport::from_predictions(&preds, &labels, model.config.classes, region_id, model.config.variant.name(), seed)
}

/// Trains `cfg.variant` on `train`, selecting the epoch with the best
/// validation macro F1 (earliest on ties).
pub fn train(
    cfg: &TrainConfig,
    train: &[Example],
    val: &[Example],
    channels: usize,
    classes: usize,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.len() < 2 || val.is_empty() {
        return Err(Error::InvalidInput(format!(
            "training needs at least 2 training and 1 validation samples, got {} and {}",
            train.len(),
            val.len()
        )));
    }
    if let Some(e) = train.iter().chain(val).find(|e| e.label >= classes || e.channels != channels) {
        return Err(Error::InvalidInput(format!("sample with label {} or {} channels does not fit the model", e.label, e.channels)));
    }
    let (model, mut store) = build_model(cfg.model_config(channels, classes), cfg.seed)?;
    let initial = store.clone();
    let mut opt = Adam::new(AdamConfig { weight_decay: cfg.weight_decay, ..AdamConfig::default() });
    let mut schedule = LrSchedule::new(cfg.lr, cfg.epochs);
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = schedule.current()?;
        let e = epoch as u64;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut indexed_stream(cfg.seed, "train.shuffle", &[e]));
        let mut pixel_rng = indexed_stream(cfg.seed, "train.pixels", &[e]);
        let mut shift_rng = indexed_stream(cfg.seed, "train.shift", &[e]);
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for idx in batches(&order, cfg.batch_size) {
            let samples: Vec<(Vec<f64>, Vec<f64>)> = idx
                .iter()
                .map(|&i| {
                    let ex = &train[i];
                    let pixels = ex.sample_pixels(cfg.pixel_sample, &mut pixel_rng);
                    let positions = if cfg.variant.uses_shift_aug() {
                        let d = draw_shift(&mut shift_rng, cfg.max_shift_days) as f64;
                        ex.positions.iter().map(|p| p + d).collect()
                    } else {
                        ex.positions.clone()
                    };
                    (pixels, positions)
                })
                .collect();
            let labels: Vec<usize> = idx.iter().map(|&i| train[i].label).collect();
            let batch = batch_from(&samples, cfg.pixel_sample, channels)?;
            let mut g = Graph::new();
            let logits = model.forward(&mut g, &store, &batch, Mode::Train)?;
            let loss = g.cross_entropy(logits, &labels)?;
            loss_sum += g.value(loss).data()[0] * idx.len() as f64;
            seen += idx.len();
            let grads = g.backward(loss)?.params(&g);
            store.apply_buffer_updates(g.take_buffer_updates())?;
            opt.step(&mut store, &grads, lr)?;
        }
        let report = evaluate_examples(&model, &store, val, cfg.pixel_sample, "validation", cfg.seed)?;
        log.push(EpochLog {
            epoch: epoch + 1,
            lr,
            train_loss: loss_sum / seen as f64,
            val_macro_f1: report.macro_f1,
            val_overall_accuracy: report.overall_accuracy,
        });
        if best.as_ref().is_none_or(|(f1, _, _)| report.macro_f1 > *f1) {
            best = Some((report.macro_f1, epoch + 1, store.clone()));
        }
        schedule.advance();
    }
    let (_, best_epoch, store) = best.expect("at least one epoch");
    Ok(TrainOutcome { model, store, initial, log, best_epoch })
}
