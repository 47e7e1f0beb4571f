//! Finite-difference checks of every differentiable graph operation and of
//! the full classifier, shared by the gradient and acceptance suites.

use rand::Rng;
use tpe_core::model::{build_model, ModelConfig, PixelSetBatch, SequenceInput, Variant};
use tpe_core::numerics::{Activation, Graph, Mode, Tensor, Var};
use tpe_core::Result;

use super::{check_inputs, check_store, random_tensor, rel_error, rng, StoreCheck};

pub const INSTANCES: u64 = 20;

/// Reduces a node to a scalar with fixed pseudo-random weights.
fn project(g: &mut Graph, v: Var, seed: u64) -> Result<Var> {
    let n = g.value(v).len();
    let mut r = rng(seed ^ 0x5eed);
    let w = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
    g.weighted_sum(v, w)
}

fn worst(errs: impl IntoIterator<Item = f64>) -> f64 {
    errs.into_iter().fold(0.0, f64::max)
}

pub fn linear() -> f64 {
    worst((0..INSTANCES).map(|seed| {
        let mut r = rng(seed);
        let x = random_tensor(&mut r, &[5, 3], 1.0);
        let w = random_tensor(&mut r, &[3, 4], 1.0);
        let b = random_tensor(&mut r, &[4], 1.0);
        check_inputs(&[x, w, b], |g, v| {
            let y = g.linear(v[0], v[1], v[2])?;
            project(g, y, seed)
        })
    }))
}

pub fn activation(kind: Activation) -> f64 {
    let mut r = rng(11);
    let x = random_tensor(&mut r, &[100], 3.0);
    check_inputs(&[x], |g, v| {
        let y = g.activation(v[0], kind);
        project(g, y, 3)
    })
}

pub fn elementwise() -> f64 {
    worst((0..INSTANCES).map(|seed| {
        let mut r = rng(100 + seed);
        let a = random_tensor(&mut r, &[4, 3], 2.0);
        let b = random_tensor(&mut r, &[4, 3], 2.0);
        check_inputs(&[a, b], |g, v| {
            let s = g.add(v[0], v[1])?;
            let d = g.sub(s, v[1])?;
            let m = g.mul(d, v[1])?;
            let c = g.cos(m);
            let sn = g.sin(v[0]);
            let y = g.add(c, sn)?;
            let y = g.affine(y, -1.5, 0.25);
            project(g, y, seed)
        })
    }))
}

pub fn softmax() -> f64 {
    worst((0..INSTANCES).map(|seed| {
        let mut r = rng(200 + seed);
        let x = random_tensor(&mut r, &[3, 6], 4.0);
        check_inputs(&[x], |g, v| {
            let y = g.softmax(v[0]);
            project(g, y, seed)
        })
    }))
}

pub fn masked_softmax() -> f64 {
    worst((0..INSTANCES).map(|seed| {
        let mut r = rng(300 + seed);
        let x = random_tensor(&mut r, &[3, 5], 3.0);
        let mask: Vec<bool> = (0..15).map(|i| i % 5 < 2 + (i / 5)).collect();
        check_inputs(&[x], |g, v| {
            let y = g.masked_softmax(v[0], &mask)?;
            project(g, y, seed)
        })
    }))
}

/// Training-mode and evaluation-mode errors.
pub fn batch_norm() -> (f64, f64) {
    let (mut train, mut eval) = (0.0f64, 0.0f64);
    for seed in 0..INSTANCES {
        let mut r = rng(400 + seed);
        let x = random_tensor(&mut r, &[6, 4], 2.0);
        let gamma = random_tensor(&mut r, &[4], 1.5);
        let beta = random_tensor(&mut r, &[4], 1.0);
        train = train.max(check_inputs(&[x.clone(), gamma.clone(), beta.clone()], |g, v| {
            let (y, _) = g.batch_norm(v[0], v[1], v[2], None)?;
            project(g, y, seed)
        }));
        let mean = [0.1, -0.2, 0.3, 0.0];
        let var = [1.0, 0.5, 2.0, 0.1];
        eval = eval.max(check_inputs(&[x, gamma, beta], |g, v| {
            let (y, _) = g.batch_norm(v[0], v[1], v[2], Some((&mean, &var)))?;
            project(g, y, seed)
        }));
    }
    (train, eval)
}

/// Finite-difference error and the error against the closed form
/// `(softmax − onehot) / B`.
pub fn cross_entropy() -> (f64, f64) {
    let (mut fd, mut closed) = (0.0f64, 0.0f64);
    for seed in 0..INSTANCES {
        let mut r = rng(500 + seed);
        let logits = random_tensor(&mut r, &[4, 3], 3.0);
        let labels: Vec<usize> = (0..4).map(|_| r.random_range(0..3)).collect();
        fd = fd.max(check_inputs(&[logits.clone()], |g, v| g.cross_entropy(v[0], &labels)));

        let mut g = Graph::new();
        let l = g.variable(logits.clone());
        let loss = g.cross_entropy(l, &labels).unwrap();
        let got = g.backward(loss).unwrap().of(&g, l);
        let mut want = Vec::new();
        for (row, &lab) in logits.data().chunks(3).zip(&labels) {
            let m = row.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            for (j, v) in row.iter().enumerate() {
                let p = (v - m).exp() / z;
                want.push((p - if j == lab { 1.0 } else { 0.0 }) / 4.0);
            }
        }
        closed = closed.max(rel_error(got.data(), &want));
    }
    (fd, closed)
}

/// Mean/std pooling and attention pooling errors.
pub fn pooling() -> (f64, f64) {
    let (mut pool, mut attn) = (0.0f64, 0.0f64);
    for seed in 0..INSTANCES {
        let mut r = rng(600 + seed);
        let pixels = random_tensor(&mut r, &[12, 3], 1.0); // 3 groups of 4
        pool = pool.max(check_inputs(&[pixels], |g, v| {
            let y = g.pool_mean_std(v[0], 4)?;
            project(g, y, seed)
        }));
        let weights = random_tensor(&mut r, &[2, 3], 1.0);
        let values = random_tensor(&mut r, &[6, 4], 1.0);
        attn = attn.max(check_inputs(&[weights, values], |g, v| {
            let y = g.attn_pool(v[0], v[1])?;
            project(g, y, seed)
        }));
    }
    (pool, attn)
}

/// Concatenation, slicing, row gather/scatter, reshape and step stacking.
pub fn structural() -> f64 {
    worst((0..INSTANCES).map(|seed| {
        let mut r = rng(700 + seed);
        let a = random_tensor(&mut r, &[4, 3], 1.0);
        let b = random_tensor(&mut r, &[4, 2], 1.0);
        check_inputs(&[a, b], |g, v| {
            let c = g.concat_cols(&[v[0], v[1], v[0]])?;
            let s = g.slice_cols(c, 2, 4)?;
            let gathered = g.gather_rows(s, &[3, 0, 0])?;
            let scattered = g.scatter_rows(gathered, &[1, 4, 2], 6)?;
            let reshaped = g.reshape(scattered, &[4, 6])?;
            let half = g.slice_cols(reshaped, 0, 3)?;
            let other = g.slice_cols(reshaped, 3, 3)?;
            let stacked = g.stack_steps(&[half, other])?; // [8×3]
            let reshaped = g.reshape(stacked, &[4, 6])?;
            let w = g.variable(Tensor::filled(&[6, 2], 0.3));
            let m = g.matmul(reshaped, w)?;
            project(g, m, seed)
        })
    }))
}

/// Every operation check with its name, worst error and pass threshold.
pub fn op_checks() -> Vec<(String, f64, f64)> {
    let mut out = vec![("linear".to_string(), linear(), 1e-6)];
    for kind in [Activation::Relu, Activation::Gelu, Activation::Tanh, Activation::Sigmoid] {
        let tol = if kind == Activation::Gelu { 1e-5 } else { 1e-4 };
        out.push((format!("{kind:?}").to_lowercase(), activation(kind), tol));
    }
    out.push(("elementwise".into(), elementwise(), 1e-4));
    out.push(("softmax".into(), softmax(), 1e-5));
    out.push(("masked_softmax".into(), masked_softmax(), 1e-5));
    let (bt, be) = batch_norm();
    out.push(("batch_norm_train".into(), bt, 1e-4));
    out.push(("batch_norm_eval".into(), be, 1e-4));
    let (fd, closed) = cross_entropy();
    out.push(("cross_entropy".into(), fd, 1e-6));
    out.push(("cross_entropy_closed_form".into(), closed, 1e-12));
    let (p, a) = pooling();
    out.push(("pool_mean_std".into(), p, 1e-4));
    out.push(("attn_pool".into(), a, 1e-4));
    out.push(("structural".into(), structural(), 1e-4));
    out
}

pub const DESK_T: usize = 12;
pub const DESK_S: usize = 8;
pub const DESK_C: usize = 4;
pub const DESK_K: usize = 4;
/// Coordinates probed per parameter tensor in the end-to-end check.
pub const PROBES: usize = 12;

pub fn desk(variant: Variant) -> ModelConfig {
    ModelConfig { d_model: 32, heads: 4, ..ModelConfig::new(variant, DESK_C, DESK_K) }
}

pub struct Sample {
    pub pixels: Vec<f64>,
    pub positions: Vec<f64>,
}

pub fn random_samples(seed: u64, lengths: &[usize]) -> Vec<Sample> {
    let mut r = rng(seed);
    lengths
        .iter()
        .map(|&t| {
            let mut pos: Vec<f64> = (0..t).map(|_| r.random_range(1.0..2000.0)).collect();
            pos.sort_by(f64::total_cmp);
            Sample { pixels: (0..t * DESK_S * DESK_C).map(|_| r.random_range(0.0..1.0)).collect(), positions: pos }
        })
        .collect()
}

pub fn batch_of(samples: &[Sample]) -> PixelSetBatch {
    let inputs: Vec<SequenceInput> = samples
        .iter()
        .map(|s| SequenceInput { pixels: &s.pixels, positions: &s.positions })
        .collect();
    PixelSetBatch::new(&inputs, DESK_S, DESK_C).unwrap()
}

/// End-to-end parameter gradients of every variant at desk dimensions.
pub fn full_model() -> Vec<(Variant, StoreCheck)> {
    let samples = random_samples(13, &[DESK_T, 10, DESK_T, 8]);
    let batch = batch_of(&samples);
    let labels = [0usize, 1, 2, 3];
    Variant::ALL
        .into_iter()
        .enumerate()
        .map(|(i, variant)| {
            let (model, store) = build_model(desk(variant), 20 + i as u64).unwrap();
            let c = check_store(&store, Some(PROBES), i as u64, |s, g| {
                let logits = model.forward(g, s, &batch, Mode::Train)?;
                g.cross_entropy(logits, &labels)
            });
            (variant, c)
        })
        .collect()
}
