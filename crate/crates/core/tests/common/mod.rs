//! Central finite-difference oracle shared by the gradient and acceptance suites.
#![allow(dead_code)]

pub mod grad_suite;
pub mod thermal_oracle;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tpe_core::numerics::{Graph, ParamStore, Tensor, Var};
use tpe_core::Result;

pub const FD_STEP: f64 = 1e-5;

/// Norm-wise relative error `‖a − n‖ / max(‖a‖, ‖n‖)`, with an absolute floor
/// for gradients that are identically tiny.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}

/// Like [`rel_error`] but never divides by less than `floor`, for tensors
/// whose exact gradient vanishes (biases feeding a batch normalization).
pub fn rel_error_floor(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / na.max(nn).max(floor)
}

/// Absolute floor for per-tensor comparisons: FD noise at step 1e-5 on an
/// O(1) loss is about 1e-11 per coordinate.
pub const GRAD_FLOOR: f64 = 1e-6;

pub struct StoreCheck {
    /// Worst per-tensor error (floored) and its tensor.
    pub worst: f64,
    pub worst_name: String,
    /// Norm-wise error over every probed coordinate together.
    pub global: f64,
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Checks the gradient of a scalar function of leaf tensors. `build` maps the
/// leaves to a scalar node. Returns the worst relative error over the inputs.
pub fn check_inputs(
    inputs: &[Tensor],
    build: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let loss = build(&mut g, &vars).unwrap();
    let grads = g.backward(loss).unwrap();
    let eval = |ts: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.variable(t.clone())).collect();
        let l = build(&mut g, &vars).unwrap();
        g.value(l).data()[0]
    };
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        let analytic = grads.of(&g, vars[i]);
        let mut numeric = vec![0.0; t.len()];
        for k in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[k] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[k] -= FD_STEP;
            numeric[k] = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
        }
        worst = worst.max(rel_error(analytic.data(), &numeric));
    }
    worst
}

/// Checks parameter gradients of a store-driven loss. At most `per_tensor`
/// coordinates of each trainable tensor are probed (all when `None`).
pub fn check_store(
    store: &ParamStore,
    per_tensor: Option<usize>,
    seed: u64,
    build: impl Fn(&ParamStore, &mut Graph) -> Result<Var>,
) -> StoreCheck {
    let mut g = Graph::new();
    let loss = build(store, &mut g).unwrap();
    let grads = g.backward(loss).unwrap().params(&g);
    let eval = |s: &ParamStore| -> f64 {
        let mut g = Graph::new();
        let l = build(s, &mut g).unwrap();
        g.value(l).data()[0]
    };
    let mut pick = rng(seed);
    let mut out = StoreCheck { worst: 0.0, worst_name: String::new(), global: 0.0 };
    let (mut all_a, mut all_n) = (Vec::new(), Vec::new());
    let names: Vec<String> = store.trainable().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let t = store.get(&name).unwrap();
        let coords: Vec<usize> = match per_tensor {
            Some(k) if k < t.len() => (0..k).map(|_| pick.random_range(0..t.len())).collect(),
            _ => (0..t.len()).collect(),
        };
        let zero = Tensor::zeros(t.shape());
        let analytic = grads.get(&name).unwrap_or(&zero);
        let mut a = Vec::with_capacity(coords.len());
        let mut n = Vec::with_capacity(coords.len());
        for &k in &coords {
            let mut plus = store.clone();
            plus.get_mut(&name).unwrap().data_mut()[k] += FD_STEP;
            let mut minus = store.clone();
            minus.get_mut(&name).unwrap().data_mut()[k] -= FD_STEP;
            n.push((eval(&plus) - eval(&minus)) / (2.0 * FD_STEP));
            a.push(analytic.data()[k]);
        }
        let e = rel_error_floor(&a, &n, GRAD_FLOOR);
        if e > out.worst {
            out.worst = e;
            out.worst_name = name.clone();
        }
        all_a.extend(a);
        all_n.extend(n);
    }
    out.global = rel_error(&all_a, &all_n);
    out
}
