//! Analytic gradients of every differentiable graph operation against
//! central finite differences.

mod common;

use common::grad_suite as suite;
use common::{random_tensor, rng};
use tpe_core::numerics::{Activation, Graph};

#[test]
fn linear_matches_finite_differences() {
    let err = suite::linear();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn activations_match_finite_differences() {
    for kind in [Activation::Relu, Activation::Gelu, Activation::Tanh, Activation::Sigmoid] {
        let err = suite::activation(kind);
        let tol = if kind == Activation::Gelu { 1e-5 } else { 1e-4 };
        assert!(err < tol, "{kind:?}: {err}");
    }
}

#[test]
fn elementwise_ops_match_finite_differences() {
    let err = suite::elementwise();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn softmax_jacobian_matches_finite_differences() {
    let err = suite::softmax();
    assert!(err < 1e-5, "{err}");
}

#[test]
fn masked_softmax_matches_finite_differences() {
    let err = suite::masked_softmax();
    assert!(err < 1e-5, "{err}");
}

#[test]
fn batch_norm_matches_finite_differences() {
    let (train, eval) = suite::batch_norm();
    assert!(train < 1e-4, "train: {train}");
    assert!(eval < 1e-4, "eval: {eval}");
}

#[test]
fn cross_entropy_gradient_is_softmax_minus_onehot() {
    let (fd, closed) = suite::cross_entropy();
    assert!(fd < 1e-6, "{fd}");
    assert!(closed < 1e-12, "{closed}");
}

#[test]
fn pooling_and_attention_match_finite_differences() {
    let (pool, attn) = suite::pooling();
    assert!(pool < 1e-4, "pool: {pool}");
    assert!(attn < 1e-4, "attn: {attn}");
}

#[test]
fn structural_ops_match_finite_differences() {
    let err = suite::structural();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn composed_graph_is_bitwise_deterministic() {
    let run = || {
        let mut r = rng(9);
        let x = random_tensor(&mut r, &[8, 5], 1.0);
        let w = random_tensor(&mut r, &[5, 3], 1.0);
        let b = random_tensor(&mut r, &[3], 1.0);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.constant(x), g.variable(w), g.variable(b));
        let h = g.linear(xv, wv, bv).unwrap();
        let h = g.activation(h, Activation::Gelu);
        let loss = g.cross_entropy(h, &[0, 1, 2, 0, 1, 2, 0, 1]).unwrap();
        let grad = g.backward(loss).unwrap().of(&g, wv);
        (g.value(loss).data()[0].to_bits(), grad.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}
