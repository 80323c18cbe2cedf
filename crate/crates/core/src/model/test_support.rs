//! Shared oracles for model tests: central finite differences of the
//! training loss with respect to every trainable scalar, and seeded
//! random graphs small enough to brute-force.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::graph::GraphData;
use crate::model::{
    loss_and_gradients, masked_cross_entropy, ArchKind, ForwardPass, GatHead, GraphOps,
    LayerWeights, ModelArch, ModelState,
};

/// Seeded Erdős–Rényi-style graph with random features and labels; every
/// node is in the training mask.
pub fn random_graph(n: usize, p: f64, feat_dim: usize, classes: usize, seed: u64) -> GraphData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            if rng.random_range(0.0..1.0) < p {
                edges.push((u, v));
            }
        }
    }
    let features = Array2::from_shape_fn((n, feat_dim), |_| rng.random_range(-1.0..1.0));
    let mut labels = Array2::<f64>::zeros((n, classes));
    for i in 0..n {
        let c = rng.random_range(0..classes);
        labels[[i, c]] = 1.0;
    }
    GraphData::new(
        features,
        labels,
        edges,
        vec![true; n],
        vec![false; n],
        vec![false; n],
        vec![false; n],
    )
    .unwrap()
}

fn loss_at(ops: &GraphOps, state: &ModelState, arch: &ModelArch) -> f64 {
    let fwd: ForwardPass = crate::model::forward(ops, state, arch).unwrap();
    masked_cross_entropy(fwd.output(), ops.graph().labels(), ops.graph().train_mask()).unwrap()
}

/// Visits every trainable scalar of a layer in a fixed order.
fn with_each_param(layer: &mut LayerWeights, mut f: impl FnMut(&mut f64)) {
    match layer {
        LayerWeights::Gcn { w } => w.iter_mut().for_each(&mut f),
        LayerWeights::Sage { w_self, w_neigh } => {
            w_self.iter_mut().for_each(&mut f);
            w_neigh.iter_mut().for_each(&mut f);
        }
        LayerWeights::Gat { heads } => {
            for GatHead { w, a_src, a_dst } in heads {
                w.iter_mut().for_each(&mut f);
                a_src.iter_mut().for_each(&mut f);
                a_dst.iter_mut().for_each(&mut f);
            }
        }
    }
}

fn param_count(layer: &LayerWeights) -> usize {
    let mut n = 0;
    let mut probe = layer.clone();
    with_each_param(&mut probe, |_| n += 1);
    n
}

/// Central-difference gradient of the masked cross-entropy loss for every
/// parameter, flattened per layer in the same order the analytic path uses.
pub fn finite_diff_gradients(
    ops: &GraphOps,
    state: &ModelState,
    arch: &ModelArch,
    step: f64,
) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(state.layers.len());
    for l in 0..state.layers.len() {
        let count = param_count(&state.layers[l]);
        let mut grads = Vec::with_capacity(count);
        for idx in 0..count {
            let mut plus = state.clone();
            let mut k = 0;
            with_each_param(&mut plus.layers[l], |v| {
                if k == idx {
                    *v += step;
                }
                k += 1;
            });
            let mut minus = state.clone();
            let mut k = 0;
            with_each_param(&mut minus.layers[l], |v| {
                if k == idx {
                    *v -= step;
                }
                k += 1;
            });
            let f_plus = loss_at(ops, &plus, arch);
            let f_minus = loss_at(ops, &minus, arch);
            grads.push((f_plus - f_minus) / (2.0 * step));
        }
        out.push(grads);
    }
    out
}

/// Flattens an analytic gradient layer to the `with_each_param` order.
pub fn flatten_gradient(layer: &LayerWeights) -> Vec<f64> {
    let mut out = Vec::new();
    let mut probe = layer.clone();
    with_each_param(&mut probe, |v| out.push(*v));
    out
}

/// Max over parameters of `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn max_gradient_rel_error(ops: &GraphOps, state: &ModelState, arch: &ModelArch) -> f64 {
    let (_, analytic, _) = loss_and_gradients(ops, state, arch).unwrap();
    let numeric = finite_diff_gradients(ops, state, arch, 1e-5);
    let mut worst = 0.0f64;
    for (a_layer, n_layer) in analytic.iter().zip(&numeric) {
        let a_flat = flatten_gradient(a_layer);
        assert_eq!(a_flat.len(), n_layer.len());
        for (a, n) in a_flat.iter().zip(n_layer) {
            let denom = a.abs().max(n.abs()).max(1e-6);
            worst = worst.max((a - n).abs() / denom);
        }
    }
    worst
}

/// Architecture helper used across the test suites.
pub fn arch_for(kind: ArchKind, dims: Vec<usize>) -> ModelArch {
    ModelArch::new(kind, dims)
}
