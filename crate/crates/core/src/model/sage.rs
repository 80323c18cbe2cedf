//! GraphSAGE with the mean aggregator:
//! `Z_ℓ = act(Z_{ℓ-1} W_self + mean_{j∈N(i)}(z_j) W_neigh)`.
//!
//! The mean aggregator is linear, which is what makes per-edge blocked
//! aggregation decompose exactly in the trajectory module.

use ndarray::Array2;

use crate::error::Result;
use crate::model::{
    activation_grad, apply_activation, softmax_rows, ForwardPass, GraphOps, LayerWeights,
    ModelArch, ModelState,
};

pub(super) fn forward(ops: &GraphOps, state: &ModelState, arch: &ModelArch) -> Result<ForwardPass> {
    let num_layers = arch.num_layers();
    let mut pre = Vec::with_capacity(num_layers);
    let mut post = Vec::with_capacity(num_layers);
    let mut input = ops.graph().features().clone();
    for (l, layer) in state.layers.iter().enumerate() {
        let LayerWeights::Sage { w_self, w_neigh } = layer else {
            panic!("SAGE state expected");
        };
        let agg = ops.neighbor_mean().matmul_dense(&input.view());
        let p = input.dot(w_self) + agg.dot(w_neigh);
        let z = if l + 1 == num_layers {
            softmax_rows(&p)
        } else {
            apply_activation(&p, arch.activation)
        };
        pre.push(p);
        post.push(z.clone());
        input = z;
    }
    Ok(ForwardPass {
        pre,
        post,
        attention: Vec::new(),
    })
}

pub(super) fn backward(
    ops: &GraphOps,
    state: &ModelState,
    arch: &ModelArch,
    fwd: &ForwardPass,
    mut grad_pre: Array2<f64>,
) -> Vec<LayerWeights> {
    let num_layers = arch.num_layers();
    let mean = ops.neighbor_mean();
    let mut grads: Vec<LayerWeights> = Vec::with_capacity(num_layers);
    for l in (0..num_layers).rev() {
        let LayerWeights::Sage { w_self, w_neigh } = &state.layers[l] else {
            panic!("SAGE state expected");
        };
        let input = fwd.layer_input(ops.graph(), l + 1);
        let agg = mean.matmul_dense(&input.view());
        let grad_self = input.t().dot(&grad_pre);
        let grad_neigh = agg.t().dot(&grad_pre);
        if l > 0 {
            let upstream =
                grad_pre.dot(&w_self.t()) + mean.t_matmul_dense(&grad_pre.view()).dot(&w_neigh.t());
            let act_grad = activation_grad(&fwd.pre[l - 1], &fwd.post[l - 1], arch.activation);
            grad_pre = upstream * &act_grad;
        }
        grads.push(LayerWeights::Sage {
            w_self: grad_self,
            w_neigh: grad_neigh,
        });
    }
    grads.reverse();
    grads
}
