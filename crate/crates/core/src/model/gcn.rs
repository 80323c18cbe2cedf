//! GCN forward/backward: `Z_ℓ = act(L Z_{ℓ-1} W_ℓ)` with a row-softmax
//! on the final layer.

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
        let LayerWeights::Gcn { w } = layer else {
            panic!("GCN state expected");
        };
        let agg = ops.laplacian().matmul_dense(&input.view());
        let p = agg.dot(w);
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

/// Backpropagation through every layer. `grad_pre` enters as dLoss/dP_L
/// (softmax plus cross-entropy already folded together by the caller).
pub(super) fn backward(
    ops: &GraphOps,
    state: &ModelState,
    arch: &ModelArch,
    fwd: &ForwardPass,
    mut grad_pre: Array2<f64>,
) -> Vec<LayerWeights> {
    let num_layers = arch.num_layers();
    let lap = ops.laplacian();
    let mut grads: Vec<LayerWeights> = Vec::with_capacity(num_layers);
    for l in (0..num_layers).rev() {
        let LayerWeights::Gcn { w } = &state.layers[l] else {
            panic!("GCN state expected");
        };
        let input = fwd.layer_input(ops.graph(), l + 1);
        let agg = lap.matmul_dense(&input.view());
        let grad_w = agg.t().dot(&grad_pre);
        if l > 0 {
            // dLoss/dZ_{l-1} = Lᵀ G Wᵀ, then through the activation
            let upstream = lap.t_matmul_dense(&grad_pre.view()).dot(&w.t());
            let act_grad = activation_grad(&fwd.pre[l - 1], &fwd.post[l - 1], arch.activation);
            grad_pre = upstream * &act_grad;
        }
        grads.push(LayerWeights::Gcn { w: grad_w });
    }
    grads.reverse();
    grads
}
