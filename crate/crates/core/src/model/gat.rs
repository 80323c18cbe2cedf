//! GAT layers: per-head attention softmax over `N(i) ∪ {i}` with
//! LeakyReLU logits, head outputs averaged so layer widths stay
//! architecture-independent.

use ndarray::{Array1, Array2};

use crate::error::Result;
use crate::model::{
    activation_grad, apply_activation, softmax_rows, ForwardPass, GraphOps, LayerWeights,
    ModelArch, ModelState,
};

const LEAKY_SLOPE: f64 = 0.2;

fn leaky(x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

fn leaky_grad(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

/// Attention state of one head at one layer.
#[derive(Debug, Clone)]
pub struct HeadAttention {
    /// Per node `i`: `(j, raw logit before LeakyReLU, coefficient a_ij)`
    /// over `j ∈ N(i) ∪ {i}`, self last. Coefficients of each node sum
    /// to one.
    pub per_node: Vec<Vec<(usize, f64, f64)>>,
}

impl HeadAttention {
    pub fn coefficient(&self, i: usize, j: usize) -> Option<f64> {
        self.per_node[i]
            .iter()
            .find(|&&(n, _, _)| n == j)
            .map(|&(_, _, a)| a)
    }
}

fn head_forward(
    ops: &GraphOps,
    q: &Array2<f64>,
    a_src: &Array1<f64>,
    a_dst: &Array1<f64>,
) -> (Array2<f64>, HeadAttention) {
    let g = ops.graph();
    let n = g.num_nodes();
    let alpha_src: Vec<f64> = (0..n).map(|i| q.row(i).dot(a_src)).collect();
    let alpha_dst: Vec<f64> = (0..n).map(|j| q.row(j).dot(a_dst)).collect();

    let mut out = Array2::<f64>::zeros((n, q.ncols()));
    let mut per_node = Vec::with_capacity(n);
    for i in 0..n {
        let mut entries: Vec<(usize, f64, f64)> = g
            .neighbors(i)
            .iter()
            .copied()
            .chain(std::iter::once(i))
            .map(|j| {
                let r = alpha_src[i] + alpha_dst[j];
                (j, r, leaky(r))
            })
            .collect();
        let max = entries
            .iter()
            .map(|&(_, _, s)| s)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for e in &mut entries {
            e.2 = (e.2 - max).exp();
            denom += e.2;
        }
        let mut row = out.row_mut(i);
        for e in &mut entries {
            e.2 /= denom;
            row.scaled_add(e.2, &q.row(e.0));
        }
        per_node.push(entries);
    }
    (out, HeadAttention { per_node })
}

pub(super) fn forward(ops: &GraphOps, state: &ModelState, arch: &ModelArch) -> Result<ForwardPass> {
    let num_layers = arch.num_layers();
    let mut pre = Vec::with_capacity(num_layers);
    let mut post = Vec::with_capacity(num_layers);
    let mut attention = Vec::with_capacity(num_layers);
    let mut input = ops.graph().features().clone();
    for (l, layer) in state.layers.iter().enumerate() {
        let LayerWeights::Gat { heads } = layer else {
            panic!("GAT state expected");
        };
        let dout = heads[0].w.ncols();
        let mut p = Array2::<f64>::zeros((input.nrows(), dout));
        let mut layer_attention = Vec::with_capacity(heads.len());
        let scale = 1.0 / heads.len() as f64;
        for head in heads {
            let q = input.dot(&head.w);
            let (out, att) = head_forward(ops, &q, &head.a_src, &head.a_dst);
            p.scaled_add(scale, &out);
            layer_attention.push(att);
        }
        let z = if l + 1 == num_layers {
            softmax_rows(&p)
        } else {
            apply_activation(&p, arch.activation)
        };
        pre.push(p);
        post.push(z.clone());
        attention.push(layer_attention);
        input = z;
    }
    Ok(ForwardPass {
        pre,
        post,
        attention,
    })
}

/// Gradient of one head given dLoss/d(head output), following the three
/// paths: the value path through `Σ_j a_ij q_j`, and the two logit paths
/// through the attention softmax and LeakyReLU into `q_i`, `q_j`, and the
/// attention vectors.
#[allow(clippy::too_many_arguments)]
fn head_backward(
    q: &Array2<f64>,
    att: &HeadAttention,
    a_src: &Array1<f64>,
    a_dst: &Array1<f64>,
    grad_out: &Array2<f64>,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let n = q.nrows();
    let dout = q.ncols();
    let mut grad_q = Array2::<f64>::zeros((n, dout));
    let mut grad_a_src = Array1::<f64>::zeros(dout);
    let mut grad_a_dst = Array1::<f64>::zeros(dout);

    for i in 0..n {
        let gi = grad_out.row(i);
        let entries = &att.per_node[i];
        // value-path dot products and softmax backprop
        let gdots: Vec<f64> = entries.iter().map(|&(j, _, _)| gi.dot(&q.row(j))).collect();
        let weighted: f64 = entries
            .iter()
            .zip(&gdots)
            .map(|(&(_, _, a), &gd)| a * gd)
            .sum();
        let mut dr_sum = 0.0;
        for (&(j, r, a), &gd) in entries.iter().zip(&gdots) {
            grad_q.row_mut(j).scaled_add(a, &gi);
            let ds = a * (gd - weighted);
            let dr = ds * leaky_grad(r);
            dr_sum += dr;
            grad_q.row_mut(j).scaled_add(dr, a_dst);
            grad_a_dst.scaled_add(dr, &q.row(j));
        }
        grad_q.row_mut(i).scaled_add(dr_sum, a_src);
        grad_a_src.scaled_add(dr_sum, &q.row(i));
    }
    (grad_q, grad_a_src, grad_a_dst)
}

pub(super) fn backward(
    ops: &GraphOps,
    state: &ModelState,
    arch: &ModelArch,
    fwd: &ForwardPass,
    mut grad_pre: Array2<f64>,
) -> Vec<LayerWeights> {
    let num_layers = arch.num_layers();
    let mut grads: Vec<LayerWeights> = Vec::with_capacity(num_layers);
    for l in (0..num_layers).rev() {
        let LayerWeights::Gat { heads } = &state.layers[l] else {
            panic!("GAT state expected");
        };
        let input = fwd.layer_input(ops.graph(), l + 1);
        let scale = 1.0 / heads.len() as f64;
        let mut grad_input = Array2::<f64>::zeros(input.dim());
        let mut head_grads = Vec::with_capacity(heads.len());
        for (k, head) in heads.iter().enumerate() {
            let q = input.dot(&head.w);
            let grad_out = grad_pre.mapv(|v| v * scale);
            let (grad_q, grad_a_src, grad_a_dst) =
                head_backward(&q, &fwd.attention[l][k], &head.a_src, &head.a_dst, &grad_out);
            let grad_w = input.t().dot(&grad_q);
            grad_input = grad_input + grad_q.dot(&head.w.t());
            head_grads.push(super::GatHead {
                w: grad_w,
                a_src: grad_a_src,
                a_dst: grad_a_dst,
            });
        }
        if l > 0 {
            let act_grad = activation_grad(&fwd.pre[l - 1], &fwd.post[l - 1], arch.activation);
            grad_pre = grad_input * &act_grad;
        }
        grads.push(LayerWeights::Gat { heads: head_grads });
    }
    grads.reverse();
    grads
}
