//! Trainable message-passing models: GCN, GAT and GraphSAGE-mean.
//!
//! All three train with plain full-batch gradient descent on masked
//! cross-entropy; richer optimizers would break the feasibility bound the
//! defense relies on. Every epoch pushes a weight snapshot onto a bounded
//! ring so rectification can roll the model back a few epochs.

mod gat;
mod gcn;
mod sage;

use std::collections::VecDeque;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{
    build_laplacian, reduced_laplacian, EdgeContribution, GraphData, Laplacian, LaplacianKind,
    SparseMatrix,
};

pub use gat::HeadAttention;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ArchKind {
    Gcn,
    Gat,
    Sage,
}

impl ArchKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ArchKind::Gcn => "gcn",
            ArchKind::Gat => "gat",
            ArchKind::Sage => "sage",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gcn" => Ok(ArchKind::Gcn),
            "gat" => Ok(ArchKind::Gat),
            "sage" => Ok(ArchKind::Sage),
            other => Err(Error::Config(format!("unknown architecture {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Activation {
    Sigmoid,
    Relu,
}

/// Architecture description shared by all model kinds.
#[derive(Debug, Clone)]
pub struct ModelArch {
    pub kind: ArchKind,
    /// `[d0, d1, ..., dL]`; the last entry is the class count.
    pub layer_dims: Vec<usize>,
    /// Attention heads (GAT only; head outputs are averaged).
    pub num_heads: usize,
    pub activation: Activation,
}

impl ModelArch {
    pub fn new(kind: ArchKind, layer_dims: Vec<usize>) -> Self {
        ModelArch {
            kind,
            layer_dims,
            num_heads: 1,
            activation: Activation::Sigmoid,
        }
    }

    /// Number of weight layers `L`.
    pub fn num_layers(&self) -> usize {
        self.layer_dims.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers() < 2 {
            return Err(Error::Config(format!(
                "need at least 2 layers, got {}",
                self.num_layers()
            )));
        }
        if self.layer_dims.iter().any(|&d| d == 0) {
            return Err(Error::Config("zero-width layer".into()));
        }
        if self.kind == ArchKind::Gat && self.num_heads == 0 {
            return Err(Error::Config("GAT needs at least one head".into()));
        }
        Ok(())
    }

    /// Interface layers must leave at least one layer above them.
    pub fn validate_interface_layer(&self, layer: usize) -> Result<()> {
        if layer < 1 || layer > self.num_layers() - 1 {
            return Err(Error::Config(format!(
                "interface layer {layer} outside 1..={}",
                self.num_layers() - 1
            )));
        }
        Ok(())
    }
}

/// One GAT attention head: value transform plus the two halves of the
/// attention vector (`aᵀ[W z_i ‖ W z_j] = a_src·W z_i + a_dst·W z_j`).
#[derive(Debug, Clone)]
pub struct GatHead {
    pub w: Array2<f64>,
    pub a_src: Array1<f64>,
    pub a_dst: Array1<f64>,
}

/// Per-layer trainable parameters.
#[derive(Debug, Clone)]
pub enum LayerWeights {
    Gcn { w: Array2<f64> },
    Gat { heads: Vec<GatHead> },
    Sage { w_self: Array2<f64>, w_neigh: Array2<f64> },
}

impl LayerWeights {
    pub fn is_finite(&self) -> bool {
        match self {
            LayerWeights::Gcn { w } => w.iter().all(|v| v.is_finite()),
            LayerWeights::Gat { heads } => heads.iter().all(|h| {
                h.w.iter().all(|v| v.is_finite())
                    && h.a_src.iter().all(|v| v.is_finite())
                    && h.a_dst.iter().all(|v| v.is_finite())
            }),
            LayerWeights::Sage { w_self, w_neigh } => {
                w_self.iter().all(|v| v.is_finite()) && w_neigh.iter().all(|v| v.is_finite())
            }
        }
    }

    /// `self -= eta * other`, used for the gradient step.
    fn step(&mut self, eta: f64, grad: &LayerWeights) {
        match (self, grad) {
            (LayerWeights::Gcn { w }, LayerWeights::Gcn { w: g }) => {
                w.scaled_add(-eta, g);
            }
            (LayerWeights::Gat { heads }, LayerWeights::Gat { heads: gs }) => {
                for (h, g) in heads.iter_mut().zip(gs) {
                    h.w.scaled_add(-eta, &g.w);
                    h.a_src.scaled_add(-eta, &g.a_src);
                    h.a_dst.scaled_add(-eta, &g.a_dst);
                }
            }
            (LayerWeights::Sage { w_self, w_neigh }, LayerWeights::Sage { w_self: gs, w_neigh: gn }) => {
                w_self.scaled_add(-eta, gs);
                w_neigh.scaled_add(-eta, gn);
            }
            _ => panic!("mismatched layer weight kinds"),
        }
    }

    /// Exact bit-level equality, used by replay and rollback tests.
    pub fn bits_equal(&self, other: &LayerWeights) -> bool {
        fn arr_eq(a: &Array2<f64>, b: &Array2<f64>) -> bool {
            a.shape() == b.shape() && a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
        }
        fn vec_eq(a: &Array1<f64>, b: &Array1<f64>) -> bool {
            a.len() == b.len() && a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
        }
        match (self, other) {
            (LayerWeights::Gcn { w: a }, LayerWeights::Gcn { w: b }) => arr_eq(a, b),
            (LayerWeights::Gat { heads: a }, LayerWeights::Gat { heads: b }) => {
                a.len() == b.len()
                    && a.iter().zip(b).all(|(x, y)| {
                        arr_eq(&x.w, &y.w) && vec_eq(&x.a_src, &y.a_src) && vec_eq(&x.a_dst, &y.a_dst)
                    })
            }
            (
                LayerWeights::Sage { w_self: a, w_neigh: b },
                LayerWeights::Sage { w_self: c, w_neigh: d },
            ) => arr_eq(a, c) && arr_eq(b, d),
            _ => false,
        }
    }
}

pub fn weights_bits_equal(a: &[LayerWeights], b: &[LayerWeights]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.bits_equal(y))
}

#[derive(Debug, Clone)]
pub struct Snapshot {
    pub epoch: usize,
    pub layers: Vec<LayerWeights>,
}

/// Bounded history of weight snapshots, oldest evicted first.
#[derive(Debug, Clone)]
pub struct SnapshotRing {
    capacity: usize,
    entries: VecDeque<Snapshot>,
}

impl SnapshotRing {
    pub fn new(capacity: usize) -> Self {
        SnapshotRing {
            capacity: capacity.max(1),
            entries: VecDeque::new(),
        }
    }

    pub fn push(&mut self, epoch: usize, layers: Vec<LayerWeights>) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(Snapshot { epoch, layers });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Newest snapshot with `epoch <= target`, else the oldest one kept.
    fn restore_point(&self, target: usize) -> Option<&Snapshot> {
        self.entries
            .iter()
            .rev()
            .find(|s| s.epoch <= target)
            .or_else(|| self.entries.front())
    }

    fn drop_after(&mut self, epoch: usize) {
        while matches!(self.entries.back(), Some(s) if s.epoch > epoch) {
            self.entries.pop_back();
        }
    }
}

/// Weights plus epoch counter plus rollback history.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub layers: Vec<LayerWeights>,
    pub epoch: usize,
    ring: SnapshotRing,
}

impl ModelState {
    /// Seeded Glorot-uniform initialization; the initial weights are
    /// recorded as the epoch-0 snapshot.
    pub fn init(arch: &ModelArch, seed: u64, snapshot_capacity: usize) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(arch.num_layers());
        for l in 0..arch.num_layers() {
            let (din, dout) = (arch.layer_dims[l], arch.layer_dims[l + 1]);
            layers.push(match arch.kind {
                ArchKind::Gcn => LayerWeights::Gcn {
                    w: glorot(&mut rng, din, dout),
                },
                ArchKind::Sage => LayerWeights::Sage {
                    w_self: glorot(&mut rng, din, dout),
                    w_neigh: glorot(&mut rng, din, dout),
                },
                ArchKind::Gat => LayerWeights::Gat {
                    heads: (0..arch.num_heads)
                        .map(|_| GatHead {
                            w: glorot(&mut rng, din, dout),
                            a_src: glorot_vec(&mut rng, dout),
                            a_dst: glorot_vec(&mut rng, dout),
                        })
                        .collect(),
                },
            });
        }
        let mut ring = SnapshotRing::new(snapshot_capacity);
        ring.push(0, layers.clone());
        Ok(ModelState {
            layers,
            epoch: 0,
            ring,
        })
    }

    pub fn snapshot_len(&self) -> usize {
        self.ring.len()
    }

    /// Rewinds the weights `delta` epochs (or to the oldest snapshot kept
    /// when history is shorter) and returns the rewind actually applied.
    /// Snapshots newer than the restored epoch are discarded.
    pub fn rollback(&mut self, delta: usize) -> Result<usize> {
        if delta == 0 {
            return Ok(0);
        }
        if self.ring.is_empty() {
            return Err(Error::EmptySnapshotRing);
        }
        let target = self.epoch.saturating_sub(delta);
        let snap = self
            .ring
            .restore_point(target)
            .expect("non-empty ring has a restore point");
        let restored_epoch = snap.epoch;
        let layers = snap.layers.clone();
        let rewound = self.epoch.saturating_sub(restored_epoch);
        self.layers = layers;
        self.epoch = restored_epoch;
        self.ring.drop_after(restored_epoch);
        Ok(rewound)
    }

    fn record_snapshot(&mut self) {
        self.ring.push(self.epoch, self.layers.clone());
    }
}

fn glorot(rng: &mut ChaCha8Rng, din: usize, dout: usize) -> Array2<f64> {
    let s = (6.0 / (din + dout) as f64).sqrt();
    Array2::from_shape_fn((din, dout), |_| rng.random_range(-s..s))
}

fn glorot_vec(rng: &mut ChaCha8Rng, d: usize) -> Array1<f64> {
    let s = (6.0 / (d + 1) as f64).sqrt();
    Array1::from_shape_fn(d, |_| rng.random_range(-s..s))
}

/// Full-batch training settings.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub seed: u64,
    pub snapshot_capacity: usize,
    pub laplacian_kind: LaplacianKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.5,
            max_epochs: 200,
            seed: 0,
            snapshot_capacity: 32,
            laplacian_kind: LaplacianKind::SymNormalized,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.snapshot_capacity == 0 {
            return Err(Error::Config("snapshot capacity must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-graph operator bundle, rebuilt whenever the edge set changes.
/// Everything here is immutable once constructed.
#[derive(Debug, Clone)]
pub struct GraphOps {
    graph: GraphData,
    laplacian: Laplacian,
    /// Reduced share per edge, aligned with `graph.edges()`.
    contributions: Vec<EdgeContribution>,
    /// Self-loop share per node.
    self_contributions: Vec<EdgeContribution>,
    /// Mean-over-neighbors operator (no self term) for SAGE.
    neighbor_mean: SparseMatrix,
}

impl GraphOps {
    pub fn new(g: &GraphData, kind: LaplacianKind) -> Self {
        let laplacian = build_laplacian(g, kind);
        let contributions = g
            .edges()
            .iter()
            .map(|&e| reduced_laplacian(&laplacian, g, e).expect("edge from the graph"))
            .collect();
        let self_contributions = (0..g.num_nodes())
            .map(|i| reduced_laplacian(&laplacian, g, (i, i)).expect("self pair"))
            .collect();
        let mut triplets = Vec::with_capacity(2 * g.num_edges());
        for i in 0..g.num_nodes() {
            let deg = g.degree(i);
            if deg == 0 {
                continue;
            }
            let w = 1.0 / deg as f64;
            for &j in g.neighbors(i) {
                triplets.push((i, j, w));
            }
        }
        let neighbor_mean = SparseMatrix::from_triplets(g.num_nodes(), g.num_nodes(), &triplets);
        GraphOps {
            graph: g.clone(),
            laplacian,
            contributions,
            self_contributions,
            neighbor_mean,
        }
    }

    pub fn graph(&self) -> &GraphData {
        &self.graph
    }

    pub fn laplacian(&self) -> &Laplacian {
        &self.laplacian
    }

    pub fn contribution(&self, edge_index: usize) -> &EdgeContribution {
        &self.contributions[edge_index]
    }

    pub fn self_contribution(&self, node: usize) -> &EdgeContribution {
        &self.self_contributions[node]
    }

    pub fn neighbor_mean(&self) -> &SparseMatrix {
        &self.neighbor_mean
    }
}

/// Everything a forward pass produces, kept around for gradients and for
/// the trajectory recorder.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// Pre-activation output per layer (final layer: logits).
    pub pre: Vec<Array2<f64>>,
    /// Post-activation output per layer (final layer: softmax).
    pub post: Vec<Array2<f64>>,
    /// For GAT: per layer, per head attention state.
    pub attention: Vec<Vec<HeadAttention>>,
}

impl ForwardPass {
    /// Row-stochastic class distribution of the final layer.
    pub fn output(&self) -> &Array2<f64> {
        self.post.last().expect("at least one layer")
    }

    /// Input features of layer `layer` (1-based): the previous layer's
    /// post-activation output, or the raw features for layer 1.
    pub fn layer_input<'a>(&'a self, g: &'a GraphData, layer: usize) -> &'a Array2<f64> {
        if layer == 1 {
            g.features()
        } else {
            &self.post[layer - 2]
        }
    }
}

/// Applies the hidden-layer activation element-wise.
pub fn apply_activation(pre: &Array2<f64>, act: Activation) -> Array2<f64> {
    match act {
        Activation::Sigmoid => pre.mapv(|x| 1.0 / (1.0 + (-x).exp())),
        Activation::Relu => pre.mapv(|x| x.max(0.0)),
    }
}

/// Derivative of the activation in terms of (pre, post) values.
pub(crate) fn activation_grad(pre: &Array2<f64>, post: &Array2<f64>, act: Activation) -> Array2<f64> {
    match act {
        Activation::Sigmoid => post.mapv(|z| z * (1.0 - z)),
        Activation::Relu => pre.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 }),
    }
}

/// Row-wise stable softmax.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|x| (x - max).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|x| x / sum);
    }
    out
}

/// Mean cross-entropy over masked rows.
pub fn masked_cross_entropy(output: &Array2<f64>, labels: &Array2<f64>, mask: &[bool]) -> Result<f64> {
    let m = mask.iter().filter(|&&b| b).count();
    if m == 0 {
        return Err(Error::Config("empty loss mask".into()));
    }
    let mut total = 0.0;
    for i in 0..output.nrows() {
        if !mask[i] {
            continue;
        }
        for k in 0..output.ncols() {
            if labels[[i, k]] != 0.0 {
                total -= labels[[i, k]] * output[[i, k]].max(1e-300).ln();
            }
        }
    }
    Ok(total / m as f64)
}

/// Fraction of masked nodes whose argmax prediction matches the label.
pub fn accuracy(output: &Array2<f64>, g: &GraphData, mask: &[bool]) -> f64 {
    let mut hit = 0usize;
    let mut total = 0usize;
    for i in 0..output.nrows() {
        if !mask[i] {
            continue;
        }
        total += 1;
        let pred = output
            .row(i)
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(k, _)| k)
            .unwrap();
        if pred == g.label_of(i) {
            hit += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

/// Runs the model over the whole graph and returns every layer's output.
pub fn forward(ops: &GraphOps, state: &ModelState, arch: &ModelArch) -> Result<ForwardPass> {
    match arch.kind {
        ArchKind::Gcn => gcn::forward(ops, state, arch),
        ArchKind::Gat => gat::forward(ops, state, arch),
        ArchKind::Sage => sage::forward(ops, state, arch),
    }
}

/// Loss plus analytic gradients for every layer, evaluated at the current
/// weights. The mask is the training mask of the graph.
pub fn loss_and_gradients(
    ops: &GraphOps,
    state: &ModelState,
    arch: &ModelArch,
) -> Result<(f64, Vec<LayerWeights>, ForwardPass)> {
    let fwd = forward(ops, state, arch)?;
    let g = ops.graph();
    let mask = g.train_mask();
    let loss = masked_cross_entropy(fwd.output(), g.labels(), mask)?;
    let m = mask.iter().filter(|&&b| b).count() as f64;

    // dLoss/dP_L for mean masked cross-entropy with softmax output
    let mut grad_out = fwd.output() - g.labels();
    for (i, &keep) in mask.iter().enumerate() {
        if keep {
            grad_out.row_mut(i).mapv_inplace(|v| v / m);
        } else {
            grad_out.row_mut(i).fill(0.0);
        }
    }

    let grads = match arch.kind {
        ArchKind::Gcn => gcn::backward(ops, state, arch, &fwd, grad_out),
        ArchKind::Gat => gat::backward(ops, state, arch, &fwd, grad_out),
        ArchKind::Sage => sage::backward(ops, state, arch, &fwd, grad_out),
    };
    Ok((loss, grads, fwd))
}

/// Result of one training epoch, for observers.
#[derive(Debug, Clone)]
pub struct EpochResult {
    pub loss: f64,
    /// Forward pass computed with the pre-step weights.
    pub forward: ForwardPass,
    /// Weights before the gradient step (epoch `state.epoch - 1` after the call).
    pub weights_before: Vec<LayerWeights>,
}

/// One full-batch gradient step. Weights are updated in place, the epoch
/// counter advances and a snapshot of the new weights is recorded.
pub fn train_epoch(
    ops: &GraphOps,
    state: &mut ModelState,
    arch: &ModelArch,
    cfg: &TrainConfig,
) -> Result<EpochResult> {
    cfg.validate()?;
    if state.epoch >= cfg.max_epochs {
        return Err(Error::Config(format!(
            "epoch {} already at max_epochs {}",
            state.epoch, cfg.max_epochs
        )));
    }
    let (loss, grads, fwd) = loss_and_gradients(ops, state, arch)?;
    if !loss.is_finite() {
        return Err(Error::Diverged {
            epoch: state.epoch,
            detail: format!("loss = {loss}"),
        });
    }
    for (l, grad) in grads.iter().enumerate() {
        if !grad.is_finite() {
            return Err(Error::Diverged {
                epoch: state.epoch,
                detail: format!("non-finite gradient in layer {}", l + 1),
            });
        }
    }
    let weights_before = state.layers.clone();
    for (w, grad) in state.layers.iter_mut().zip(&grads) {
        w.step(cfg.learning_rate, grad);
    }
    for (l, w) in state.layers.iter().enumerate() {
        if !w.is_finite() {
            return Err(Error::Diverged {
                epoch: state.epoch,
                detail: format!("non-finite weights in layer {}", l + 1),
            });
        }
    }
    state.epoch += 1;
    state.record_snapshot();
    Ok(EpochResult {
        loss,
        forward: fwd,
        weights_before,
    })
}

/// Attention coefficients of one GAT layer (1-based) at the current
/// weights: per head, per node, softmax-normalized over `N(i) ∪ {i}`.
pub fn gat_attention(
    ops: &GraphOps,
    state: &ModelState,
    arch: &ModelArch,
    layer: usize,
) -> Result<Vec<HeadAttention>> {
    if arch.kind != ArchKind::Gat {
        return Err(Error::Config("gat_attention requires a GAT model".into()));
    }
    if layer < 1 || layer > arch.num_layers() {
        return Err(Error::Config(format!("layer {layer} out of range")));
    }
    let fwd = forward(ops, state, arch)?;
    Ok(fwd.attention[layer - 1].clone())
}

#[cfg(test)]
pub(crate) mod test_support;

#[cfg(test)]
mod tests;
