//! Feature trajectories: per-entity sequences of interface-layer vectors
//! across epochs, the per-architecture edge direction vectors that drive
//! them, and the normalization that makes trajectory sets comparable and
//! transferable.
//!
//! Conventions. GCN node trajectories are recorded pre-activation at the
//! interface layer so the edge/node decomposition is exact; GAT and SAGE
//! record the layer output directly. Edge trajectories have no natural
//! origin, so positions are the running sum of direction vectors starting
//! from zero.

use std::collections::{BTreeMap, VecDeque};
use std::io::{BufRead, Write};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};
use crate::graph::{EdgeContribution, GraphData};
use crate::model::{ArchKind, EpochResult, GatHead, GraphOps, LayerWeights, ModelArch, ModelState};
use crate::par::par_map;

/// Direction of a trajectory between two consecutive observed epochs.
#[derive(Debug, Clone)]
pub struct DirectionVector {
    pub from_epoch: usize,
    pub to_epoch: usize,
    pub vector: Array1<f64>,
}

/// What a trajectory buffer tracks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum EntityId {
    Node(usize),
    /// One directed view of an undirected edge: the trajectory of messages
    /// arriving at `target` along `edge`.
    EdgeView { edge: (usize, usize), target: usize },
}

/// Append-only sequence of layer-ℓ vectors, one per observed epoch.
/// An optional capacity keeps only the trailing window; epochs stay
/// contiguous within whatever is retained.
#[derive(Debug, Clone)]
pub struct TrajectoryBuffer {
    entity: EntityId,
    layer: usize,
    points: VecDeque<Array1<f64>>,
    epochs: VecDeque<usize>,
    capacity: Option<usize>,
}

impl TrajectoryBuffer {
    pub fn new(entity: EntityId, layer: usize, capacity: Option<usize>) -> Self {
        TrajectoryBuffer {
            entity,
            layer,
            points: VecDeque::new(),
            epochs: VecDeque::new(),
            capacity,
        }
    }

    pub fn entity(&self) -> EntityId {
        self.entity
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn epochs(&self) -> impl Iterator<Item = usize> + '_ {
        self.epochs.iter().copied()
    }

    pub fn points(&self) -> impl Iterator<Item = &Array1<f64>> {
        self.points.iter()
    }

    pub fn push(&mut self, epoch: usize, point: Array1<f64>) -> Result<()> {
        if let Some(&last) = self.epochs.back() {
            if epoch != last + 1 {
                return Err(Error::Trajectory(format!(
                    "non-contiguous epochs for {:?}: {} after {}",
                    self.entity, epoch, last
                )));
            }
            if self.points[0].len() != point.len() {
                return Err(Error::Dimension(format!(
                    "trajectory point dim {} != {}",
                    point.len(),
                    self.points[0].len()
                )));
            }
        }
        if let Some(cap) = self.capacity {
            while self.points.len() >= cap.max(1) {
                self.points.pop_front();
                self.epochs.pop_front();
            }
        }
        self.points.push_back(point);
        self.epochs.push_back(epoch);
        Ok(())
    }

    /// Trailing window of `len` points as a `len × dim` matrix.
    pub fn trailing(&self, len: usize) -> Option<Array2<f64>> {
        if len == 0 || self.points.len() < len {
            return None;
        }
        let dim = self.points[0].len();
        let start = self.points.len() - len;
        let mut out = Array2::<f64>::zeros((len, dim));
        for (r, p) in self.points.iter().skip(start).enumerate() {
            out.row_mut(r).assign(p);
        }
        Some(out)
    }

    /// Drops entries with epoch greater than `max_epoch` and returns the
    /// earliest dropped point, if any.
    fn truncate_to_epoch(&mut self, max_epoch: usize) -> Option<Array1<f64>> {
        let mut earliest_dropped = None;
        while matches!(self.epochs.back(), Some(&e) if e > max_epoch) {
            self.epochs.pop_back();
            earliest_dropped = self.points.pop_back();
        }
        earliest_dropped
    }
}

/// Row `target` of `contribution · product` where `product = Z_{ℓ-1} ΔW`.
pub fn edge_direction_from_product(
    contribution: &EdgeContribution,
    product: &ArrayView2<f64>,
    target: usize,
) -> Array1<f64> {
    contribution.apply_row(target, product)
}

/// GCN edge direction: row `target` of `R(L, edge) · Z_{ℓ-1} · ΔW`.
pub fn edge_direction_gcn(
    z_prev: &ArrayView2<f64>,
    delta_w: &ArrayView2<f64>,
    contribution: &EdgeContribution,
    target: usize,
    from_epoch: usize,
) -> Result<DirectionVector> {
    if z_prev.ncols() != delta_w.nrows() {
        return Err(Error::Dimension(format!(
            "Z has {} columns but ΔW has {} rows",
            z_prev.ncols(),
            delta_w.nrows()
        )));
    }
    let product = z_prev.dot(delta_w);
    Ok(DirectionVector {
        from_epoch,
        to_epoch: from_epoch + 1,
        vector: edge_direction_from_product(contribution, &product.view(), target),
    })
}

/// Sum of edge directions; for GCN this reconstructs the node direction
/// once the self-loop share is included.
pub fn node_direction(edge_dirs: &[DirectionVector], dim: usize) -> DirectionVector {
    let mut vector = Array1::<f64>::zeros(dim);
    let (mut from, mut to) = (0, 0);
    for d in edge_dirs {
        vector += &d.vector;
        from = d.from_epoch;
        to = d.to_epoch;
    }
    DirectionVector {
        from_epoch: from,
        to_epoch: to,
        vector,
    }
}

/// GAT edge direction: `Σ_k a_k · (z W_k)` over heads, with the epoch-t
/// attention coefficient of this edge view in each head.
pub fn edge_direction_gat(
    coefficients: &[f64],
    heads: &[GatHead],
    z: &ArrayView1<f64>,
    from_epoch: usize,
) -> Result<DirectionVector> {
    if coefficients.len() != heads.len() {
        return Err(Error::Dimension(format!(
            "{} coefficients for {} heads",
            coefficients.len(),
            heads.len()
        )));
    }
    let dout = heads[0].w.ncols();
    let mut vector = Array1::<f64>::zeros(dout);
    for (a, head) in coefficients.iter().zip(heads) {
        vector.scaled_add(*a, &z.dot(&head.w));
    }
    Ok(DirectionVector {
        from_epoch,
        to_epoch: from_epoch + 1,
        vector,
    })
}

/// SAGE edge direction: the layer-ℓ aggregation recomputed with the
/// blocked mean aggregator, where only neighbor `j` passes:
/// `(z_j / |N(i)|) · W_neigh`.
pub fn edge_direction_sage(
    ops: &GraphOps,
    state: &ModelState,
    arch: &ModelArch,
    layer: usize,
    node: usize,
    neighbor: usize,
    from_epoch: usize,
) -> Result<DirectionVector> {
    if arch.kind != ArchKind::Sage {
        return Err(Error::Config("edge_direction_sage requires SAGE".into()));
    }
    if !ops.graph().neighbors(node).contains(&neighbor) {
        return Err(Error::MissingEdge(node, neighbor));
    }
    let fwd = crate::model::forward(ops, state, arch)?;
    let z_prev = fwd.layer_input(ops.graph(), layer);
    let LayerWeights::Sage { w_neigh, .. } = &state.layers[layer - 1] else {
        return Err(Error::Config("SAGE state expected".into()));
    };
    let deg = ops.graph().degree(node) as f64;
    let vector = z_prev.row(neighbor).mapv(|v| v / deg).dot(w_neigh);
    Ok(DirectionVector {
        from_epoch,
        to_epoch: from_epoch + 1,
        vector,
    })
}

/// Records node and edge-view trajectories at one interface layer while a
/// model trains. Observers feed it one `EpochResult` per epoch.
#[derive(Debug, Clone)]
pub struct FtRecorder {
    layer: usize,
    dim: usize,
    capacity: Option<usize>,
    node_bufs: Vec<TrajectoryBuffer>,
    edge_tracks: BTreeMap<(usize, usize, usize), EdgeTrack>,
    next_epoch: usize,
}

#[derive(Debug, Clone)]
struct EdgeTrack {
    buffer: TrajectoryBuffer,
    /// Next position to append: the running sum of directions so far.
    pending: Array1<f64>,
}

impl FtRecorder {
    /// One buffer per node plus two directed views per edge.
    pub fn new(g: &GraphData, layer: usize, dim: usize, capacity: Option<usize>) -> Self {
        let node_bufs = (0..g.num_nodes())
            .map(|i| TrajectoryBuffer::new(EntityId::Node(i), layer, capacity))
            .collect();
        let mut edge_tracks = BTreeMap::new();
        for &(u, v) in g.edges() {
            for target in [u, v] {
                edge_tracks.insert(
                    (u, v, target),
                    EdgeTrack {
                        buffer: TrajectoryBuffer::new(
                            EntityId::EdgeView { edge: (u, v), target },
                            layer,
                            capacity,
                        ),
                        pending: Array1::zeros(dim),
                    },
                );
            }
        }
        FtRecorder {
            layer,
            dim,
            capacity,
            node_bufs,
            edge_tracks,
            next_epoch: 0,
        }
    }

    /// A recorder attached to a model mid-run: the first recorded epoch
    /// will be `start_epoch`.
    pub fn with_start_epoch(
        g: &GraphData,
        layer: usize,
        dim: usize,
        capacity: Option<usize>,
        start_epoch: usize,
    ) -> Self {
        let mut rec = FtRecorder::new(g, layer, dim, capacity);
        rec.next_epoch = start_epoch;
        rec
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn next_epoch(&self) -> usize {
        self.next_epoch
    }

    pub fn node_buffer(&self, i: usize) -> &TrajectoryBuffer {
        &self.node_bufs[i]
    }

    pub fn edge_buffer(&self, u: usize, v: usize, target: usize) -> Option<&TrajectoryBuffer> {
        let key = (u.min(v), u.max(v), target);
        self.edge_tracks.get(&key).map(|t| &t.buffer)
    }

    pub fn edge_views(&self) -> impl Iterator<Item = (&(usize, usize, usize), &TrajectoryBuffer)> {
        self.edge_tracks.iter().map(|(k, t)| (k, &t.buffer))
    }

    /// Appends the epoch's node points and integrates the epoch's edge
    /// directions. Must be called once per epoch, in order, right after
    /// the gradient step; `state` holds the post-step weights.
    pub fn record_epoch(
        &mut self,
        ops: &GraphOps,
        arch: &ModelArch,
        state: &ModelState,
        epoch_result: &EpochResult,
    ) -> Result<()> {
        let epoch = state.epoch.checked_sub(1).ok_or_else(|| {
            Error::Trajectory("record_epoch called before any training step".into())
        })?;
        if epoch != self.next_epoch {
            return Err(Error::Trajectory(format!(
                "skipped epochs: recorder expects {}, got {}",
                self.next_epoch, epoch
            )));
        }
        let g = ops.graph();
        let layer = self.layer;
        let fwd = &epoch_result.forward;

        // node points: pre-activation for GCN, layer output otherwise
        let node_points = match arch.kind {
            ArchKind::Gcn => &fwd.pre[layer - 1],
            _ => &fwd.post[layer - 1],
        };
        for (i, buf) in self.node_bufs.iter_mut().enumerate() {
            buf.push(epoch, node_points.row(i).to_owned())?;
        }

        // edge directions for this epoch, one per directed view
        let z_prev = fwd.layer_input(g, layer);
        match arch.kind {
            ArchKind::Gcn => {
                let (LayerWeights::Gcn { w: w_after }, LayerWeights::Gcn { w: w_before }) =
                    (&state.layers[layer - 1], &epoch_result.weights_before[layer - 1])
                else {
                    return Err(Error::Config("GCN state expected".into()));
                };
                let delta_w = w_after - w_before;
                let product = z_prev.dot(&delta_w);
                let edges: Vec<(usize, usize)> = g.edges().to_vec();
                for (idx, &(u, v)) in edges.iter().enumerate() {
                    let contribution = ops.contribution(idx);
                    for target in [u, v] {
                        let dir = edge_direction_from_product(contribution, &product.view(), target);
                        self.advance_edge((u, v, target), epoch, dir)?;
                    }
                }
            }
            ArchKind::Gat => {
                let LayerWeights::Gat { heads } = &epoch_result.weights_before[layer - 1] else {
                    return Err(Error::Config("GAT state expected".into()));
                };
                let attention = &fwd.attention[layer - 1];
                // value transform per head under the epoch-t weights
                let q: Vec<Array2<f64>> = heads.iter().map(|h| z_prev.dot(&h.w)).collect();
                let edges: Vec<(usize, usize)> = g.edges().to_vec();
                for &(u, v) in &edges {
                    for (target, other) in [(u, v), (v, u)] {
                        let mut dir = Array1::<f64>::zeros(q[0].ncols());
                        for (k, att) in attention.iter().enumerate() {
                            if let Some(a) = att.coefficient(target, other) {
                                dir.scaled_add(a, &q[k].row(target));
                            }
                        }
                        self.advance_edge((u, v, target), epoch, dir)?;
                    }
                }
            }
            ArchKind::Sage => {
                let LayerWeights::Sage { w_neigh, .. } = &epoch_result.weights_before[layer - 1]
                else {
                    return Err(Error::Config("SAGE state expected".into()));
                };
                let product = z_prev.dot(w_neigh);
                let edges: Vec<(usize, usize)> = g.edges().to_vec();
                for &(u, v) in &edges {
                    for (target, other) in [(u, v), (v, u)] {
                        let deg = g.degree(target) as f64;
                        let dir = product.row(other).mapv(|x| x / deg);
                        self.advance_edge((u, v, target), epoch, dir)?;
                    }
                }
            }
        }
        self.next_epoch = epoch + 1;
        Ok(())
    }

    fn advance_edge(
        &mut self,
        key: (usize, usize, usize),
        epoch: usize,
        direction: Array1<f64>,
    ) -> Result<()> {
        let track = self
            .edge_tracks
            .get_mut(&key)
            .ok_or_else(|| Error::MissingEdge(key.0, key.1))?;
        let position = track.pending.clone();
        track.buffer.push(epoch, position)?;
        track.pending += &direction;
        Ok(())
    }

    /// Applies a rectification: truncates every buffer to epochs at or
    /// below `rollback_epoch - 1`, drops views of removed edges, opens
    /// fresh views for added edges and clears buffers of affected nodes.
    pub fn apply_rectification(
        &mut self,
        new_graph: &GraphData,
        rollback_epoch: usize,
        removed: &[(usize, usize)],
        added: &[(usize, usize)],
        affected_nodes: &[usize],
    ) {
        let keep = rollback_epoch.saturating_sub(1);
        let dim = self.dim;
        for buf in &mut self.node_bufs {
            if rollback_epoch == 0 {
                buf.points.clear();
                buf.epochs.clear();
            } else {
                buf.truncate_to_epoch(keep);
            }
        }
        for track in self.edge_tracks.values_mut() {
            if rollback_epoch == 0 {
                track.buffer.points.clear();
                track.buffer.epochs.clear();
                track.pending.fill(0.0);
            } else if let Some(dropped) = track.buffer.truncate_to_epoch(keep) {
                track.pending = dropped;
            }
        }
        for &(u, v) in removed {
            let key = (u.min(v), u.max(v));
            self.edge_tracks.remove(&(key.0, key.1, key.0));
            self.edge_tracks.remove(&(key.0, key.1, key.1));
        }
        for &(u, v) in added {
            let key = (u.min(v), u.max(v));
            for target in [key.0, key.1] {
                self.edge_tracks.insert(
                    (key.0, key.1, target),
                    EdgeTrack {
                        buffer: TrajectoryBuffer::new(
                            EntityId::EdgeView { edge: key, target },
                            self.layer,
                            self.capacity,
                        ),
                        pending: Array1::zeros(dim),
                    },
                );
            }
        }
        for &i in affected_nodes {
            self.node_bufs[i].points.clear();
            self.node_bufs[i].epochs.clear();
        }
        debug_assert!(new_graph
            .edges()
            .iter()
            .all(|&(u, v)| self.edge_tracks.contains_key(&(u, v, u))));
        self.next_epoch = rollback_epoch;
    }
}

/// A trajectory aligned to the origin, rotated so its endpoint lies on
/// the nonnegative first axis, folded to nonnegative coordinates and
/// scaled into the unit box per trajectory set.
#[derive(Debug, Clone)]
pub struct NormalizedTrajectory {
    pub points: Array2<f64>,
    /// Zero net displacement: rotation undefined, excluded from detector
    /// production.
    pub degenerate: bool,
    pub scale_meta: ScaleMeta,
}

/// Audit record of the transform applied to one trajectory.
#[derive(Debug, Clone)]
pub struct ScaleMeta {
    /// Original first point (subtracted).
    pub translation: Array1<f64>,
    /// Norm of the net displacement before scaling.
    pub endpoint_norm: f64,
    /// Cosine of the angle between the displacement and the first axis.
    pub cos_to_axis: f64,
    /// Set-wide scale divisor.
    pub set_scale: f64,
}

impl NormalizedTrajectory {
    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }
}

fn translate_rotate_fold(points: &Array2<f64>) -> (Array2<f64>, bool, Array1<f64>, f64, f64) {
    let start = points.row(0).to_owned();
    let mut moved = points - &start.view().insert_axis(ndarray::Axis(0));
    let endpoint = moved.row(moved.nrows() - 1).to_owned();
    let norm = endpoint.dot(&endpoint).sqrt();
    let mut degenerate = false;
    let mut cos_to_axis = 1.0;
    if norm <= 1e-12 {
        degenerate = true;
    } else {
        cos_to_axis = endpoint[0] / norm;
        // already on the positive first axis → rotation is the identity
        let off_axis = endpoint
            .iter()
            .skip(1)
            .fold(0.0f64, |m, v| m.max(v.abs()));
        let aligned = off_axis <= 1e-12 * norm && endpoint[0] > 0.0;
        if !aligned {
            // Householder reflection mapping the displacement onto ‖ζ‖·e1
            let mut u = endpoint.clone();
            u[0] -= norm;
            let uu = u.dot(&u);
            if uu > 0.0 {
                for mut row in moved.rows_mut() {
                    let proj = 2.0 * row.dot(&u) / uu;
                    row.scaled_add(-proj, &u);
                }
            }
        }
    }
    moved.mapv_inplace(f64::abs);
    (moved, degenerate, start, norm, cos_to_axis)
}

fn normalize_inner(trajs: &[Array2<f64>], fixed_scale: Option<f64>) -> Result<Vec<NormalizedTrajectory>> {
    if trajs.is_empty() {
        return Ok(Vec::new());
    }
    let len = trajs[0].nrows();
    let dim = trajs[0].ncols();
    if len < 2 {
        return Err(Error::Trajectory(format!(
            "trajectories need at least 2 points, got {len}"
        )));
    }
    for t in trajs {
        if t.nrows() != len || t.ncols() != dim {
            return Err(Error::Dimension(format!(
                "mixed trajectory shapes: ({}, {}) vs ({len}, {dim})",
                t.nrows(),
                t.ncols()
            )));
        }
    }
    let mut staged = par_map(trajs, translate_rotate_fold);
    let scale = match fixed_scale {
        Some(s) => s,
        None => {
            let max = staged
                .iter()
                .map(|(pts, _, _, _, _)| pts.iter().fold(0.0f64, |m, v| m.max(*v)))
                .fold(0.0f64, f64::max);
            if max > 0.0 {
                max
            } else {
                1.0
            }
        }
    };
    Ok(staged
        .drain(..)
        .map(|(mut pts, degenerate, translation, endpoint_norm, cos_to_axis)| {
            if scale != 1.0 {
                pts.mapv_inplace(|v| v / scale);
            }
            NormalizedTrajectory {
                points: pts,
                degenerate,
                scale_meta: ScaleMeta {
                    translation,
                    endpoint_norm,
                    cos_to_axis,
                    set_scale: scale,
                },
            }
        })
        .collect())
}

/// Normalizes a trajectory set: per-trajectory translation and rotation,
/// then one min-max scale shared by the whole set so all coordinates land
/// in `[0, 1]` (the set maximum maps to exactly 1).
pub fn normalize(trajs: &[Array2<f64>]) -> Result<Vec<NormalizedTrajectory>> {
    normalize_inner(trajs, None)
}

/// Same transform with an externally fixed scale divisor, for probes that
/// must be comparable with an already-normalized reference set.
pub fn normalize_with_scale(trajs: &[Array2<f64>], scale: f64) -> Result<Vec<NormalizedTrajectory>> {
    if !(scale > 0.0) {
        return Err(Error::Trajectory(format!("scale must be positive, got {scale}")));
    }
    normalize_inner(trajs, Some(scale))
}

/// Mean over steps of the squared Euclidean distance between
/// corresponding points.
pub fn trajectory_mse(a: &NormalizedTrajectory, b: &NormalizedTrajectory) -> Result<f64> {
    if a.len() != b.len() || a.dim() != b.dim() {
        return Err(Error::Dimension(format!(
            "trajectory mse over ({}, {}) vs ({}, {})",
            a.len(),
            a.dim(),
            b.len(),
            b.dim()
        )));
    }
    let diff = &a.points - &b.points;
    Ok(diff.iter().map(|v| v * v).sum::<f64>() / a.len() as f64)
}

/// Line-delimited trajectory dump: a fixed header naming dimension and
/// window length, then one record per entity.
pub fn dump_trajectories<W: Write>(out: &mut W, recorder: &FtRecorder, dim: usize) -> Result<()> {
    let window = recorder.capacity.map(|c| c.to_string()).unwrap_or_else(|| "unbounded".into());
    writeln!(out, "ftdump 1 dim {dim} window {window}")?;
    let mut write_buf = |kind: &str, head: String, buf: &TrajectoryBuffer| -> Result<()> {
        let epochs: Vec<String> = buf.epochs().map(|e| e.to_string()).collect();
        let mut values = String::new();
        for p in buf.points() {
            for v in p.iter() {
                values.push(' ');
                values.push_str(&format!("{v}"));
            }
        }
        writeln!(
            out,
            "{kind} {head} layer {} epochs {}{values}",
            buf.layer(),
            if epochs.is_empty() { "-".into() } else { epochs.join(",") },
        )?;
        Ok(())
    };
    for buf in &recorder.node_bufs {
        let EntityId::Node(i) = buf.entity() else { continue };
        write_buf("node", format!("{i}"), buf)?;
    }
    for (&(u, v, target), buf) in recorder.edge_views() {
        write_buf("edge", format!("{u} {v} {target}"), buf)?;
    }
    Ok(())
}

/// Parses the header line of a trajectory dump: `(dim, window)`.
pub fn read_dump_header<R: BufRead>(reader: &mut R) -> Result<(usize, Option<usize>)> {
    let mut line = String::new();
    reader.read_line(&mut line)?;
    let parts: Vec<&str> = line.split_whitespace().collect();
    if parts.len() != 6 || parts[0] != "ftdump" || parts[2] != "dim" || parts[4] != "window" {
        return Err(Error::Parse {
            path: "<dump>".into(),
            line: 1,
            detail: "malformed ftdump header".into(),
        });
    }
    let dim = parts[3].parse().map_err(|_| Error::Parse {
        path: "<dump>".into(),
        line: 1,
        detail: "bad dim".into(),
    })?;
    let window = if parts[5] == "unbounded" {
        None
    } else {
        Some(parts[5].parse().map_err(|_| Error::Parse {
            path: "<dump>".into(),
            line: 1,
            detail: "bad window".into(),
        })?)
    };
    Ok((dim, window))
}
