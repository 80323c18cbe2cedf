//! The checkpointed defense pipeline.
//!
//! Training proceeds full-batch, epoch by epoch, with trajectories
//! recorded at the interface layer. Every `checkpoint_interval` epochs
//! the defense collects reliable trajectories (from the trusted subgraph
//! or an exogenous graph with a surrogate model), calibrates λ and ρ,
//! produces detectors by negative selection (or reuses transferred
//! ones), classifies inserted/deleted edges, rectifies the graph, and
//! rolls the weights back. A checkpoint failure is logged and training
//! continues; the defense never aborts the protected run.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::graph::GraphData;
use crate::immune::{
    detect::{classify_inserted, detect_batch, produce_detectors},
    gamma_bound, rectify, train_generator, DetectorSet, EdgeVerdict, Evidence, ImmuneConfig,
    LambdaMode, Provenance, RhoRule, Verdict,
};
use crate::model::{
    accuracy, train_epoch, ArchKind, EpochResult, GraphOps, LayerWeights, ModelArch, ModelState,
    TrainConfig,
};
use crate::par::par_map;
use crate::trajectory::{normalize, normalize_with_scale, FtRecorder, NormalizedTrajectory};

/// How much of the defense is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefenseMode {
    /// Plain training, no observation at all.
    Off,
    /// Trajectories are recorded but checkpoints never fire.
    MonitorOnly,
    /// Monitoring plus checkpointed detection and rectification.
    Full,
}

/// Where reliable trajectories come from.
#[derive(Debug, Clone)]
pub enum ReliableSource {
    /// Nodes under the graph's reliable mask, plus edges internal to it.
    Subgraph,
    /// A trusted second graph observed through a surrogate model of the
    /// same architecture, trained `checkpoint_interval` epochs per
    /// checkpoint.
    Exogenous {
        graph: GraphData,
        surrogate_seed: u64,
    },
}

/// Optional pipeline inputs.
#[derive(Debug, Clone, Default)]
pub struct PipelineOptions {
    /// Detectors transferred from another system. When present the
    /// generator and negative selection are skipped entirely.
    pub imported_detectors: Option<DetectorSet>,
    /// Free-form tag recorded in detector provenance.
    pub dataset_tag: String,
}

/// One line of the machine-readable run log.
#[derive(Debug, Clone, serde::Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MetricRecord {
    Epoch {
        epoch: usize,
        loss: f64,
        train_acc: f64,
        val_acc: f64,
        test_acc: f64,
        train_ms: f64,
        defense_ms: f64,
    },
    Checkpoint {
        epoch: usize,
        reliable_nodes: usize,
        reliable_edges: usize,
        feasible: usize,
        detectors: usize,
        rho_node: f64,
        rho_edge: f64,
        lambda: f64,
        lambda_effective: f64,
        lambda_violation_rate: f64,
        generator_satisfaction: f64,
        abnormal_nodes: usize,
        flagged_inserted: usize,
        flagged_deleted: usize,
        rewound: usize,
    },
    Flag {
        epoch: usize,
        edge: (usize, usize),
        verdict: Verdict,
        score: f64,
        abnormal_nodes: Vec<usize>,
    },
    CheckpointSkipped {
        epoch: usize,
        reason: String,
    },
    /// Score distributions backing each checkpoint, for ρ audits: the
    /// reliable-pair MSE histogram summary and the probe score summaries
    /// against the detector pool (five-number summaries).
    Diagnostic {
        epoch: usize,
        reliable_node_pair_mse: [f64; 5],
        reliable_edge_pair_mse: [f64; 5],
        node_probe_score: [f64; 5],
        edge_probe_score: [f64; 5],
    },
    Summary {
        epochs: usize,
        final_train_acc: f64,
        final_val_acc: f64,
        final_test_acc: f64,
        total_train_ms: f64,
        total_defense_ms: f64,
        edges_removed: usize,
        edges_added: usize,
    },
}

/// Everything a finished run hands back.
#[derive(Debug)]
pub struct PipelineResult {
    pub graph: GraphData,
    pub state: ModelState,
    pub metrics: Vec<MetricRecord>,
    /// The last checkpoint's detector set (or the imported one).
    pub detectors: Option<DetectorSet>,
    /// Union of all inserted/deleted flags across checkpoints.
    pub flagged_inserted: BTreeSet<(usize, usize)>,
    pub flagged_deleted: BTreeSet<(usize, usize)>,
    pub final_test_accuracy: f64,
}

struct ExoContext {
    ops: GraphOps,
    state: ModelState,
    recorder: FtRecorder,
    cfg: TrainConfig,
    arch: ModelArch,
}

/// Runs training under the immune defense. See the module docs for the
/// checkpoint protocol.
pub fn run_pipeline(
    g: &GraphData,
    arch: &ModelArch,
    train_cfg: &TrainConfig,
    immune_cfg: &ImmuneConfig,
    reliable_source: &ReliableSource,
    options: &PipelineOptions,
) -> Result<PipelineResult> {
    arch.validate()?;
    train_cfg.validate()?;
    immune_cfg.validate()?;
    if !(train_cfg.learning_rate > 0.0) {
        return Err(Error::Config("pipeline requires a positive learning rate".into()));
    }
    arch.validate_interface_layer(immune_cfg.interface_layer)?;
    let layer = immune_cfg.interface_layer;
    let dim = arch.layer_dims[layer];

    if immune_cfg.mode == DefenseMode::Full {
        if train_cfg.snapshot_capacity < immune_cfg.rollback_depth + 1 {
            return Err(Error::Config(format!(
                "snapshot capacity {} cannot cover rollback depth {} (need depth + 1)",
                train_cfg.snapshot_capacity, immune_cfg.rollback_depth
            )));
        }
        if immune_cfg.lambda_mode == LambdaMode::ComputedGcn && arch.kind != ArchKind::Gcn {
            return Err(Error::Config(
                "the closed-form λ only holds for GCN; use an empirical mode".into(),
            ));
        }
        match reliable_source {
            ReliableSource::Subgraph => {
                if !g.reliable_mask().iter().any(|&b| b) {
                    return Err(Error::Config(
                        "subgraph reliable source needs a non-empty reliable mask".into(),
                    ));
                }
            }
            ReliableSource::Exogenous { graph, .. } => {
                if graph.features().ncols() != g.features().ncols()
                    || graph.num_classes() != g.num_classes()
                {
                    return Err(Error::Config(
                        "exogenous graph must match feature and class dimensions".into(),
                    ));
                }
            }
        }
        if let Some(set) = &options.imported_detectors {
            set.check_compatible(immune_cfg.traj_len, dim)?;
        }
    }

    let mut current = g.clone();
    let mut ops = GraphOps::new(&current, train_cfg.laplacian_kind);
    let mut state = ModelState::init(arch, train_cfg.seed, train_cfg.snapshot_capacity)?;
    let capacity = immune_cfg.traj_len + 2;
    let mut recorder = (immune_cfg.mode != DefenseMode::Off)
        .then(|| FtRecorder::new(&current, layer, dim, Some(capacity)));

    let mut exo = match (immune_cfg.mode, reliable_source) {
        (DefenseMode::Full, ReliableSource::Exogenous { graph, surrogate_seed }) => {
            let exo_ops = GraphOps::new(graph, train_cfg.laplacian_kind);
            let exo_state = ModelState::init(arch, *surrogate_seed, 1)?;
            let exo_recorder = FtRecorder::new(graph, layer, dim, Some(capacity));
            let exo_cfg = TrainConfig {
                max_epochs: usize::MAX / 2,
                seed: *surrogate_seed,
                snapshot_capacity: 1,
                ..train_cfg.clone()
            };
            Some(ExoContext {
                ops: exo_ops,
                state: exo_state,
                recorder: exo_recorder,
                cfg: exo_cfg,
                arch: arch.clone(),
            })
        }
        _ => None,
    };

    let mut metrics = Vec::new();
    let mut detectors_out: Option<DetectorSet> = None;
    let mut flagged_inserted = BTreeSet::new();
    let mut flagged_deleted = BTreeSet::new();
    let mut total_train_ms = 0.0;
    let mut total_defense_ms = 0.0;
    let mut edges_removed = 0usize;
    let mut edges_added = 0usize;

    while state.epoch < train_cfg.max_epochs {
        let t_train = Instant::now();
        let res = train_epoch(&ops, &mut state, arch, train_cfg)?;
        let train_ms = t_train.elapsed().as_secs_f64() * 1e3;
        total_train_ms += train_ms;

        let t_defense = Instant::now();
        if let Some(rec) = recorder.as_mut() {
            rec.record_epoch(&ops, arch, &state, &res)?;
        }

        if immune_cfg.mode == DefenseMode::Full
            && state.epoch % immune_cfg.checkpoint_interval == 0
        {
            let epoch = state.epoch;
            let outcome = run_checkpoint(
                &current,
                &ops,
                arch,
                train_cfg,
                immune_cfg,
                options,
                &mut state,
                recorder.as_mut().expect("recorder exists in full mode"),
                exo.as_mut(),
                &res,
                epoch,
            );
            match outcome {
                Ok(mut ck) => {
                    metrics.append(&mut ck.records);
                    if let Some(set) = ck.detectors {
                        detectors_out = Some(set);
                    }
                    for e in ck.removed {
                        flagged_inserted.insert(e);
                        edges_removed += 1;
                    }
                    for e in ck.added {
                        flagged_deleted.insert(e);
                        edges_added += 1;
                    }
                    if let Some(new_graph) = ck.new_graph {
                        current = new_graph;
                        ops = GraphOps::new(&current, train_cfg.laplacian_kind);
                    }
                }
                Err(err) => {
                    metrics.push(MetricRecord::CheckpointSkipped {
                        epoch,
                        reason: err.to_string(),
                    });
                }
            }
        }
        let defense_ms = t_defense.elapsed().as_secs_f64() * 1e3;
        total_defense_ms += defense_ms;

        let out = res.forward.output();
        metrics.push(MetricRecord::Epoch {
            epoch: state.epoch,
            loss: res.loss,
            train_acc: accuracy(out, &current, current.train_mask()),
            val_acc: accuracy(out, &current, current.val_mask()),
            test_acc: accuracy(out, &current, current.test_mask()),
            train_ms,
            defense_ms,
        });
    }

    let final_fwd = crate::model::forward(&ops, &state, arch)?;
    let final_out = final_fwd.output();
    let final_test = accuracy(final_out, &current, current.test_mask());
    metrics.push(MetricRecord::Summary {
        epochs: state.epoch,
        final_train_acc: accuracy(final_out, &current, current.train_mask()),
        final_val_acc: accuracy(final_out, &current, current.val_mask()),
        final_test_acc: final_test,
        total_train_ms,
        total_defense_ms,
        edges_removed,
        edges_added,
    });

    Ok(PipelineResult {
        graph: current,
        state,
        metrics,
        detectors: detectors_out,
        flagged_inserted,
        flagged_deleted,
        final_test_accuracy: final_test,
    })
}

struct CheckpointOutcome {
    records: Vec<MetricRecord>,
    detectors: Option<DetectorSet>,
    new_graph: Option<GraphData>,
    removed: Vec<(usize, usize)>,
    added: Vec<(usize, usize)>,
}

struct WindowSet {
    node_ids: Vec<usize>,
    node_probes: Vec<NormalizedTrajectory>,
    node_scale: f64,
    edge_keys: Vec<(usize, usize, usize)>,
    edge_probes: Vec<NormalizedTrajectory>,
    edge_scale: f64,
    /// Raw (pre-normalization) node windows aligned with `node_ids`.
    raw_node_windows: Vec<Array2<f64>>,
}

fn collect_windows(recorder: &FtRecorder, g: &GraphData, len: usize) -> Result<WindowSet> {
    let mut node_ids = Vec::new();
    let mut node_raw = Vec::new();
    for i in 0..g.num_nodes() {
        if let Some(w) = recorder.node_buffer(i).trailing(len) {
            node_ids.push(i);
            node_raw.push(w);
        }
    }
    let mut edge_keys = Vec::new();
    let mut edge_raw = Vec::new();
    for (&key, buf) in recorder.edge_views() {
        if let Some(w) = buf.trailing(len) {
            edge_keys.push(key);
            edge_raw.push(w);
        }
    }
    let node_probes = normalize(&node_raw)?;
    let edge_probes = normalize(&edge_raw)?;
    let node_scale = node_probes
        .first()
        .map(|n| n.scale_meta.set_scale)
        .unwrap_or(1.0);
    let edge_scale = edge_probes
        .first()
        .map(|n| n.scale_meta.set_scale)
        .unwrap_or(1.0);
    Ok(WindowSet {
        node_ids,
        node_probes,
        node_scale,
        edge_keys,
        edge_probes,
        edge_scale,
        raw_node_windows: node_raw,
    })
}

fn directions_of(window: &Array2<f64>) -> Vec<Array1<f64>> {
    (1..window.nrows())
        .map(|t| window.row(t).to_owned() - window.row(t - 1))
        .collect()
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let idx = ((sorted.len() - 1) as f64 * q).floor() as usize;
    sorted[idx.min(sorted.len() - 1)]
}

/// All pairwise MSEs of a trajectory set, ascending.
fn pairwise_mses(set: &[NormalizedTrajectory]) -> Vec<f64> {
    let pairs: Vec<(usize, usize)> = (0..set.len())
        .flat_map(|i| ((i + 1)..set.len()).map(move |j| (i, j)))
        .collect();
    let mut values = par_map(&pairs, |&(i, j)| {
        crate::trajectory::trajectory_mse(&set[i], &set[j]).expect("aligned reliable set")
    });
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    values
}

/// Five-number summary (min, q25, median, q75, max) of sorted values.
fn summary5(sorted: &[f64]) -> [f64; 5] {
    if sorted.is_empty() {
        return [f64::NAN; 5];
    }
    [
        sorted[0],
        quantile(sorted, 0.25),
        quantile(sorted, 0.5),
        quantile(sorted, 0.75),
        sorted[sorted.len() - 1],
    ]
}

#[allow(clippy::too_many_arguments)]
fn run_checkpoint(
    current: &GraphData,
    ops: &GraphOps,
    arch: &ModelArch,
    train_cfg: &TrainConfig,
    immune_cfg: &ImmuneConfig,
    options: &PipelineOptions,
    state: &mut ModelState,
    recorder: &mut FtRecorder,
    mut exo: Option<&mut ExoContext>,
    last: &EpochResult,
    epoch: usize,
) -> Result<CheckpointOutcome> {
    let len = immune_cfg.traj_len;
    let mut records = Vec::new();

    // 1. probes from the protected run
    let windows = collect_windows(recorder, current, len)?;
    if windows.node_probes.is_empty() {
        return Err(Error::Trajectory(
            "insufficient trajectory history at this checkpoint".into(),
        ));
    }

    // 2. reliable trajectories
    let (reliable_nodes, reliable_edges, reliable_raw_nodes): (
        Vec<NormalizedTrajectory>,
        Vec<NormalizedTrajectory>,
        Vec<Array2<f64>>,
    ) = match exo.as_deref_mut() {
        None => {
            let mask = current.reliable_mask();
            let mut rn = Vec::new();
            let mut raw = Vec::new();
            for (idx, &i) in windows.node_ids.iter().enumerate() {
                if mask[i] {
                    rn.push(windows.node_probes[idx].clone());
                    raw.push(windows.raw_node_windows[idx].clone());
                }
            }
            let mut re = Vec::new();
            for (idx, &(u, v, _)) in windows.edge_keys.iter().enumerate() {
                if mask[u] && mask[v] {
                    re.push(windows.edge_probes[idx].clone());
                }
            }
            (rn, re, raw)
        }
        Some(exo_ctx) => {
            for _ in 0..immune_cfg.checkpoint_interval {
                let res = train_epoch(&exo_ctx.ops, &mut exo_ctx.state, &exo_ctx.arch, &exo_ctx.cfg)?;
                exo_ctx
                    .recorder
                    .record_epoch(&exo_ctx.ops, &exo_ctx.arch, &exo_ctx.state, &res)?;
            }
            let exo_windows = collect_windows(&exo_ctx.recorder, exo_ctx.ops.graph(), len)?;
            (
                exo_windows.node_probes,
                exo_windows.edge_probes,
                exo_windows.raw_node_windows,
            )
        }
    };
    if reliable_nodes.len() < 2 {
        return Err(Error::Detector(format!(
            "only {} reliable node trajectories available",
            reliable_nodes.len()
        )));
    }

    // 3. thresholds
    let reliable_node_mses = pairwise_mses(&reliable_nodes);
    let reliable_edge_mses = pairwise_mses(&reliable_edges);
    let (rho_node, rho_edge) = match immune_cfg.rho {
        RhoRule::Fixed(r) => (r, r),
        RhoRule::ReliablePercentile { percentile, scale } => {
            if reliable_node_mses.is_empty() {
                return Err(Error::Detector("too few reliable nodes for ρ".into()));
            }
            let rn = quantile(&reliable_node_mses, percentile).max(1e-15) * scale;
            let re = if reliable_edge_mses.is_empty() {
                rn
            } else {
                quantile(&reliable_edge_mses, percentile).max(1e-15) * scale
            };
            (rn, re)
        }
    };

    // 4. λ and its diagnostic
    let reliable_sequences: Vec<Vec<Array1<f64>>> =
        reliable_raw_nodes.iter().map(|w| directions_of(w)).collect();
    let mut reliable_dots: Vec<f64> = reliable_sequences
        .iter()
        .flat_map(|dirs| {
            (1..dirs.len())
                .map(|s| dirs[s - 1].dot(&dirs[s]))
                .collect::<Vec<f64>>()
        })
        .collect();
    reliable_dots.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let lambda = match immune_cfg.lambda_mode {
        LambdaMode::ComputedGcn => {
            // the closed form needs the layer feeding the softmax, where
            // O = softmax(L Z W) is the actual class distribution
            let final_layer = arch.num_layers();
            let LayerWeights::Gcn { w } = &state.layers[final_layer - 1] else {
                return Err(Error::Config("GCN weights expected for computed λ".into()));
            };
            let z_prev = last.forward.layer_input(current, final_layer);
            gamma_bound(
                z_prev,
                w,
                ops.laplacian(),
                current.labels(),
                train_cfg.learning_rate,
                epoch,
                final_layer,
            )?
            .lambda
        }
        LambdaMode::EmpiricalConstant(v) => v,
        LambdaMode::EmpiricalPercentile(q) => quantile(&reliable_dots, q),
    };
    let lambda_violation_rate = if reliable_dots.is_empty() {
        0.0
    } else {
        reliable_dots.iter().filter(|&&d| d < lambda).count() as f64 / reliable_dots.len() as f64
    };
    // The closed-form bound routinely over-constrains the observed
    // dynamics (its derivation assumes vanilla steps on an unmasked sum
    // loss); the generator works against the tightest constraint the
    // reliable trajectories themselves satisfy, so a violated bound is
    // reported rather than fatal.
    let lambda_effective = if reliable_dots.is_empty() {
        lambda
    } else {
        lambda.min(quantile(&reliable_dots, 0.05))
    };

    // 5. detectors: transferred, or generated + negatively selected
    let ck_seed = immune_cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9);
    let (detectors, feasible_count, generator_satisfaction) = match &options.imported_detectors {
        Some(set) => (set.clone(), 0, 1.0),
        None => {
            let generator = train_generator(
                &reliable_sequences,
                lambda_effective,
                recorder.dim(),
                ck_seed,
            )?;
            // chains start from the system's own observed direction
            // vectors (the generator runs cyclically on the previous
            // epoch's vectors); negative selection then discards the
            // reliable-like ones
            let probe_dirs: Vec<Array1<f64>> = windows
                .raw_node_windows
                .iter()
                .flat_map(|w| directions_of(w))
                .collect();
            let chains = crate::immune::generator::generate_pool_chains(
                &generator,
                &probe_dirs,
                len,
                immune_cfg.generator_count,
                ck_seed ^ 0xFEED,
            )?;
            if std::env::var("GNN_IMMUNE_DEBUG").is_ok() {
                let disp = |w: &Array2<f64>| {
                    let d = w.row(w.nrows() - 1).to_owned() - w.row(0);
                    d.dot(&d).sqrt()
                };
                let mut node_disps: Vec<f64> =
                    windows.raw_node_windows.iter().map(disp).collect();
                node_disps.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let mut chain_disps: Vec<f64> = chains.iter().map(disp).collect();
                chain_disps.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let mut dir_norms: Vec<f64> =
                    probe_dirs.iter().map(|d| d.dot(d).sqrt()).collect();
                dir_norms.sort_by(|a, b| a.partial_cmp(b).unwrap());
                eprintln!(
                    "MAG epoch {epoch} node_scale {} node_disp {:?} chain_disp {:?} dir_norm {:?} sat {}",
                    windows.node_scale,
                    summary5(&node_disps),
                    summary5(&chain_disps),
                    summary5(&dir_norms),
                    generator.satisfaction_rate,
                );
            }
            let feasible = normalize_with_scale(&chains, windows.node_scale)?;
            let provenance = Provenance {
                arch: arch.kind,
                learning_rate: train_cfg.learning_rate,
                dataset_tag: options.dataset_tag.clone(),
                epoch,
            };
            let first =
                produce_detectors(&feasible, &reliable_nodes, rho_node, recorder.layer(), provenance)?;
            let set = if reliable_edges.is_empty() {
                first
            } else {
                produce_detectors(
                    &first.detectors,
                    &reliable_edges,
                    rho_edge,
                    recorder.layer(),
                    first.provenance.clone(),
                )?
            };
            let set = DetectorSet { rho: rho_node, ..set };
            (set, immune_cfg.generator_count, generator.satisfaction_rate)
        }
    };

    // 6. abnormality of every node and edge-view probe
    let node_flags = detect_batch(
        &windows.node_probes,
        &detectors,
        rho_node,
        immune_cfg.detection_rule,
    )?;
    let edge_flags = detect_batch(
        &windows.edge_probes,
        &detectors,
        rho_edge,
        immune_cfg.detection_rule,
    )?;
    let mut abnormal_nodes: BTreeMap<usize, f64> = BTreeMap::new();
    for (idx, &(abn, score)) in node_flags.iter().enumerate() {
        if abn {
            abnormal_nodes.insert(windows.node_ids[idx], score);
        }
    }
    let mut edge_abnormal: BTreeMap<(usize, usize, usize), (bool, f64)> = BTreeMap::new();
    for (idx, &flag) in edge_flags.iter().enumerate() {
        edge_abnormal.insert(windows.edge_keys[idx], flag);
    }

    if std::env::var("GNN_IMMUNE_DEBUG").is_ok() {
        for (idx, &(abn, score)) in node_flags.iter().enumerate() {
            eprintln!(
                "PROBE node {} epoch {epoch} score {score} abnormal {abn}",
                windows.node_ids[idx]
            );
        }
    }
    let mut node_scores: Vec<f64> = node_flags.iter().map(|&(_, s)| s).collect();
    node_scores.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut edge_scores: Vec<f64> = edge_flags.iter().map(|&(_, s)| s).collect();
    edge_scores.sort_by(|a, b| a.partial_cmp(b).unwrap());
    records.push(MetricRecord::Diagnostic {
        epoch,
        reliable_node_pair_mse: summary5(&reliable_node_mses),
        reliable_edge_pair_mse: summary5(&reliable_edge_mses),
        node_probe_score: summary5(&node_scores),
        edge_probe_score: summary5(&edge_scores),
    });

    // 7. inserted edges, then the deleted-edge search for the leftovers
    let mut verdicts = classify_inserted(current, &abnormal_nodes, &edge_abnormal);
    let flagged_nodes: BTreeSet<usize> = verdicts
        .iter()
        .flat_map(|v| v.evidence.abnormal_nodes.iter().copied())
        .collect();
    let mut unresolved: Vec<(usize, f64)> = abnormal_nodes
        .iter()
        .filter(|(n, _)| !flagged_nodes.contains(n))
        .map(|(&n, &s)| (n, s))
        .collect();
    unresolved.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    unresolved.truncate(immune_cfg.max_deletion_searches);
    for &(node, _) in &unresolved {
        let candidates =
            crate::immune::deletion_candidates(current, node, immune_cfg.probe_budget);
        let ctx = ProbeContext {
            graph: current,
            arch,
            train_cfg,
            immune_cfg,
            state,
            detectors: &detectors,
            rho_node,
            rho_edge,
            node_scale: windows.node_scale,
            edge_scale: windows.edge_scale,
        };
        if let Some(verdict) = classify_deleted(&ctx, node, &candidates)? {
            verdicts.push(verdict);
        }
    }

    // 8. rectification with rollback and buffer maintenance
    let flagged_inserted = verdicts
        .iter()
        .filter(|v| v.verdict == Verdict::Inserted)
        .count();
    let flagged_deleted = verdicts.len() - flagged_inserted;
    for v in &verdicts {
        records.push(MetricRecord::Flag {
            epoch,
            edge: v.edge,
            verdict: v.verdict,
            score: v
                .evidence
                .scores
                .iter()
                .copied()
                .fold(f64::INFINITY, f64::min),
            abnormal_nodes: v.evidence.abnormal_nodes.clone(),
        });
    }
    let (new_graph, outcome) = rectify(current, &verdicts, state, immune_cfg.rollback_depth)?;
    let changed = !outcome.removed.is_empty() || !outcome.added.is_empty();
    if changed {
        let mut affected: BTreeSet<usize> = BTreeSet::new();
        for &(u, v) in outcome.removed.iter().chain(outcome.added.iter()) {
            affected.insert(u);
            affected.insert(v);
        }
        let affected: Vec<usize> = affected.into_iter().collect();
        recorder.apply_rectification(
            &new_graph,
            state.epoch,
            &outcome.removed,
            &outcome.added,
            &affected,
        );
    }

    records.push(MetricRecord::Checkpoint {
        epoch,
        reliable_nodes: reliable_nodes.len(),
        reliable_edges: reliable_edges.len(),
        feasible: feasible_count,
        detectors: detectors.len(),
        rho_node,
        rho_edge,
        lambda,
        lambda_effective,
        lambda_violation_rate,
        generator_satisfaction,
        abnormal_nodes: abnormal_nodes.len(),
        flagged_inserted,
        flagged_deleted,
        rewound: outcome.rewound,
    });

    Ok(CheckpointOutcome {
        records,
        detectors: Some(detectors),
        new_graph: changed.then_some(new_graph),
        removed: outcome.removed,
        added: outcome.added,
    })
}

/// Context a deleted-edge probe runs in.
pub struct ProbeContext<'a> {
    pub graph: &'a GraphData,
    pub arch: &'a ModelArch,
    pub train_cfg: &'a TrainConfig,
    pub immune_cfg: &'a ImmuneConfig,
    pub state: &'a ModelState,
    pub detectors: &'a DetectorSet,
    pub rho_node: f64,
    pub rho_edge: f64,
    pub node_scale: f64,
    pub edge_scale: f64,
}

/// Deleted-edge search for an abnormal node whose incident edge
/// trajectories are all normal: tentatively add each candidate edge on a
/// cloned model, train `checkpoint_interval` probe epochs, and accept the
/// first candidate whose new edge trajectory AND the node's own
/// trajectory both test normal. Failed candidates leave no trace (the
/// probes run on clones). Returns the accepted verdict, if any.
pub fn classify_deleted(
    ctx: &ProbeContext<'_>,
    node: usize,
    candidates: &[(usize, usize)],
) -> Result<Option<EdgeVerdict>> {
    if candidates.is_empty() || ctx.immune_cfg.probe_budget == 0 {
        return Ok(None);
    }
    let len = ctx.immune_cfg.traj_len;
    let probe_epochs = ctx.immune_cfg.checkpoint_interval.max(len);
    let dim = ctx.arch.layer_dims[ctx.immune_cfg.interface_layer];

    let outcomes = par_map(candidates, |&(u, v)| -> Result<Option<f64>> {
        let mut edges: BTreeSet<(usize, usize)> = ctx.graph.edges().iter().copied().collect();
        edges.insert((u, v));
        let trial = ctx.graph.with_edges(edges)?;
        let trial_ops = GraphOps::new(&trial, ctx.train_cfg.laplacian_kind);
        let mut trial_state = ctx.state.clone();
        let mut trial_recorder = FtRecorder::with_start_epoch(
            &trial,
            ctx.immune_cfg.interface_layer,
            dim,
            Some(len + 2),
            trial_state.epoch,
        );
        let probe_cfg = TrainConfig {
            max_epochs: usize::MAX / 2,
            ..ctx.train_cfg.clone()
        };
        for _ in 0..probe_epochs {
            let res = train_epoch(&trial_ops, &mut trial_state, ctx.arch, &probe_cfg)?;
            trial_recorder.record_epoch(&trial_ops, ctx.arch, &trial_state, &res)?;
        }
        let edge_window = trial_recorder
            .edge_buffer(u, v, node)
            .and_then(|b| b.trailing(len));
        let node_window = trial_recorder.node_buffer(node).trailing(len);
        let (Some(ew), Some(nw)) = (edge_window, node_window) else {
            return Ok(None);
        };
        let edge_probe = normalize_with_scale(std::slice::from_ref(&ew), ctx.edge_scale)?;
        let node_probe = normalize_with_scale(std::slice::from_ref(&nw), ctx.node_scale)?;
        let (edge_abn, edge_score) = crate::immune::detect_abnormal_with_rho(
            &edge_probe[0],
            ctx.detectors,
            ctx.rho_edge,
            ctx.immune_cfg.detection_rule,
        )?;
        let (node_abn, _) = crate::immune::detect_abnormal_with_rho(
            &node_probe[0],
            ctx.detectors,
            ctx.rho_node,
            ctx.immune_cfg.detection_rule,
        )?;
        Ok((!edge_abn && !node_abn).then_some(edge_score))
    });

    for (idx, outcome) in outcomes.into_iter().enumerate() {
        if let Some(score) = outcome? {
            let (u, v) = candidates[idx];
            return Ok(Some(EdgeVerdict {
                edge: (u, v),
                verdict: Verdict::Deleted,
                evidence: Evidence {
                    abnormal_nodes: vec![node],
                    edge_views: vec![(u, v, node)],
                    scores: vec![score],
                },
            }));
        }
    }
    Ok(None)
}
