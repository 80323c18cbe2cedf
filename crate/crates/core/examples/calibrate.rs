//! Calibration harness for the desk-scale fixture: measures clean,
//! poisoned and defended accuracy plus flagging precision across seeds.
//!
//! Usage: `cargo run --release -p gnn-immune --example calibrate [seeds]`

use std::time::Instant;

use gnn_immune::attack::{greedy_poison, GreedyConfig};
use gnn_immune::data::{sbm_generate, split_reliable, SbmSpec, SplitSpec};
use gnn_immune::graph::LaplacianKind;
use gnn_immune::immune::{
    run_pipeline, DefenseMode, ImmuneConfig, MetricRecord, PipelineOptions, ReliableSource,
};
use gnn_immune::model::{ArchKind, ModelArch, TrainConfig};

fn fixture(seed: u64) -> gnn_immune::graph::GraphData {
    let spec = SbmSpec {
        blocks: vec![250, 250],
        p_in: 0.05,
        p_out: 0.002,
        feature_dim: 16,
        feature_noise: 1.0,
        seed,
        split: SplitSpec {
            train_ratio: 0.1,
            val_ratio: 0.1,
            seed,
            num_classes: None,
        },
    };
    let g = sbm_generate(&spec).unwrap();
    split_reliable(&g, 0.1, seed).unwrap()
}

fn arch() -> ModelArch {
    ModelArch::new(ArchKind::Gcn, vec![16, 16, 2])
}

fn train_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 0.5,
        max_epochs: 150,
        seed,
        snapshot_capacity: 24,
        laplacian_kind: LaplacianKind::SymNormalized,
    }
}

fn immune_cfg(mode: DefenseMode, seed: u64) -> ImmuneConfig {
    ImmuneConfig {
        mode,
        traj_len: 8,
        rollback_depth: 20,
        checkpoint_interval: 20,
        interface_layer: 1,
        generator_count: 512,
        probe_budget: 10,
        max_deletion_searches: 3,
        seed,
        ..Default::default()
    }
}

fn main() {
    let seeds: Vec<u64> = std::env::args()
        .nth(1)
        .map(|s| s.split(',').map(|x| x.parse().unwrap()).collect())
        .unwrap_or_else(|| vec![1, 2, 3, 4, 5]);

    for &seed in &seeds {
        let t0 = Instant::now();
        let clean = fixture(seed);
        let a = arch();
        let tc = train_cfg(seed);

        // clean baseline (no defense)
        let clean_run = run_pipeline(
            &clean,
            &a,
            &tc,
            &immune_cfg(DefenseMode::Off, seed),
            &ReliableSource::Subgraph,
            &PipelineOptions::default(),
        )
        .unwrap();

        // attack
        let t_attack = Instant::now();
        let budget = (0.2 * clean.num_edges() as f64).round() as usize;
        let (poisoned, truth) =
            greedy_poison(&clean, &a, budget, seed, &GreedyConfig::default()).unwrap();
        let attack_s = t_attack.elapsed().as_secs_f64();

        // undefended on poisoned graph
        let poisoned_run = run_pipeline(
            &poisoned,
            &a,
            &tc,
            &immune_cfg(DefenseMode::Off, seed),
            &ReliableSource::Subgraph,
            &PipelineOptions::default(),
        )
        .unwrap();

        // defended on poisoned graph
        let t_def = Instant::now();
        let defended_run = run_pipeline(
            &poisoned,
            &a,
            &tc,
            &immune_cfg(DefenseMode::Full, seed),
            &ReliableSource::Subgraph,
            &PipelineOptions::default(),
        )
        .unwrap();
        let defend_s = t_def.elapsed().as_secs_f64();

        let flagged = &defended_run.flagged_inserted;
        let true_pos = flagged.intersection(&truth.inserted).count();
        let precision = if flagged.is_empty() {
            f64::NAN
        } else {
            true_pos as f64 / flagged.len() as f64
        };
        let recall = if truth.inserted.is_empty() {
            f64::NAN
        } else {
            true_pos as f64 / truth.inserted.len() as f64
        };

        let clean_acc = clean_run.final_test_accuracy;
        let poisoned_acc = poisoned_run.final_test_accuracy;
        let defended_acc = defended_run.final_test_accuracy;
        let gap = clean_acc - poisoned_acc;
        let recovered = if gap.abs() > 1e-12 {
            (defended_acc - poisoned_acc) / gap
        } else {
            f64::NAN
        };

        let mut checkpoints = 0;
        let mut skips = 0;
        let mut detector_counts = Vec::new();
        let mut abnormal_counts = Vec::new();
        for m in &defended_run.metrics {
            match m {
                MetricRecord::Checkpoint {
                    detectors,
                    abnormal_nodes,
                    ..
                } => {
                    checkpoints += 1;
                    detector_counts.push(*detectors);
                    abnormal_counts.push(*abnormal_nodes);
                }
                MetricRecord::CheckpointSkipped { reason, .. } => {
                    skips += 1;
                    eprintln!("  skip: {reason}");
                }
                MetricRecord::Diagnostic {
                    epoch,
                    reliable_node_pair_mse,
                    node_probe_score,
                    edge_probe_score,
                    ..
                } => {
                    eprintln!(
                        "  diag e{epoch}: rel_mse={:?} node_score={:?} edge_score={:?}",
                        reliable_node_pair_mse, node_probe_score, edge_probe_score
                    );
                }
                _ => {}
            }
        }

        println!(
            "seed {seed}: |E|={} budget={budget} clean={:.3} poisoned={:.3} (drop {:.1} pts) \
             defended={:.3} recovered={:.0}% prec={:.2} recall={:.2} flagged={} restored={} \
             ck={checkpoints} skip={skips} dets={:?} abn={:?} [attack {:.1}s defend {:.1}s total {:.1}s]",
            clean.num_edges(),
            clean_acc,
            poisoned_acc,
            gap * 100.0,
            defended_acc,
            recovered * 100.0,
            precision,
            recall,
            flagged.len(),
            defended_run.flagged_deleted.len(),
            detector_counts,
            abnormal_counts,
            attack_s,
            defend_s,
            t0.elapsed().as_secs_f64(),
        );
    }
}
