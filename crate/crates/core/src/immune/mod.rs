//! The defense core: the feasibility bound on consecutive trajectory
//! directions, the cyclic self-supervised trajectory generator, negative
//! selection, inserted/deleted edge classification, rectification with
//! weight rollback, and the checkpointed training pipeline tying it all
//! together.

mod bound;
mod detect;
pub(crate) mod generator;
mod pipeline;
mod rectify;

use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::model::ArchKind;
use crate::trajectory::{NormalizedTrajectory, ScaleMeta};

pub use bound::gamma_bound;
pub use detect::{
    classify_inserted, deletion_candidates, detect_abnormal, detect_abnormal_with_rho,
    detect_batch, produce_detectors,
};
pub use generator::{
    generate_feasible_chains, generate_feasible_fts, generate_pool_chains, train_generator,
    Generator,
};
pub use pipeline::{
    classify_deleted, run_pipeline, DefenseMode, MetricRecord, PipelineOptions, PipelineResult,
    ProbeContext, ReliableSource,
};
pub use rectify::{rectify, RectifyOutcome};

/// How the feasibility bound λ is obtained.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaMode {
    /// The closed-form bound, valid for GCN under vanilla gradient steps.
    ComputedGcn,
    /// A caller-supplied empirical constant.
    EmpiricalConstant(f64),
    /// Percentile of the observed reliable consecutive inner products
    /// (the default stand-in for architectures without a closed form).
    EmpiricalPercentile(f64),
}

/// How the MSE threshold ρ is obtained at each checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RhoRule {
    Fixed(f64),
    /// Percentile of pairwise reliable-reliable MSEs times `scale`.
    ReliablePercentile { percentile: f64, scale: f64 },
}

/// Abnormality rule: nearest detector (the default) or mean over all
/// detectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectionRule {
    MinOverDetectors,
    MeanOverDetectors,
}

/// Knobs of the immune defense; defaults mirror the experimental setup
/// (penultimate-layer interface, adaptive ρ, checkpointed detection).
#[derive(Debug, Clone)]
pub struct ImmuneConfig {
    pub mode: DefenseMode,
    pub rho: RhoRule,
    /// Trajectory window length ϱ compared against detectors.
    pub traj_len: usize,
    /// Rollback depth δ applied after a rectification.
    pub rollback_depth: usize,
    /// Checkpoint interval c in epochs.
    pub checkpoint_interval: usize,
    /// Interface layer ℓ (1-based).
    pub interface_layer: usize,
    /// Feasible trajectories generated per checkpoint.
    pub generator_count: usize,
    pub lambda_mode: LambdaMode,
    pub detection_rule: DetectionRule,
    /// Candidate edges probed per unresolved abnormal node.
    pub probe_budget: usize,
    /// Unresolved abnormal nodes probed for deletions per checkpoint.
    pub max_deletion_searches: usize,
    pub seed: u64,
}

impl Default for ImmuneConfig {
    fn default() -> Self {
        ImmuneConfig {
            mode: DefenseMode::Full,
            rho: RhoRule::ReliablePercentile {
                percentile: 0.01,
                scale: 1.0,
            },
            traj_len: 8,
            rollback_depth: 20,
            checkpoint_interval: 20,
            interface_layer: 1,
            generator_count: 512,
            lambda_mode: LambdaMode::ComputedGcn,
            detection_rule: DetectionRule::MinOverDetectors,
            probe_budget: 10,
            max_deletion_searches: 3,
            seed: 0,
        }
    }
}

impl ImmuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.traj_len < 2 {
            return Err(Error::Config(format!(
                "trajectory length must be at least 2, got {}",
                self.traj_len
            )));
        }
        if self.checkpoint_interval < 1 {
            return Err(Error::Config("checkpoint interval must be >= 1".into()));
        }
        if self.rollback_depth < 1 {
            return Err(Error::Config("rollback depth must be >= 1".into()));
        }
        if let RhoRule::Fixed(r) = self.rho {
            if !(r > 0.0) {
                return Err(Error::Config(format!("rho must be positive, got {r}")));
            }
        }
        if let RhoRule::ReliablePercentile { percentile, scale } = self.rho {
            if !(0.0..=1.0).contains(&percentile) || !(scale > 0.0) {
                return Err(Error::Config(
                    "rho percentile must be in [0,1] with positive scale".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Where the trusted trajectories come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryKind {
    Node,
    Edge,
}

/// Provenance carried by a detector set for transfer audits.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Provenance {
    pub arch: ArchKind,
    pub learning_rate: f64,
    pub dataset_tag: String,
    pub epoch: usize,
}

/// Normalized trajectories that survived negative selection, plus the
/// threshold they were screened at. The transferable artifact.
#[derive(Debug, Clone)]
pub struct DetectorSet {
    pub detectors: Vec<NormalizedTrajectory>,
    pub rho: f64,
    pub layer: usize,
    pub length: usize,
    pub dim: usize,
    pub provenance: Provenance,
}

impl DetectorSet {
    pub fn is_empty(&self) -> bool {
        self.detectors.is_empty()
    }

    pub fn len(&self) -> usize {
        self.detectors.len()
    }

    /// Rejects probe shapes this set cannot judge.
    pub fn check_compatible(&self, length: usize, dim: usize) -> Result<()> {
        if self.length != length || self.dim != dim {
            return Err(Error::DetectorMismatch {
                expected: format!("length {} dim {}", self.length, self.dim),
                found: format!("length {length} dim {dim}"),
            });
        }
        Ok(())
    }
}

/// The classification of one candidate edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Inserted,
    Deleted,
    Clean,
}

/// Scores and entities backing a verdict.
#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
pub struct Evidence {
    pub abnormal_nodes: Vec<usize>,
    /// Edge views `(u, v, target)` that tested abnormal.
    pub edge_views: Vec<(usize, usize, usize)>,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EdgeVerdict {
    pub edge: (usize, usize),
    pub verdict: Verdict,
    pub evidence: Evidence,
}

const DETECTOR_FORMAT_VERSION: u32 = 1;

/// Writes a detector set in the versioned text format: a header of
/// `key value` lines, then one detector per line as whitespace-separated
/// reals (row-major over the ϱ × d points).
pub fn write_detectors<W: Write>(out: &mut W, set: &DetectorSet) -> Result<()> {
    writeln!(out, "detectorset {DETECTOR_FORMAT_VERSION}")?;
    writeln!(out, "arch {}", set.provenance.arch.as_str())?;
    writeln!(out, "layer {}", set.layer)?;
    writeln!(out, "length {}", set.length)?;
    writeln!(out, "dim {}", set.dim)?;
    writeln!(out, "rho {}", set.rho)?;
    writeln!(out, "eta {}", set.provenance.learning_rate)?;
    writeln!(out, "provenance {}", set.provenance.dataset_tag)?;
    writeln!(out, "epoch {}", set.provenance.epoch)?;
    for det in &set.detectors {
        let mut line = String::with_capacity(set.length * set.dim * 20);
        for v in det.points.iter() {
            if !line.is_empty() {
                line.push(' ');
            }
            line.push_str(&format!("{v}"));
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// Reads the format written by [`write_detectors`], validating shape and
/// version and rejecting anything else with a specific error.
pub fn read_detectors<R: BufRead>(reader: R) -> Result<DetectorSet> {
    let mut lines = reader.lines().enumerate();
    let mut header = std::collections::BTreeMap::new();
    let mut first = true;
    let mut body_start: Vec<(usize, String)> = Vec::new();
    for item in &mut lines {
        let (idx, line) = (item.0, item.1?);
        let line = line.trim().to_string();
        if line.is_empty() {
            continue;
        }
        if first {
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 2 || parts[0] != "detectorset" {
                return Err(Error::DetectorMismatch {
                    expected: "a `detectorset <version>` header".into(),
                    found: line,
                });
            }
            let version: u32 = parts[1].parse().map_err(|_| Error::DetectorMismatch {
                expected: "numeric version".into(),
                found: parts[1].to_string(),
            })?;
            if version != DETECTOR_FORMAT_VERSION {
                return Err(Error::DetectorMismatch {
                    expected: format!("format version {DETECTOR_FORMAT_VERSION}"),
                    found: format!("version {version}"),
                });
            }
            first = false;
            continue;
        }
        let (key, value) = match line.split_once(' ') {
            Some(kv) => kv,
            None => (line.as_str(), ""),
        };
        if ["arch", "layer", "length", "dim", "rho", "eta", "provenance", "epoch"]
            .contains(&key)
        {
            header.insert(key.to_string(), value.to_string());
        } else {
            body_start.push((idx, line.clone()));
            break;
        }
    }
    let get = |k: &str| -> Result<String> {
        header.get(k).cloned().ok_or_else(|| Error::DetectorMismatch {
            expected: format!("header field {k}"),
            found: "missing".into(),
        })
    };
    let arch = ArchKind::parse(&get("arch")?)?;
    let layer: usize = get("layer")?.parse().map_err(|_| Error::DetectorMismatch {
        expected: "numeric layer".into(),
        found: get("layer").unwrap_or_default(),
    })?;
    let length: usize = get("length")?.parse().map_err(|_| Error::DetectorMismatch {
        expected: "numeric length".into(),
        found: get("length").unwrap_or_default(),
    })?;
    let dim: usize = get("dim")?.parse().map_err(|_| Error::DetectorMismatch {
        expected: "numeric dim".into(),
        found: get("dim").unwrap_or_default(),
    })?;
    let rho: f64 = get("rho")?.parse().map_err(|_| Error::DetectorMismatch {
        expected: "numeric rho".into(),
        found: get("rho").unwrap_or_default(),
    })?;
    let eta: f64 = get("eta")?.parse().map_err(|_| Error::DetectorMismatch {
        expected: "numeric eta".into(),
        found: get("eta").unwrap_or_default(),
    })?;
    let epoch: usize = get("epoch")?.parse().unwrap_or(0);
    let tag = get("provenance")?;

    let mut detectors = Vec::new();
    let mut parse_row = |line_no: usize, line: &str| -> Result<()> {
        let vals: Vec<&str> = line.split_whitespace().collect();
        if vals.len() != length * dim {
            return Err(Error::Parse {
                path: "<detectors>".into(),
                line: line_no + 1,
                detail: format!("expected {} values, found {}", length * dim, vals.len()),
            });
        }
        let mut points = ndarray::Array2::<f64>::zeros((length, dim));
        for (k, v) in vals.iter().enumerate() {
            points[[k / dim, k % dim]] = v.parse().map_err(|_| Error::Parse {
                path: "<detectors>".into(),
                line: line_no + 1,
                detail: format!("bad real {v:?}"),
            })?;
        }
        detectors.push(NormalizedTrajectory {
            points,
            degenerate: false,
            scale_meta: ScaleMeta {
                translation: ndarray::Array1::zeros(dim),
                endpoint_norm: 0.0,
                cos_to_axis: 1.0,
                set_scale: 1.0,
            },
        });
        Ok(())
    };
    for (idx, line) in body_start {
        parse_row(idx, &line)?;
    }
    for item in lines {
        let (idx, line) = (item.0, item.1?);
        if line.trim().is_empty() {
            continue;
        }
        parse_row(idx, line.trim())?;
    }
    Ok(DetectorSet {
        detectors,
        rho,
        layer,
        length,
        dim,
        provenance: Provenance {
            arch,
            learning_rate: eta,
            dataset_tag: tag,
            epoch,
        },
    })
}
