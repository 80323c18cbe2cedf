//! Negative selection and the edge classification rules.
//!
//! Detectors are the generated feasible trajectories that do NOT resemble
//! any reliable trajectory (minimum MSE strictly above ρ). A probe is
//! abnormal when it falls within ρ of the detector pool. Inserted edges
//! are incident edges of abnormal nodes whose own edge trajectory is
//! abnormal; abnormal nodes with only normal incident edges fall through
//! to the deleted-edge search in the pipeline.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::graph::GraphData;
use crate::immune::{DetectionRule, DetectorSet, EdgeVerdict, Evidence, Provenance, Verdict};
use crate::par::par_map;
use crate::trajectory::{trajectory_mse, NormalizedTrajectory};

/// Negative selection: keep the feasible trajectories whose minimum MSE
/// to every reliable trajectory strictly exceeds ρ. Degenerate feasible
/// trajectories never become detectors.
pub fn produce_detectors(
    feasible: &[NormalizedTrajectory],
    reliable: &[NormalizedTrajectory],
    rho: f64,
    layer: usize,
    provenance: Provenance,
) -> Result<DetectorSet> {
    if reliable.is_empty() {
        return Err(Error::Detector(
            "negative selection needs at least one reliable trajectory".into(),
        ));
    }
    let length = reliable[0].len();
    let dim = reliable[0].dim();
    for t in feasible.iter().chain(reliable.iter()) {
        if t.len() != length || t.dim() != dim {
            return Err(Error::Dimension(format!(
                "unaligned trajectory ({}, {}) in a ({length}, {dim}) set",
                t.len(),
                t.dim()
            )));
        }
    }
    let keep = par_map(feasible, |f| {
        if f.degenerate {
            return false;
        }
        let mut min = f64::INFINITY;
        for r in reliable {
            let mse = trajectory_mse(f, r).expect("aligned by the check above");
            if mse < min {
                min = mse;
            }
        }
        min > rho
    });
    let detectors: Vec<NormalizedTrajectory> = feasible
        .iter()
        .zip(keep)
        .filter_map(|(f, k)| k.then(|| f.clone()))
        .collect();
    Ok(DetectorSet {
        detectors,
        rho,
        layer,
        length,
        dim,
        provenance,
    })
}

/// Abnormality score of one probe against a detector pool under the
/// given rule; the probe is abnormal when the score is at most `rho`.
pub fn detect_abnormal_with_rho(
    probe: &NormalizedTrajectory,
    detectors: &DetectorSet,
    rho: f64,
    rule: DetectionRule,
) -> Result<(bool, f64)> {
    if detectors.is_empty() {
        return Ok((false, f64::INFINITY));
    }
    detectors.check_compatible(probe.len(), probe.dim())?;
    let score = match rule {
        DetectionRule::MinOverDetectors => {
            let mut min = f64::INFINITY;
            for d in &detectors.detectors {
                let mse = trajectory_mse(probe, d)?;
                if mse < min {
                    min = mse;
                }
            }
            min
        }
        DetectionRule::MeanOverDetectors => {
            let mut total = 0.0;
            for d in &detectors.detectors {
                total += trajectory_mse(probe, d)?;
            }
            total / detectors.len() as f64
        }
    };
    Ok((score <= rho, score))
}

/// Abnormality at the detector set's own threshold, nearest-detector rule.
pub fn detect_abnormal(
    probe: &NormalizedTrajectory,
    detectors: &DetectorSet,
) -> Result<(bool, f64)> {
    detect_abnormal_with_rho(probe, detectors, detectors.rho, DetectionRule::MinOverDetectors)
}

/// Batch abnormality over many probes, parallel across probes.
pub fn detect_batch(
    probes: &[NormalizedTrajectory],
    detectors: &DetectorSet,
    rho: f64,
    rule: DetectionRule,
) -> Result<Vec<(bool, f64)>> {
    let results = par_map(probes, |p| detect_abnormal_with_rho(p, detectors, rho, rule));
    results.into_iter().collect()
}

/// Inserted-edge rule: for each abnormal node, every incident edge whose
/// edge trajectory (viewed from that node) is abnormal gets flagged, once
/// per undirected edge, with merged evidence.
pub fn classify_inserted(
    g: &GraphData,
    abnormal_nodes: &BTreeMap<usize, f64>,
    edge_abnormal: &BTreeMap<(usize, usize, usize), (bool, f64)>,
) -> Vec<EdgeVerdict> {
    let mut flagged: BTreeMap<(usize, usize), Evidence> = BTreeMap::new();
    for (&node, &node_score) in abnormal_nodes {
        for &nb in g.neighbors(node) {
            let key = (node.min(nb), node.max(nb), node);
            let Some(&(is_abnormal, score)) = edge_abnormal.get(&key) else {
                continue;
            };
            if !is_abnormal {
                continue;
            }
            let entry = flagged.entry((key.0, key.1)).or_default();
            if !entry.abnormal_nodes.contains(&node) {
                entry.abnormal_nodes.push(node);
                entry.scores.push(node_score);
            }
            entry.edge_views.push(key);
            entry.scores.push(score);
        }
    }
    flagged
        .into_iter()
        .map(|(edge, evidence)| EdgeVerdict {
            edge,
            verdict: Verdict::Inserted,
            evidence,
        })
        .collect()
}

/// Candidate endpoints for the deleted-edge search around an abnormal
/// node: non-edges inside its 2-hop neighborhood, ranked by feature
/// cosine similarity, capped at `budget`.
pub fn deletion_candidates(g: &GraphData, node: usize, budget: usize) -> Vec<(usize, usize)> {
    let mut two_hop: BTreeSet<usize> = BTreeSet::new();
    for &mid in g.neighbors(node) {
        for &far in g.neighbors(mid) {
            two_hop.insert(far);
        }
        two_hop.insert(mid);
    }
    two_hop.remove(&node);
    let f_node = g.features().row(node);
    let n_node = f_node.dot(&f_node).sqrt().max(1e-30);
    let mut scored: Vec<(f64, usize)> = two_hop
        .into_iter()
        .filter(|&o| !g.has_edge(node, o))
        .map(|o| {
            let f_o = g.features().row(o);
            let cos = f_node.dot(&f_o) / (n_node * f_o.dot(&f_o).sqrt().max(1e-30));
            (cos, o)
        })
        .collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    scored
        .into_iter()
        .take(budget)
        .map(|(_, o)| (node.min(o), node.max(o)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ArchKind;
    use crate::trajectory::normalize;
    use ndarray::{Array1, Array2};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn provenance() -> Provenance {
        Provenance {
            arch: ArchKind::Gcn,
            learning_rate: 0.5,
            dataset_tag: "test".into(),
            epoch: 0,
        }
    }

    fn random_set(count: usize, len: usize, dim: usize, seed: u64) -> Vec<NormalizedTrajectory> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw: Vec<Array2<f64>> = (0..count)
            .map(|_| Array2::from_shape_fn((len, dim), |_| rng.random_range(-1.0..1.0)))
            .collect();
        normalize(&raw).unwrap()
    }

    #[test]
    fn feasible_equal_to_reliable_produces_no_detectors() {
        let set = random_set(6, 5, 3, 1);
        let d = produce_detectors(&set, &set, 1e-9, 1, provenance()).unwrap();
        assert!(d.is_empty());
    }

    #[test]
    fn all_far_feasible_become_detectors() {
        let reliable = random_set(4, 5, 3, 2);
        // shift a copy far away: every pairwise MSE is large
        let far: Vec<NormalizedTrajectory> = reliable
            .iter()
            .map(|t| {
                let mut c = t.clone();
                c.points.mapv_inplace(|v| v + 100.0);
                c
            })
            .collect();
        let d = produce_detectors(&far, &reliable, 0.5, 1, provenance()).unwrap();
        assert_eq!(d.len(), far.len());
    }

    #[test]
    fn screening_matches_bruteforce_filter() {
        let feasible = random_set(60, 6, 4, 3);
        let reliable = random_set(25, 6, 4, 4);
        let rho = 0.05;
        let got = produce_detectors(&feasible, &reliable, rho, 1, provenance()).unwrap();
        let mut expected = Vec::new();
        for f in &feasible {
            if f.degenerate {
                continue;
            }
            let min = reliable
                .iter()
                .map(|r| trajectory_mse(f, r).unwrap())
                .fold(f64::INFINITY, f64::min);
            if min > rho {
                expected.push(f.points.clone());
            }
        }
        assert_eq!(got.len(), expected.len());
        for (a, b) in got.detectors.iter().zip(&expected) {
            assert_eq!(&a.points, b);
        }
    }

    #[test]
    fn empty_reliable_set_is_an_error() {
        let feasible = random_set(3, 4, 2, 5);
        assert!(produce_detectors(&feasible, &[], 0.1, 1, provenance()).is_err());
    }

    #[test]
    fn empty_detector_set_says_normal_with_infinite_score() {
        let reliable = random_set(3, 4, 2, 6);
        let d = produce_detectors(&[], &reliable, 0.1, 1, provenance()).unwrap();
        let (abnormal, score) = detect_abnormal(&reliable[0], &d).unwrap();
        assert!(!abnormal);
        assert!(score.is_infinite());
    }

    #[test]
    fn probe_equal_to_detector_is_abnormal_with_zero_score() {
        let reliable = random_set(3, 4, 2, 7);
        let far = {
            let mut c = reliable[0].clone();
            c.points.mapv_inplace(|v| v + 50.0);
            c
        };
        let d = produce_detectors(
            std::slice::from_ref(&far),
            &reliable,
            0.01,
            1,
            provenance(),
        )
        .unwrap();
        let (abnormal, score) = detect_abnormal(&far, &d).unwrap();
        assert!(abnormal);
        assert_eq!(score, 0.0);
    }

    #[test]
    fn probe_just_outside_rho_is_normal() {
        let reliable = random_set(2, 3, 2, 8);
        let detector = {
            let mut c = reliable[0].clone();
            c.points.mapv_inplace(|v| v + 10.0);
            c
        };
        let rho = 0.25;
        let d = produce_detectors(
            std::slice::from_ref(&detector),
            &reliable,
            rho,
            1,
            provenance(),
        )
        .unwrap();
        assert_eq!(d.len(), 1);
        // probe at per-point distance just past sqrt(rho)
        let eps = 1e-6;
        let offset = (rho + eps).sqrt();
        let mut probe = detector.clone();
        probe.points.column_mut(0).mapv_inplace(|v| v + offset);
        let (abnormal, score) = detect_abnormal(&probe, &d).unwrap();
        assert!(!abnormal, "score {score} should exceed rho {rho}");
        assert!((score - (rho + eps)).abs() < 1e-9);
    }

    #[test]
    fn mean_rule_uses_average_score() {
        let reliable = random_set(2, 3, 2, 9);
        let mut near = reliable[0].clone();
        near.points.mapv_inplace(|v| v + 30.0);
        let mut far = reliable[0].clone();
        far.points.mapv_inplace(|v| v + 60.0);
        let d = produce_detectors(&[near.clone(), far], &reliable, 0.1, 1, provenance()).unwrap();
        assert_eq!(d.len(), 2);
        let (min_abn, min_score) =
            detect_abnormal_with_rho(&near, &d, 0.5, DetectionRule::MinOverDetectors).unwrap();
        let (mean_abn, mean_score) =
            detect_abnormal_with_rho(&near, &d, 0.5, DetectionRule::MeanOverDetectors).unwrap();
        assert!(min_abn);
        assert_eq!(min_score, 0.0);
        assert!(!mean_abn);
        assert!(mean_score > 0.5);
    }

    #[test]
    fn inserted_classification_requires_both_gates() {
        let g = crate::model::test_support::random_graph(5, 1.0, 3, 2, 10);
        // node 0 abnormal; edge (0,1) abnormal from 0's view; edge (0,2)
        // normal; node 3 abnormal with no abnormal incident edges
        let mut abnormal_nodes = BTreeMap::new();
        abnormal_nodes.insert(0usize, 0.001);
        abnormal_nodes.insert(3usize, 0.002);
        let mut edge_abnormal = BTreeMap::new();
        for &(u, v) in g.edges() {
            for target in [u, v] {
                edge_abnormal.insert((u, v, target), (false, 1.0));
            }
        }
        edge_abnormal.insert((0, 1, 0), (true, 0.0005));
        let verdicts = classify_inserted(&g, &abnormal_nodes, &edge_abnormal);
        assert_eq!(verdicts.len(), 1);
        assert_eq!(verdicts[0].edge, (0, 1));
        assert_eq!(verdicts[0].verdict, Verdict::Inserted);
        assert_eq!(verdicts[0].evidence.abnormal_nodes, vec![0]);
    }

    #[test]
    fn no_abnormal_nodes_no_verdicts() {
        let g = crate::model::test_support::random_graph(4, 1.0, 3, 2, 11);
        let verdicts = classify_inserted(&g, &BTreeMap::new(), &BTreeMap::new());
        assert!(verdicts.is_empty());
    }

    #[test]
    fn deletion_candidates_are_two_hop_non_edges_ranked_by_cosine() {
        // path 0-1-2 plus 1-3: node 0's 2-hop set is {1,2,3}; 1 is a
        // neighbor, so candidates are {2,3}
        let mut features = Array2::<f64>::zeros((4, 2));
        features.row_mut(0).assign(&Array1::from_vec(vec![1.0, 0.0]));
        features.row_mut(1).assign(&Array1::from_vec(vec![0.0, 1.0]));
        features.row_mut(2).assign(&Array1::from_vec(vec![0.9, 0.1]));
        features.row_mut(3).assign(&Array1::from_vec(vec![0.1, 0.9]));
        let mut labels = Array2::<f64>::zeros((4, 2));
        for i in 0..4 {
            labels[[i, i % 2]] = 1.0;
        }
        let g = GraphData::new(
            features,
            labels,
            [(0usize, 1usize), (1, 2), (1, 3)],
            vec![true; 4],
            vec![false; 4],
            vec![false; 4],
            vec![false; 4],
        )
        .unwrap();
        let cands = deletion_candidates(&g, 0, 10);
        assert_eq!(cands, vec![(0, 2), (0, 3)]);
        let capped = deletion_candidates(&g, 0, 1);
        assert_eq!(capped, vec![(0, 2)]);
    }
}
