//! Poisoning attacks with ground-truth perturbation sets.
//!
//! Two generators: uniform random edge flips, and a greedy attack that
//! trains a surrogate GCN, scores candidate flips by the gradient of the
//! training loss with respect to the operator entries, then re-evaluates
//! the top-scored candidates exactly (frozen weights) and applies the
//! single worst flip per step. Both honor the reliable region: a pair
//! with both endpoints reliable is never touched.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{GraphData, Laplacian};
use crate::model::{
    forward, masked_cross_entropy, train_epoch, ArchKind, GraphOps, LayerWeights, ModelArch,
    ModelState, TrainConfig,
};
use crate::par::par_map;

/// Ground-truth record of an attack: which pairs were inserted and which
/// existing edges were deleted, relative to the clean graph.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationSet {
    pub inserted: BTreeSet<(usize, usize)>,
    pub deleted: BTreeSet<(usize, usize)>,
    pub rate: f64,
    pub seed: u64,
}

impl PerturbationSet {
    pub fn len(&self) -> usize {
        self.inserted.len() + self.deleted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inserted.is_empty() && self.deleted.is_empty()
    }

    /// Applies the perturbation to a clean graph.
    pub fn apply(&self, g: &GraphData) -> Result<GraphData> {
        let mut edges: BTreeSet<(usize, usize)> = g.edges().iter().copied().collect();
        for &(u, v) in &self.deleted {
            if !edges.remove(&(u, v)) {
                return Err(Error::InvalidGraph(format!(
                    "deleted edge ({u}, {v}) not present in the clean graph"
                )));
            }
        }
        for &(u, v) in &self.inserted {
            if !edges.insert((u, v)) {
                return Err(Error::InvalidGraph(format!(
                    "inserted edge ({u}, {v}) already in the clean graph"
                )));
            }
        }
        g.with_edges(edges)
    }

    /// Undoes the perturbation on a perturbed graph.
    pub fn revert(&self, g: &GraphData) -> Result<GraphData> {
        let mut edges: BTreeSet<(usize, usize)> = g.edges().iter().copied().collect();
        for &(u, v) in &self.inserted {
            edges.remove(&(u, v));
        }
        for &(u, v) in &self.deleted {
            edges.insert((u, v));
        }
        g.with_edges(edges)
    }

    /// Line format: `+ u v` for insertions, `- u v` for deletions.
    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<()> {
        for &(u, v) in &self.inserted {
            writeln!(out, "+ {u} {v}")?;
        }
        for &(u, v) in &self.deleted {
            writeln!(out, "- {u} {v}")?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(reader: R, rate: f64, seed: u64) -> Result<Self> {
        let mut inserted = BTreeSet::new();
        let mut deleted = BTreeSet::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            let body = line.trim();
            if body.is_empty() {
                continue;
            }
            let parts: Vec<&str> = body.split_whitespace().collect();
            if parts.len() != 3 || (parts[0] != "+" && parts[0] != "-") {
                return Err(Error::Parse {
                    path: "<perturbations>".into(),
                    line: idx + 1,
                    detail: "expected `+ u v` or `- u v`".into(),
                });
            }
            let u: usize = parts[1].parse().map_err(|_| Error::Parse {
                path: "<perturbations>".into(),
                line: idx + 1,
                detail: "bad node id".into(),
            })?;
            let v: usize = parts[2].parse().map_err(|_| Error::Parse {
                path: "<perturbations>".into(),
                line: idx + 1,
                detail: "bad node id".into(),
            })?;
            let key = (u.min(v), u.max(v));
            if parts[0] == "+" {
                inserted.insert(key);
            } else {
                deleted.insert(key);
            }
        }
        Ok(PerturbationSet {
            inserted,
            deleted,
            rate,
            seed,
        })
    }
}

fn protected(g: &GraphData, u: usize, v: usize) -> bool {
    g.reliable_mask()[u] && g.reliable_mask()[v]
}

/// Uniform random flips: `round(p_r |E|)` perturbations split into
/// insertions and deletions by `insert_fraction`, never touching pairs
/// inside the reliable region.
pub fn random_perturb(
    g: &GraphData,
    p_r: f64,
    insert_fraction: f64,
    seed: u64,
) -> Result<(GraphData, PerturbationSet)> {
    if !(0.0..=1.0).contains(&p_r) || !(0.0..=1.0).contains(&insert_fraction) {
        return Err(Error::Config(format!(
            "p_r and insert_fraction must be in [0,1], got {p_r} and {insert_fraction}"
        )));
    }
    let budget = (p_r * g.num_edges() as f64).round() as usize;
    let n_insert = (insert_fraction * budget as f64).round() as usize;
    let n_delete = budget - n_insert;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut deletable: Vec<(usize, usize)> = g
        .edges()
        .iter()
        .copied()
        .filter(|&(u, v)| !protected(g, u, v))
        .collect();
    if n_delete > deletable.len() {
        return Err(Error::Config(format!(
            "deletion budget {n_delete} exceeds the {} removable edges",
            deletable.len()
        )));
    }
    deletable.shuffle(&mut rng);
    let deleted: BTreeSet<(usize, usize)> = deletable.into_iter().take(n_delete).collect();

    let mut insertable: Vec<(usize, usize)> = Vec::new();
    for u in 0..g.num_nodes() {
        for v in (u + 1)..g.num_nodes() {
            if !g.has_edge(u, v) && !protected(g, u, v) {
                insertable.push((u, v));
            }
        }
    }
    if n_insert > insertable.len() {
        return Err(Error::Config(format!(
            "insertion budget {n_insert} exceeds the {} free pairs",
            insertable.len()
        )));
    }
    insertable.shuffle(&mut rng);
    let inserted: BTreeSet<(usize, usize)> = insertable.into_iter().take(n_insert).collect();

    let set = PerturbationSet {
        inserted,
        deleted,
        rate: p_r,
        seed,
    };
    let perturbed = set.apply(g)?;
    Ok((perturbed, set))
}

/// Settings for [`greedy_poison`]. The shortlist size bounds how many
/// gradient-ranked candidates get exact loss re-evaluation per step; any
/// toy instance with fewer candidates than the shortlist is searched
/// exhaustively.
#[derive(Debug, Clone)]
pub struct GreedyConfig {
    pub surrogate_epochs: usize,
    pub learning_rate: f64,
    pub shortlist: usize,
}

impl Default for GreedyConfig {
    fn default() -> Self {
        GreedyConfig {
            surrogate_epochs: 60,
            learning_rate: 0.5,
            shortlist: 64,
        }
    }
}

/// Forward pass for a GCN against an explicit operator, used on candidate
/// graphs without rebuilding the full operator bundle.
fn gcn_forward_with(
    lap: &Laplacian,
    features: &Array2<f64>,
    state: &ModelState,
    arch: &ModelArch,
) -> Result<Vec<Array2<f64>>> {
    let num_layers = arch.num_layers();
    let mut outputs = Vec::with_capacity(num_layers);
    let mut input = features.clone();
    for (l, layer) in state.layers.iter().enumerate() {
        let LayerWeights::Gcn { w } = layer else {
            return Err(Error::Config("greedy poisoning needs a GCN surrogate".into()));
        };
        let p = lap.matmul_dense(&input.view()).dot(w);
        let z = if l + 1 == num_layers {
            crate::model::softmax_rows(&p)
        } else {
            crate::model::apply_activation(&p, arch.activation)
        };
        outputs.push(z.clone());
        input = z;
    }
    Ok(outputs)
}

/// Gradient of the self-training loss with respect to the operator
/// entries: `dLoss/dL = Σ_ℓ G_ℓ (Z_{ℓ-1} W_ℓ)ᵀ` where `G_ℓ = dLoss/dP_ℓ`
/// and the loss is cross-entropy against `pseudo` over all nodes.
fn loss_operator_gradient(
    ops: &GraphOps,
    state: &ModelState,
    arch: &ModelArch,
    pseudo: &Array2<f64>,
) -> Result<Array2<f64>> {
    let g = ops.graph();
    let fwd = forward(ops, state, arch)?;
    let n = g.num_nodes();
    let mut grad_pre = fwd.output() - pseudo;
    grad_pre.mapv_inplace(|v| v / n as f64);
    let mut grad_l = Array2::<f64>::zeros((n, n));
    let num_layers = arch.num_layers();
    for l in (0..num_layers).rev() {
        let LayerWeights::Gcn { w } = &state.layers[l] else {
            return Err(Error::Config("greedy poisoning needs a GCN surrogate".into()));
        };
        let input = fwd.layer_input(g, l + 1);
        let x = input.dot(w);
        grad_l = grad_l + grad_pre.dot(&x.t());
        if l > 0 {
            let upstream = ops
                .laplacian()
                .t_matmul_dense(&grad_pre.view())
                .dot(&w.t());
            let act = crate::model::activation_grad(&fwd.pre[l - 1], &fwd.post[l - 1], arch.activation);
            grad_pre = upstream * &act;
        }
    }
    Ok(grad_l)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Flip {
    Insert(usize, usize),
    Delete(usize, usize),
}

/// Greedy poisoning: per step, shortlist flips by the linearized loss
/// change, evaluate the surrogate's training loss exactly for each
/// shortlisted flip, and apply the most damaging one. A pair is flipped
/// at most once so the ground truth stays a clean diff.
pub fn greedy_poison(
    g: &GraphData,
    surrogate_arch: &ModelArch,
    budget: usize,
    seed: u64,
    cfg: &GreedyConfig,
) -> Result<(GraphData, PerturbationSet)> {
    if surrogate_arch.kind != ArchKind::Gcn {
        return Err(Error::Config(
            "greedy poisoning scores flips through a GCN surrogate".into(),
        ));
    }
    let train_cfg = TrainConfig {
        learning_rate: cfg.learning_rate,
        max_epochs: cfg.surrogate_epochs,
        seed,
        snapshot_capacity: 1,
        ..Default::default()
    };
    let mut current = g.clone();
    let mut ops = GraphOps::new(&current, train_cfg.laplacian_kind);
    let mut state = ModelState::init(surrogate_arch, seed, 1)?;
    for _ in 0..cfg.surrogate_epochs {
        train_epoch(&ops, &mut state, surrogate_arch, &train_cfg)?;
    }

    // self-training targets: surrogate predictions everywhere except the
    // train nodes, which keep their true labels
    let pseudo = {
        let fwd = forward(&ops, &state, surrogate_arch)?;
        let out = fwd.output();
        let mut pseudo = Array2::<f64>::zeros(out.dim());
        for i in 0..current.num_nodes() {
            if current.train_mask()[i] {
                pseudo.row_mut(i).assign(&current.labels().row(i));
            } else {
                let pred = out
                    .row(i)
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(k, _)| k)
                    .unwrap();
                pseudo[[i, pred]] = 1.0;
            }
        }
        pseudo
    };
    let full_mask = vec![true; current.num_nodes()];

    let mut touched: BTreeSet<(usize, usize)> = BTreeSet::new();
    let mut inserted = BTreeSet::new();
    let mut deleted = BTreeSet::new();

    for _ in 0..budget {
        let grad_l = loss_operator_gradient(&ops, &state, surrogate_arch, &pseudo)?;
        let mut scored: Vec<(f64, Flip)> = Vec::new();
        let n = current.num_nodes();
        for u in 0..n {
            for v in (u + 1)..n {
                if protected(&current, u, v) || touched.contains(&(u, v)) {
                    continue;
                }
                let pair_grad = grad_l[[u, v]] + grad_l[[v, u]];
                if current.has_edge(u, v) {
                    // removing the edge zeroes its (positive) operator entries
                    let weight = ops.laplacian().get(u, v);
                    scored.push((-pair_grad * weight, Flip::Delete(u, v)));
                } else {
                    let weight = 1.0
                        / (((current.degree(u) + 2) as f64) * ((current.degree(v) + 2) as f64))
                            .sqrt();
                    scored.push((pair_grad * weight, Flip::Insert(u, v)));
                }
            }
        }
        if scored.is_empty() {
            break;
        }
        let cmp = |a: &(f64, Flip), b: &(f64, Flip)| {
            b.0.partial_cmp(&a.0)
                .unwrap()
                .then_with(|| flip_key(a.1).cmp(&flip_key(b.1)))
        };
        if scored.len() > cfg.shortlist {
            scored.select_nth_unstable_by(cfg.shortlist - 1, cmp);
            scored.truncate(cfg.shortlist);
        }
        scored.sort_by(cmp);

        // exact re-evaluation with frozen surrogate weights
        let candidates: Vec<Flip> = scored.iter().map(|&(_, f)| f).collect();
        let losses = par_map(&candidates, |&flip| -> Result<f64> {
            let trial = apply_flip(&current, flip)?;
            let lap = crate::graph::build_laplacian(&trial, train_cfg.laplacian_kind);
            let outputs = gcn_forward_with(&lap, trial.features(), &state, surrogate_arch)?;
            masked_cross_entropy(outputs.last().unwrap(), &pseudo, &full_mask)
        });
        let mut best: Option<(f64, Flip)> = None;
        for (flip, loss) in candidates.iter().zip(losses) {
            let loss = loss?;
            let better = match best {
                None => true,
                Some((bl, bf)) => {
                    loss > bl || (loss == bl && flip_key(*flip) < flip_key(bf))
                }
            };
            if better {
                best = Some((loss, *flip));
            }
        }
        let Some((_, flip)) = best else { break };
        current = apply_flip(&current, flip)?;
        ops = GraphOps::new(&current, train_cfg.laplacian_kind);
        match flip {
            Flip::Insert(u, v) => {
                inserted.insert((u, v));
            }
            Flip::Delete(u, v) => {
                deleted.insert((u, v));
            }
        }
        touched.insert(flip_pair(flip));
    }

    Ok((
        current,
        PerturbationSet {
            inserted,
            deleted,
            rate: budget as f64 / g.num_edges().max(1) as f64,
            seed,
        },
    ))
}

fn flip_pair(f: Flip) -> (usize, usize) {
    match f {
        Flip::Insert(u, v) | Flip::Delete(u, v) => (u, v),
    }
}

fn flip_key(f: Flip) -> (u8, usize, usize) {
    match f {
        Flip::Insert(u, v) => (0, u, v),
        Flip::Delete(u, v) => (1, u, v),
    }
}

fn apply_flip(g: &GraphData, flip: Flip) -> Result<GraphData> {
    let mut edges: BTreeSet<(usize, usize)> = g.edges().iter().copied().collect();
    match flip {
        Flip::Insert(u, v) => {
            edges.insert((u, v));
        }
        Flip::Delete(u, v) => {
            edges.remove(&(u, v));
        }
    }
    g.with_edges(edges)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{sbm_generate, split_reliable, SbmSpec, SplitSpec};
    use crate::model::test_support::arch_for;

    fn fixture(seed: u64) -> GraphData {
        let spec = SbmSpec {
            blocks: vec![20, 20],
            p_in: 0.35,
            p_out: 0.03,
            feature_dim: 6,
            feature_noise: 0.2,
            seed,
            split: SplitSpec::default(),
        };
        let g = sbm_generate(&spec).unwrap();
        split_reliable(&g, 0.1, seed).unwrap()
    }

    #[test]
    fn zero_rate_changes_nothing() {
        let g = fixture(3);
        let (p, set) = random_perturb(&g, 0.0, 0.8, 1).unwrap();
        assert!(set.is_empty());
        assert_eq!(p.edges(), g.edges());
    }

    #[test]
    fn budget_is_exact_and_deterministic() {
        let g = fixture(5);
        let (_, set) = random_perturb(&g, 0.2, 0.8, 42).unwrap();
        assert_eq!(set.len(), (0.2 * g.num_edges() as f64).round() as usize);
        let (_, set2) = random_perturb(&g, 0.2, 0.8, 42).unwrap();
        assert_eq!(set, set2);
    }

    #[test]
    fn apply_then_revert_restores_original() {
        let g = fixture(7);
        let (p, set) = random_perturb(&g, 0.25, 0.7, 9).unwrap();
        let back = set.revert(&p).unwrap();
        assert_eq!(back.edges(), g.edges());
    }

    #[test]
    fn reliable_region_is_never_touched() {
        let g = fixture(11);
        let (_, set) = random_perturb(&g, 0.3, 0.5, 2).unwrap();
        for &(u, v) in set.inserted.iter().chain(set.deleted.iter()) {
            assert!(!(g.reliable_mask()[u] && g.reliable_mask()[v]));
        }
    }

    #[test]
    fn serialization_round_trips() {
        let g = fixture(13);
        let (_, set) = random_perturb(&g, 0.2, 0.6, 5).unwrap();
        let mut buf = Vec::new();
        set.write_to(&mut buf).unwrap();
        let back =
            PerturbationSet::read_from(std::io::BufReader::new(&buf[..]), set.rate, set.seed)
                .unwrap();
        assert_eq!(back, set);
    }

    #[test]
    fn greedy_zero_budget_is_identity() {
        let g = fixture(17);
        let arch = arch_for(ArchKind::Gcn, vec![6, 8, 2]);
        let (p, set) = greedy_poison(&g, &arch, 0, 3, &GreedyConfig::default()).unwrap();
        assert!(set.is_empty());
        assert_eq!(p.edges(), g.edges());
    }

    #[test]
    fn greedy_is_deterministic() {
        let g = fixture(19);
        let arch = arch_for(ArchKind::Gcn, vec![6, 8, 2]);
        let cfg = GreedyConfig {
            surrogate_epochs: 20,
            ..Default::default()
        };
        let (_, a) = greedy_poison(&g, &arch, 5, 21, &cfg).unwrap();
        let (_, b) = greedy_poison(&g, &arch, 5, 21, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn greedy_single_flip_matches_exhaustive_oracle() {
        // 8-node two-block toy graph; the shortlist covers every candidate,
        // so the chosen flip must maximize the true loss increase
        let spec = SbmSpec {
            blocks: vec![4, 4],
            p_in: 0.9,
            p_out: 0.1,
            feature_dim: 4,
            feature_noise: 0.2,
            seed: 23,
            split: SplitSpec {
                train_ratio: 0.5,
                val_ratio: 0.0,
                seed: 23,
                num_classes: None,
            },
        };
        let g = sbm_generate(&spec).unwrap();
        let arch = arch_for(ArchKind::Gcn, vec![4, 5, 2]);
        let cfg = GreedyConfig {
            surrogate_epochs: 30,
            learning_rate: 0.5,
            shortlist: 64,
        };
        let (_, set) = greedy_poison(&g, &arch, 1, 31, &cfg).unwrap();
        assert_eq!(set.len(), 1);
        let chosen = set
            .inserted
            .iter()
            .map(|&e| (e, true))
            .chain(set.deleted.iter().map(|&e| (e, false)))
            .next()
            .unwrap();

        // independent oracle: retrain the surrogate identically, rebuild
        // the self-training targets, evaluate every candidate flip by the
        // true loss increase
        let train_cfg = TrainConfig {
            learning_rate: cfg.learning_rate,
            max_epochs: cfg.surrogate_epochs,
            seed: 31,
            snapshot_capacity: 1,
            ..Default::default()
        };
        let ops = GraphOps::new(&g, train_cfg.laplacian_kind);
        let mut state = ModelState::init(&arch, 31, 1).unwrap();
        for _ in 0..cfg.surrogate_epochs {
            train_epoch(&ops, &mut state, &arch, &train_cfg).unwrap();
        }
        let pseudo = {
            let fwd = forward(&ops, &state, &arch).unwrap();
            let out = fwd.output();
            let mut pseudo = ndarray::Array2::<f64>::zeros(out.dim());
            for i in 0..g.num_nodes() {
                if g.train_mask()[i] {
                    pseudo.row_mut(i).assign(&g.labels().row(i));
                } else {
                    let pred = out
                        .row(i)
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                        .map(|(k, _)| k)
                        .unwrap();
                    pseudo[[i, pred]] = 1.0;
                }
            }
            pseudo
        };
        let full_mask = vec![true; g.num_nodes()];
        let mut best: Option<(f64, (usize, usize), bool)> = None;
        for u in 0..8 {
            for v in (u + 1)..8 {
                let insert = !g.has_edge(u, v);
                let mut edges: BTreeSet<(usize, usize)> =
                    g.edges().iter().copied().collect();
                if insert {
                    edges.insert((u, v));
                } else {
                    edges.remove(&(u, v));
                }
                let trial = g.with_edges(edges).unwrap();
                let trial_ops = GraphOps::new(&trial, train_cfg.laplacian_kind);
                let fwd = forward(&trial_ops, &state, &arch).unwrap();
                let loss = masked_cross_entropy(fwd.output(), &pseudo, &full_mask).unwrap();
                if best.map(|(bl, _, _)| loss > bl).unwrap_or(true) {
                    best = Some((loss, (u, v), insert));
                }
            }
        }
        let (_, oracle_edge, oracle_insert) = best.unwrap();
        assert_eq!(chosen, (oracle_edge, oracle_insert));
    }
}
