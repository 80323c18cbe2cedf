//! Dataset plumbing: synthetic stochastic block models, plain-text graph
//! loaders, and reliable-subgraph partitioning.
//!
//! File formats are deliberately minimal so any public dataset dump can be
//! converted with a few lines of shell:
//! - edges: one `u v` integer pair per line, `#` starts a comment;
//! - features: a `N d` header line, then `N` rows of `d` reals;
//! - labels: `N` integer class ids, one per line.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::GraphData;

/// How nodes are partitioned into train/val/test.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SplitSpec {
    pub train_ratio: f64,
    pub val_ratio: f64,
    pub seed: u64,
    /// When given, labels outside `0..num_classes` are a parse error;
    /// otherwise the class count is inferred from the data.
    pub num_classes: Option<usize>,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_ratio: 0.1,
            val_ratio: 0.1,
            seed: 0,
            num_classes: None,
        }
    }
}

impl SplitSpec {
    fn validate(&self) -> Result<()> {
        if !(self.train_ratio > 0.0 && self.val_ratio >= 0.0) {
            return Err(Error::Config("split ratios must be positive".into()));
        }
        if self.train_ratio + self.val_ratio >= 1.0 {
            return Err(Error::Config(
                "train + val ratios must leave room for a test split".into(),
            ));
        }
        Ok(())
    }

    fn masks(&self, n: usize, rng: &mut ChaCha8Rng) -> (Vec<bool>, Vec<bool>, Vec<bool>) {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        let n_train = ((n as f64) * self.train_ratio).round().max(1.0) as usize;
        let n_val = ((n as f64) * self.val_ratio).round() as usize;
        let mut train = vec![false; n];
        let mut val = vec![false; n];
        let mut test = vec![false; n];
        for (rank, &i) in order.iter().enumerate() {
            if rank < n_train {
                train[i] = true;
            } else if rank < n_train + n_val {
                val[i] = true;
            } else {
                test[i] = true;
            }
        }
        (train, val, test)
    }
}

/// Stochastic block model with block-centroid features.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SbmSpec {
    pub blocks: Vec<usize>,
    pub p_in: f64,
    pub p_out: f64,
    pub feature_dim: usize,
    pub feature_noise: f64,
    pub seed: u64,
    #[serde(default)]
    pub split: SplitSpec,
}

impl SbmSpec {
    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() || self.blocks.iter().any(|&b| b == 0) {
            return Err(Error::Config("blocks must be non-empty".into()));
        }
        if !(0.0..=1.0).contains(&self.p_out)
            || !(0.0..=1.0).contains(&self.p_in)
            || self.p_out > self.p_in
        {
            return Err(Error::Config(format!(
                "need 0 <= p_out <= p_in <= 1, got p_in={} p_out={}",
                self.p_in, self.p_out
            )));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be positive".into()));
        }
        self.split.validate()
    }
}

/// Samples an attributed SBM graph. Edges are independent Bernoulli by
/// block membership; features are the one-hot block centroid plus
/// Gaussian noise; labels are the block ids. Deterministic per seed.
pub fn sbm_generate(spec: &SbmSpec) -> Result<GraphData> {
    spec.validate()?;
    let n: usize = spec.blocks.iter().sum();
    let classes = spec.blocks.len();
    let mut block_of = Vec::with_capacity(n);
    for (b, &size) in spec.blocks.iter().enumerate() {
        block_of.extend(std::iter::repeat_n(b, size));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut edges = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            let p = if block_of[u] == block_of[v] {
                spec.p_in
            } else {
                spec.p_out
            };
            if rng.random_range(0.0..1.0) < p {
                edges.push((u, v));
            }
        }
    }

    let mut features = Array2::<f64>::zeros((n, spec.feature_dim));
    for i in 0..n {
        features[[i, block_of[i] % spec.feature_dim]] = 1.0;
        for d in 0..spec.feature_dim {
            features[[i, d]] += gaussian(&mut rng) * spec.feature_noise;
        }
    }
    let mut labels = Array2::<f64>::zeros((n, classes));
    for i in 0..n {
        labels[[i, block_of[i]]] = 1.0;
    }
    let (train, val, test) = spec.split.masks(n, &mut rng);
    GraphData::new(features, labels, edges, train, val, test, vec![false; n])
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; two uniforms per draw keeps the stream simple
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn parse_err(path: &Path, line: usize, detail: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        detail: detail.into(),
    }
}

/// Loads a graph from the three text files plus a split spec.
pub fn load_graph(
    edge_path: &Path,
    feature_path: &Path,
    label_path: &Path,
    split: &SplitSpec,
) -> Result<GraphData> {
    split.validate()?;
    let feat_text = std::fs::read_to_string(feature_path)?;
    let mut lines = feat_text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(feature_path, 1, "empty feature file"))?;
    let head: Vec<&str> = header.split_whitespace().collect();
    if head.len() != 2 {
        return Err(parse_err(feature_path, 1, "expected header `N d`"));
    }
    let n: usize = head[0]
        .parse()
        .map_err(|_| parse_err(feature_path, 1, "bad node count"))?;
    let dim: usize = head[1]
        .parse()
        .map_err(|_| parse_err(feature_path, 1, "bad feature dim"))?;
    let mut features = Array2::<f64>::zeros((n, dim));
    let mut row = 0usize;
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        if row >= n {
            return Err(parse_err(
                feature_path,
                idx + 1,
                format!("more than {n} feature rows"),
            ));
        }
        let vals: Vec<&str> = line.split_whitespace().collect();
        if vals.len() != dim {
            return Err(parse_err(
                feature_path,
                idx + 1,
                format!("expected {dim} values, found {}", vals.len()),
            ));
        }
        for (d, v) in vals.iter().enumerate() {
            features[[row, d]] = v
                .parse()
                .map_err(|_| parse_err(feature_path, idx + 1, format!("bad real {v:?}")))?;
        }
        row += 1;
    }
    if row != n {
        return Err(parse_err(
            feature_path,
            row + 1,
            format!("expected {n} feature rows, found {row}"),
        ));
    }

    let label_text = std::fs::read_to_string(label_path)?;
    let mut raw_labels = Vec::with_capacity(n);
    for (idx, line) in label_text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: i64 = line
            .trim()
            .parse()
            .map_err(|_| parse_err(label_path, idx + 1, format!("bad label {line:?}")))?;
        if v < 0 {
            return Err(parse_err(label_path, idx + 1, "negative label"));
        }
        if let Some(c) = split.num_classes {
            if v as usize >= c {
                return Err(parse_err(
                    label_path,
                    idx + 1,
                    format!("label {v} outside class range 0..{c}"),
                ));
            }
        }
        raw_labels.push(v as usize);
    }
    if raw_labels.len() != n {
        return Err(parse_err(
            label_path,
            raw_labels.len() + 1,
            format!("expected {n} labels, found {}", raw_labels.len()),
        ));
    }
    let classes = split
        .num_classes
        .unwrap_or_else(|| raw_labels.iter().copied().max().unwrap_or(0) + 1);
    let mut labels = Array2::<f64>::zeros((n, classes));
    for (i, &c) in raw_labels.iter().enumerate() {
        labels[[i, c]] = 1.0;
    }

    let edge_text = std::fs::read_to_string(edge_path)?;
    let mut edges = Vec::new();
    for (idx, line) in edge_text.lines().enumerate() {
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let parts: Vec<&str> = body.split_whitespace().collect();
        if parts.len() != 2 {
            return Err(parse_err(edge_path, idx + 1, "expected `u v`"));
        }
        let u: usize = parts[0]
            .parse()
            .map_err(|_| parse_err(edge_path, idx + 1, format!("bad node id {:?}", parts[0])))?;
        let v: usize = parts[1]
            .parse()
            .map_err(|_| parse_err(edge_path, idx + 1, format!("bad node id {:?}", parts[1])))?;
        if u >= n || v >= n {
            return Err(parse_err(
                edge_path,
                idx + 1,
                format!("node id out of range 0..{n}"),
            ));
        }
        if u == v {
            return Err(parse_err(edge_path, idx + 1, "self-loop edge"));
        }
        edges.push((u, v));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(split.seed);
    let (train, val, test) = split.masks(n, &mut rng);
    GraphData::new(features, labels, edges, train, val, test, vec![false; n])
}

/// Writes the three text files for `g`, inverse of [`load_graph`].
pub fn save_graph(
    g: &GraphData,
    edge_path: &Path,
    feature_path: &Path,
    label_path: &Path,
) -> Result<()> {
    let mut edges = String::new();
    writeln!(edges, "# {} nodes, {} edges", g.num_nodes(), g.num_edges()).ok();
    for &(u, v) in g.edges() {
        writeln!(edges, "{u} {v}").ok();
    }
    std::fs::write(edge_path, edges)?;

    let mut feats = String::new();
    writeln!(feats, "{} {}", g.num_nodes(), g.features().ncols()).ok();
    for row in g.features().rows() {
        let vals: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        writeln!(feats, "{}", vals.join(" ")).ok();
    }
    std::fs::write(feature_path, feats)?;

    let mut labels = String::new();
    for i in 0..g.num_nodes() {
        writeln!(labels, "{}", g.label_of(i)).ok();
    }
    std::fs::write(label_path, labels)?;
    Ok(())
}

/// Marks a connected region of roughly `fraction * N` nodes as reliable,
/// grown breadth-first from a seeded root inside the largest connected
/// component.
pub fn split_reliable(g: &GraphData, fraction: f64, seed: u64) -> Result<GraphData> {
    if !(0.0..1.0).contains(&fraction) || fraction <= 0.0 {
        return Err(Error::Config(format!(
            "reliable fraction must be in (0, 1), got {fraction}"
        )));
    }
    let n = g.num_nodes();
    let target = ((n as f64) * fraction).round() as usize;
    if target < 2 {
        return Err(Error::Config(format!(
            "reliable region of {target} node(s) is too small"
        )));
    }

    // largest connected component
    let mut component = vec![usize::MAX; n];
    let mut sizes = Vec::new();
    for start in 0..n {
        if component[start] != usize::MAX {
            continue;
        }
        let id = sizes.len();
        let mut size = 0usize;
        let mut queue = VecDeque::from([start]);
        component[start] = id;
        while let Some(u) = queue.pop_front() {
            size += 1;
            for &v in g.neighbors(u) {
                if component[v] == usize::MAX {
                    component[v] = id;
                    queue.push_back(v);
                }
            }
        }
        sizes.push(size);
    }
    let largest = sizes
        .iter()
        .enumerate()
        .max_by_key(|&(_, &s)| s)
        .map(|(i, _)| i)
        .unwrap();
    let members: Vec<usize> = (0..n).filter(|&i| component[i] == largest).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let root = members[rng.random_range(0..members.len())];
    let mut reliable = vec![false; n];
    let mut picked = 0usize;
    let mut visited = vec![false; n];
    let mut queue = VecDeque::from([root]);
    visited[root] = true;
    while let Some(u) = queue.pop_front() {
        if picked == target {
            break;
        }
        reliable[u] = true;
        picked += 1;
        for &v in g.neighbors(u) {
            if !visited[v] {
                visited[v] = true;
                queue.push_back(v);
            }
        }
    }
    if picked < 2 {
        return Err(Error::Config(
            "could not grow a reliable region of at least 2 nodes".into(),
        ));
    }
    g.with_reliable_mask(reliable)
}
