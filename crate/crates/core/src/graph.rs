//! Immutable attributed graphs and their Laplacian operators.
//!
//! Alongside the plain operators this module implements the per-edge
//! decomposition used by edge-wise trajectory extraction: every operator
//! entry is attributed either to one undirected edge or to one node's
//! self-loop, so that summing all edge contributions plus all self-loop
//! contributions reconstructs the operator exactly. Complementary spanning
//! subgraph splitting reuses the same convention.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{Error, Result};

/// Which graph operator drives message passing.
///
/// `SymNormalized` and `RowNormalized` are built from the self-loop
/// augmented adjacency `A + I`; `Unnormalized` is the combinatorial
/// Laplacian `D - A` (self-loops cancel there, so its diagonal mass is
/// carried by the edges instead of the self-loops).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum LaplacianKind {
    /// `D̃^{-1/2} (A + I) D̃^{-1/2}` — the standard GCN operator.
    SymNormalized,
    /// `D̃^{-1} (A + I)` — random-walk normalization with self-loops.
    RowNormalized,
    /// `D - A`.
    Unnormalized,
}

impl LaplacianKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            LaplacianKind::SymNormalized => "sym_normalized_with_self_loops",
            LaplacianKind::RowNormalized => "row_normalized",
            LaplacianKind::Unnormalized => "unnormalized",
        }
    }
}

impl Default for LaplacianKind {
    fn default() -> Self {
        LaplacianKind::SymNormalized
    }
}

/// Compressed sparse row matrix, just enough for the operators here.
#[derive(Debug, Clone)]
pub struct SparseMatrix {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Builds from (row, col, value) triplets; duplicate positions are summed.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut sorted: Vec<(usize, usize, f64)> = triplets.to_vec();
        sorted.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));

        let mut row_counts = vec![0usize; nrows];
        let mut col_idx = Vec::with_capacity(sorted.len());
        let mut values = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for &(r, c, v) in &sorted {
            debug_assert!(r < nrows && c < ncols);
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                col_idx.push(c);
                values.push(v);
                row_counts[r] += 1;
                last = Some((r, c));
            }
        }
        let mut row_ptr = vec![0usize; nrows + 1];
        for r in 0..nrows {
            row_ptr[r + 1] = row_ptr[r] + row_counts[r];
        }
        SparseMatrix {
            nrows,
            ncols,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let lo = self.row_ptr[i];
        let hi = self.row_ptr[i + 1];
        match self.col_idx[lo..hi].binary_search(&j) {
            Ok(pos) => self.values[lo + pos],
            Err(_) => 0.0,
        }
    }

    pub fn row_entries(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let lo = self.row_ptr[i];
        let hi = self.row_ptr[i + 1];
        self.col_idx[lo..hi]
            .iter()
            .copied()
            .zip(self.values[lo..hi].iter().copied())
    }

    /// `self · x` for dense `x`.
    pub fn matmul_dense(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        assert_eq!(self.ncols, x.nrows(), "sparse-dense shape mismatch");
        let mut out = Array2::<f64>::zeros((self.nrows, x.ncols()));
        for i in 0..self.nrows {
            let mut acc = out.row_mut(i);
            for (j, v) in self.row_entries(i) {
                acc.scaled_add(v, &x.row(j));
            }
        }
        out
    }

    /// `selfᵀ · x` for dense `x`.
    pub fn t_matmul_dense(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        assert_eq!(self.nrows, x.nrows(), "sparse-dense shape mismatch");
        let mut out = Array2::<f64>::zeros((self.ncols, x.ncols()));
        for i in 0..self.nrows {
            let xi = x.row(i);
            for (j, v) in self.row_entries(i) {
                out.row_mut(j).scaled_add(v, &xi);
            }
        }
        out
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::<f64>::zeros((self.nrows, self.ncols));
        for i in 0..self.nrows {
            for (j, v) in self.row_entries(i) {
                out[[i, j]] += v;
            }
        }
        out
    }
}

/// Immutable attributed graph: undirected simple edges, node features,
/// one-hot labels, split masks and the reliable-subgraph mask.
#[derive(Debug, Clone)]
pub struct GraphData {
    num_nodes: usize,
    /// Canonical `(min, max)` pairs, sorted, no duplicates, no self-pairs.
    edges: Vec<(usize, usize)>,
    adjacency: Vec<Vec<usize>>,
    features: Array2<f64>,
    labels: Array2<f64>,
    train_mask: Vec<bool>,
    val_mask: Vec<bool>,
    test_mask: Vec<bool>,
    reliable_mask: Vec<bool>,
}

impl GraphData {
    pub fn new(
        features: Array2<f64>,
        labels: Array2<f64>,
        edges: impl IntoIterator<Item = (usize, usize)>,
        train_mask: Vec<bool>,
        val_mask: Vec<bool>,
        test_mask: Vec<bool>,
        reliable_mask: Vec<bool>,
    ) -> Result<Self> {
        let num_nodes = features.nrows();
        if labels.nrows() != num_nodes {
            return Err(Error::InvalidGraph(format!(
                "labels have {} rows but features have {}",
                labels.nrows(),
                num_nodes
            )));
        }
        for (name, m) in [
            ("train", &train_mask),
            ("val", &val_mask),
            ("test", &test_mask),
            ("reliable", &reliable_mask),
        ] {
            if m.len() != num_nodes {
                return Err(Error::InvalidGraph(format!(
                    "{name} mask has length {} but graph has {} nodes",
                    m.len(),
                    num_nodes
                )));
            }
        }
        for i in 0..num_nodes {
            let overlaps = (train_mask[i] as u8) + (val_mask[i] as u8) + (test_mask[i] as u8);
            if overlaps > 1 {
                return Err(Error::InvalidGraph(format!(
                    "node {i} belongs to more than one of train/val/test"
                )));
            }
        }
        for (i, row) in labels.rows().into_iter().enumerate() {
            let mut ones = 0usize;
            for &v in row.iter() {
                if v == 1.0 {
                    ones += 1;
                } else if v != 0.0 {
                    return Err(Error::InvalidGraph(format!(
                        "label row {i} is not one-hot (entry {v})"
                    )));
                }
            }
            if ones != 1 {
                return Err(Error::InvalidGraph(format!(
                    "label row {i} sums to {ones}, expected exactly 1"
                )));
            }
        }

        let mut set = BTreeSet::new();
        for (u, v) in edges {
            if u == v {
                return Err(Error::InvalidGraph(format!("self-pair edge ({u}, {v})")));
            }
            if u >= num_nodes || v >= num_nodes {
                return Err(Error::InvalidGraph(format!(
                    "edge ({u}, {v}) references a node outside 0..{num_nodes}"
                )));
            }
            set.insert((u.min(v), u.max(v)));
        }
        let edges: Vec<(usize, usize)> = set.into_iter().collect();
        let mut adjacency = vec![Vec::new(); num_nodes];
        for &(u, v) in &edges {
            adjacency[u].push(v);
            adjacency[v].push(u);
        }
        for nbrs in &mut adjacency {
            nbrs.sort_unstable();
        }

        Ok(GraphData {
            num_nodes,
            edges,
            adjacency,
            features,
            labels,
            train_mask,
            val_mask,
            test_mask,
            reliable_mask,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &Array2<f64> {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.labels.ncols()
    }

    pub fn train_mask(&self) -> &[bool] {
        &self.train_mask
    }

    pub fn val_mask(&self) -> &[bool] {
        &self.val_mask
    }

    pub fn test_mask(&self) -> &[bool] {
        &self.test_mask
    }

    pub fn reliable_mask(&self) -> &[bool] {
        &self.reliable_mask
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.adjacency[i]
    }

    /// Degree in the simple graph (self-loops are an operator concern).
    pub fn degree(&self, i: usize) -> usize {
        self.adjacency[i].len()
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        let key = (u.min(v), u.max(v));
        self.edges.binary_search(&key).is_ok()
    }

    /// Same nodes, features, labels and masks; different edge set.
    pub fn with_edges(&self, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        GraphData::new(
            self.features.clone(),
            self.labels.clone(),
            edges,
            self.train_mask.clone(),
            self.val_mask.clone(),
            self.test_mask.clone(),
            self.reliable_mask.clone(),
        )
    }

    pub fn with_reliable_mask(&self, reliable_mask: Vec<bool>) -> Result<Self> {
        GraphData::new(
            self.features.clone(),
            self.labels.clone(),
            self.edges.iter().copied(),
            self.train_mask.clone(),
            self.val_mask.clone(),
            self.test_mask.clone(),
            reliable_mask,
        )
    }

    pub fn label_of(&self, i: usize) -> usize {
        let row = self.labels.row(i);
        row.iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(k, _)| k)
            .unwrap_or(0)
    }
}

/// A graph operator together with the normalization it was built under.
#[derive(Debug, Clone)]
pub struct Laplacian {
    kind: LaplacianKind,
    matrix: SparseMatrix,
}

impl Laplacian {
    pub fn kind(&self) -> LaplacianKind {
        self.kind
    }

    pub fn matrix(&self) -> &SparseMatrix {
        &self.matrix
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix.get(i, j)
    }

    pub fn matmul_dense(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        self.matrix.matmul_dense(x)
    }

    pub fn t_matmul_dense(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        self.matrix.t_matmul_dense(x)
    }

    pub fn to_dense(&self) -> Array2<f64> {
        self.matrix.to_dense()
    }
}

/// Builds the message-passing operator for `g` under the chosen kind.
pub fn build_laplacian(g: &GraphData, kind: LaplacianKind) -> Laplacian {
    let n = g.num_nodes();
    let mut triplets: Vec<(usize, usize, f64)> = Vec::with_capacity(2 * g.num_edges() + n);
    match kind {
        LaplacianKind::SymNormalized => {
            let inv_sqrt: Vec<f64> = (0..n).map(|i| 1.0 / ((g.degree(i) + 1) as f64).sqrt()).collect();
            for i in 0..n {
                triplets.push((i, i, inv_sqrt[i] * inv_sqrt[i]));
            }
            for &(u, v) in g.edges() {
                let w = inv_sqrt[u] * inv_sqrt[v];
                triplets.push((u, v, w));
                triplets.push((v, u, w));
            }
        }
        LaplacianKind::RowNormalized => {
            for i in 0..n {
                let inv = 1.0 / ((g.degree(i) + 1) as f64);
                triplets.push((i, i, inv));
            }
            for &(u, v) in g.edges() {
                triplets.push((u, v, 1.0 / ((g.degree(u) + 1) as f64)));
                triplets.push((v, u, 1.0 / ((g.degree(v) + 1) as f64)));
            }
        }
        LaplacianKind::Unnormalized => {
            for i in 0..n {
                let d = g.degree(i) as f64;
                if d != 0.0 {
                    triplets.push((i, i, d));
                }
            }
            for &(u, v) in g.edges() {
                triplets.push((u, v, -1.0));
                triplets.push((v, u, -1.0));
            }
        }
    }
    Laplacian {
        kind,
        matrix: SparseMatrix::from_triplets(n, n, &triplets),
    }
}

/// The share of a Laplacian owned by one edge (or by one node's
/// self-loop when `edge.0 == edge.1`). Nonzero entries are confined to
/// rows/columns of the two endpoints.
#[derive(Debug, Clone)]
pub struct EdgeContribution {
    pub edge: (usize, usize),
    n: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl EdgeContribution {
    pub fn entries(&self) -> &[(usize, usize, f64)] {
        &self.entries
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::<f64>::zeros((self.n, self.n));
        for &(i, j, v) in &self.entries {
            out[[i, j]] += v;
        }
        out
    }

    /// Row `target` of `contribution · x`, i.e. the share of node
    /// `target`'s aggregated message that flows through this edge.
    pub fn apply_row(&self, target: usize, x: &ArrayView2<f64>) -> Array1<f64> {
        let mut out = Array1::<f64>::zeros(x.ncols());
        for &(i, j, v) in &self.entries {
            if i == target {
                out.scaled_add(v, &x.row(j));
            }
        }
        out
    }
}

/// The reduced share of `lap` attributable to `edge`.
///
/// Off-diagonal operator entries belong wholly to their edge. Diagonal
/// mass coming from self-loops (`SymNormalized`, `RowNormalized`) is
/// owned by the per-node self-loop contribution, queried with a self-pair
/// `(i, i)`; diagonal mass coming from incident edges (`Unnormalized`)
/// is split across those edges. Summing the contributions of every edge
/// plus every self-loop reconstructs `lap` exactly.
pub fn reduced_laplacian(
    lap: &Laplacian,
    g: &GraphData,
    edge: (usize, usize),
) -> Result<EdgeContribution> {
    let n = g.num_nodes();
    let (i, j) = edge;
    if i >= n || j >= n {
        return Err(Error::MissingEdge(i, j));
    }
    if i == j {
        let entries = match lap.kind() {
            LaplacianKind::SymNormalized | LaplacianKind::RowNormalized => {
                vec![(i, i, lap.get(i, i))]
            }
            LaplacianKind::Unnormalized => Vec::new(),
        };
        return Ok(EdgeContribution {
            edge: (i, i),
            n,
            entries,
        });
    }
    if !g.has_edge(i, j) {
        return Err(Error::MissingEdge(i, j));
    }
    let mut entries = vec![(i, j, lap.get(i, j)), (j, i, lap.get(j, i))];
    if lap.kind() == LaplacianKind::Unnormalized {
        entries.push((i, i, 1.0));
        entries.push((j, j, 1.0));
    }
    Ok(EdgeContribution {
        edge: (i.min(j), i.max(j)),
        n,
        entries,
    })
}

/// Sum of the reduced contributions over `edges`, plus (optionally) all
/// self-loop contributions, as a dense matrix. The decomposition identity
/// is: over all graph edges with self-loops included, this equals the
/// operator itself.
pub fn contribution_sum(
    lap: &Laplacian,
    g: &GraphData,
    edges: &[(usize, usize)],
    include_self_loops: bool,
) -> Result<Array2<f64>> {
    let n = g.num_nodes();
    let mut acc = Array2::<f64>::zeros((n, n));
    for &e in edges {
        let c = reduced_laplacian(lap, g, e)?;
        for &(i, j, v) in c.entries() {
            acc[[i, j]] += v;
        }
    }
    if include_self_loops {
        for i in 0..n {
            let c = reduced_laplacian(lap, g, (i, i))?;
            for &(r, c2, v) in c.entries() {
                acc[[r, c2]] += v;
            }
        }
    }
    Ok(acc)
}

/// Splits `g` into two complementary spanning subgraphs: both keep the
/// full node/feature/label/mask state, and their edge sets partition
/// `g`'s edge set (`edge_subset` and its complement).
pub fn cs_subgraph_split(
    g: &GraphData,
    edge_subset: &BTreeSet<(usize, usize)>,
) -> Result<(GraphData, GraphData)> {
    let mut in_subset = Vec::new();
    let mut rest = Vec::new();
    for key in edge_subset {
        let canon = (key.0.min(key.1), key.0.max(key.1));
        if !g.has_edge(canon.0, canon.1) {
            return Err(Error::MissingEdge(canon.0, canon.1));
        }
    }
    for &e in g.edges() {
        let in_it = edge_subset.contains(&e) || edge_subset.contains(&(e.1, e.0));
        if in_it {
            in_subset.push(e);
        } else {
            rest.push(e);
        }
    }
    Ok((g.with_edges(in_subset)?, g.with_edges(rest)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    /// Small helper: K-node graph with identity-ish features and one-hot labels.
    pub(crate) fn toy_graph(n: usize, edges: &[(usize, usize)]) -> GraphData {
        let mut features = Array2::<f64>::zeros((n, 2));
        let mut labels = Array2::<f64>::zeros((n, 2));
        for i in 0..n {
            features[[i, i % 2]] = 1.0;
            labels[[i, i % 2]] = 1.0;
        }
        GraphData::new(
            features,
            labels,
            edges.iter().copied(),
            vec![true; n],
            vec![false; n],
            vec![false; n],
            vec![false; n],
        )
        .unwrap()
    }

    #[test]
    fn sym_laplacian_single_edge_all_halves() {
        let g = toy_graph(2, &[(0, 1)]);
        let lap = build_laplacian(&g, LaplacianKind::SymNormalized);
        for i in 0..2 {
            for j in 0..2 {
                assert_abs_diff_eq!(lap.get(i, j), 0.5, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn sym_laplacian_empty_edges_is_identity() {
        let g = toy_graph(3, &[]);
        let lap = build_laplacian(&g, LaplacianKind::SymNormalized);
        let dense = lap.to_dense();
        assert_abs_diff_eq!(dense, Array2::eye(3), epsilon = 0.0);
    }

    #[test]
    fn sym_laplacian_path_entry() {
        let g = toy_graph(3, &[(0, 1), (1, 2)]);
        let lap = build_laplacian(&g, LaplacianKind::SymNormalized);
        assert_abs_diff_eq!(lap.get(0, 1), 1.0 / 6.0f64.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn sym_laplacian_is_exactly_symmetric() {
        let g = toy_graph(5, &[(0, 1), (1, 2), (2, 3), (3, 4), (0, 4), (1, 3)]);
        let lap = build_laplacian(&g, LaplacianKind::SymNormalized);
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(lap.get(i, j).to_bits(), lap.get(j, i).to_bits());
            }
        }
    }

    #[test]
    fn reduced_laplacian_rejects_phantom_edge() {
        let g = toy_graph(3, &[(0, 1)]);
        let lap = build_laplacian(&g, LaplacianKind::SymNormalized);
        assert!(matches!(
            reduced_laplacian(&lap, &g, (0, 2)),
            Err(Error::MissingEdge(0, 2))
        ));
    }

    fn assert_decomposition(g: &GraphData, kind: LaplacianKind) {
        let lap = build_laplacian(g, kind);
        let sum = contribution_sum(&lap, g, g.edges(), true).unwrap();
        let dense = lap.to_dense();
        let max_diff = (&sum - &dense)
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max_diff <= 1e-12, "decomposition off by {max_diff} for {kind:?}");
    }

    #[test]
    fn decomposition_identity_single_edge() {
        let g = toy_graph(2, &[(0, 1)]);
        for kind in [
            LaplacianKind::SymNormalized,
            LaplacianKind::RowNormalized,
            LaplacianKind::Unnormalized,
        ] {
            assert_decomposition(&g, kind);
        }
    }

    #[test]
    fn decomposition_identity_path_and_star() {
        let path = toy_graph(3, &[(0, 1), (1, 2)]);
        let star = toy_graph(4, &[(0, 1), (0, 2), (0, 3)]);
        for kind in [
            LaplacianKind::SymNormalized,
            LaplacianKind::RowNormalized,
            LaplacianKind::Unnormalized,
        ] {
            assert_decomposition(&path, kind);
            assert_decomposition(&star, kind);
        }
    }

    #[test]
    fn cs_split_empty_and_full() {
        let g = toy_graph(4, &[(0, 1), (1, 2), (2, 3)]);
        let (g1, g2) = cs_subgraph_split(&g, &BTreeSet::new()).unwrap();
        assert_eq!(g1.num_edges(), 0);
        assert_eq!(g2.edges(), g.edges());

        let all: BTreeSet<_> = g.edges().iter().copied().collect();
        let (g1, g2) = cs_subgraph_split(&g, &all).unwrap();
        assert_eq!(g1.edges(), g.edges());
        assert_eq!(g2.num_edges(), 0);
    }

    #[test]
    fn cs_split_four_cycle_contributions_sum() {
        let g = toy_graph(4, &[(0, 1), (1, 2), (2, 3), (0, 3)]);
        let matching: BTreeSet<_> = [(0, 1), (2, 3)].into_iter().collect();
        let (g1, g2) = cs_subgraph_split(&g, &matching).unwrap();
        // exact partition
        let union: BTreeSet<_> = g1.edges().iter().chain(g2.edges()).copied().collect();
        assert_eq!(union.len(), g.num_edges());
        assert_eq!(g1.num_edges() + g2.num_edges(), g.num_edges());

        for kind in [
            LaplacianKind::SymNormalized,
            LaplacianKind::RowNormalized,
            LaplacianKind::Unnormalized,
        ] {
            let lap = build_laplacian(&g, kind);
            let part1 = contribution_sum(&lap, &g, g1.edges(), false).unwrap();
            let part2 = contribution_sum(&lap, &g, g2.edges(), true).unwrap();
            let dense = lap.to_dense();
            let max_diff = (&(&part1 + &part2) - &dense)
                .iter()
                .fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(max_diff <= 1e-12);
        }
    }

    #[test]
    fn graph_rejects_self_pairs_and_overlapping_masks() {
        let features = array![[1.0, 0.0], [0.0, 1.0]];
        let labels = array![[1.0, 0.0], [0.0, 1.0]];
        let err = GraphData::new(
            features.clone(),
            labels.clone(),
            [(0usize, 0usize)],
            vec![true, true],
            vec![false, false],
            vec![false, false],
            vec![false, false],
        );
        assert!(err.is_err());

        let err = GraphData::new(
            features,
            labels,
            [(0usize, 1usize)],
            vec![true, true],
            vec![true, false],
            vec![false, false],
            vec![false, false],
        );
        assert!(err.is_err());
    }

    #[test]
    fn sparse_matmul_matches_dense() {
        let g = toy_graph(5, &[(0, 1), (1, 2), (2, 3), (3, 4), (0, 4)]);
        let lap = build_laplacian(&g, LaplacianKind::SymNormalized);
        let x = Array2::from_shape_fn((5, 3), |(i, j)| (i * 3 + j) as f64 * 0.25 - 1.0);
        let fast = lap.matmul_dense(&x.view());
        let dense = lap.to_dense().dot(&x);
        assert_abs_diff_eq!(fast, dense, epsilon = 1e-12);

        let fast_t = lap.t_matmul_dense(&x.view());
        let dense_t = lap.to_dense().t().dot(&x);
        assert_abs_diff_eq!(fast_t, dense_t, epsilon = 1e-12);
    }
}
