//! Graph data model, dataset files, subgraph sampling and walk matrices.

mod condensed;
pub mod io;
mod sample;
pub mod synthetic;
mod walk;

use std::collections::BTreeSet;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sprs::{CsMat, TriMat};

use crate::error::{HydroError, Result};

pub use condensed::{apportion, budget, init_condensed, CondensedGraph};
pub use sample::{sample_connected_subgraph, sample_subgraph, Subgraph};
pub use walk::{lazy_walk_sampled, lazy_walk_synthetic, lazy_walk_synthetic_symmetric};

/// Tolerance for adjacency symmetry checks.
pub const SYMMETRY_TOL: f64 = 1e-12;

/// Train/validation/test node indices.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    fn validate(&self, n: usize) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (name, idx) in [
            ("train", &self.train),
            ("val", &self.val),
            ("test", &self.test),
        ] {
            for &i in idx {
                if i >= n {
                    return Err(HydroError::contract(format!(
                        "{name} split index {i} out of range for {n} nodes"
                    )));
                }
                if !seen.insert(i) {
                    return Err(HydroError::contract(format!(
                        "node {i} appears twice across splits"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Conditions noticed while building a graph that do not make it invalid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum GraphFlag {
    NoEdges,
    /// Edge records that disagreed on a pair's weight were averaged; carries
    /// the number of affected pairs.
    Symmetrized(usize),
    DuplicateEdges(usize),
    SelfLoopsDropped(usize),
}

/// An undirected, possibly weighted graph with node features, labels and
/// splits. The adjacency is stored as a symmetric CSR matrix.
#[derive(Clone, Debug)]
pub struct Graph {
    adjacency: CsMat<f64>,
    features: Array2<f64>,
    labels: Vec<usize>,
    num_classes: usize,
    splits: Splits,
    flags: Vec<GraphFlag>,
}

impl Graph {
    /// Builds a graph from a symmetric adjacency. Fails on shape mismatches,
    /// asymmetric or negative weights, out-of-range labels or bad splits.
    pub fn new(
        adjacency: CsMat<f64>,
        features: Array2<f64>,
        labels: Vec<usize>,
        num_classes: usize,
        splits: Splits,
    ) -> Result<Self> {
        let (r, c) = adjacency.shape();
        if r != c {
            return Err(HydroError::shape(format!("adjacency is {r}×{c}")));
        }
        let n = r;
        if features.nrows() != n {
            return Err(HydroError::shape(format!(
                "{} feature rows for {n} nodes",
                features.nrows()
            )));
        }
        if labels.len() != n {
            return Err(HydroError::shape(format!(
                "{} labels for {n} nodes",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(HydroError::contract(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(HydroError::domain("non-finite feature value"));
        }
        let adjacency = adjacency.to_csr();
        for (&w, (i, j)) in adjacency.iter() {
            if !w.is_finite() || w < 0.0 {
                return Err(HydroError::domain(format!("edge ({i},{j}) has weight {w}")));
            }
            let back = adjacency.get(j, i).copied().unwrap_or(0.0);
            if (back - w).abs() > SYMMETRY_TOL {
                return Err(HydroError::contract(format!(
                    "adjacency is not symmetric at ({i},{j})"
                )));
            }
        }
        splits.validate(n)?;
        let mut flags = Vec::new();
        if adjacency.nnz() == 0 {
            flags.push(GraphFlag::NoEdges);
        }
        Ok(Self {
            adjacency,
            features,
            labels,
            num_classes,
            splits,
            flags,
        })
    }

    /// Builds a graph from undirected weighted edges. Each pair may be given
    /// once in either orientation; repeated pairs keep the first weight.
    pub fn from_edges(
        n: usize,
        edges: &[(usize, usize, f64)],
        features: Array2<f64>,
        labels: Vec<usize>,
        num_classes: usize,
        splits: Splits,
    ) -> Result<Self> {
        let mut seen = BTreeSet::new();
        let mut tri = TriMat::new((n, n));
        let mut dropped_loops = 0;
        let mut duplicates = 0;
        for &(u, v, w) in edges {
            if u >= n || v >= n {
                return Err(HydroError::contract(format!(
                    "edge ({u},{v}) out of range for {n} nodes"
                )));
            }
            if u == v {
                dropped_loops += 1;
                continue;
            }
            let key = (u.min(v), u.max(v));
            if !seen.insert(key) {
                duplicates += 1;
                continue;
            }
            tri.add_triplet(u, v, w);
            tri.add_triplet(v, u, w);
        }
        let mut g = Self::new(tri.to_csr(), features, labels, num_classes, splits)?;
        if dropped_loops > 0 {
            g.flags.push(GraphFlag::SelfLoopsDropped(dropped_loops));
        }
        if duplicates > 0 {
            g.flags.push(GraphFlag::DuplicateEdges(duplicates));
        }
        Ok(g)
    }

    /// Unit-weight graph with no features, a single class and no splits;
    /// handy for structural analysis.
    pub fn structure_only(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let weighted: Vec<_> = edges.iter().map(|&(u, v)| (u, v, 1.0)).collect();
        Self::from_edges(
            n,
            &weighted,
            Array2::zeros((n, 0)),
            vec![0; n],
            1,
            Splits::default(),
        )
    }

    /// Graph from a dense symmetric weight matrix; the diagonal is ignored.
    pub fn from_dense(
        adjacency: &Array2<f64>,
        features: Array2<f64>,
        labels: Vec<usize>,
        num_classes: usize,
        splits: Splits,
    ) -> Result<Self> {
        let (r, c) = adjacency.dim();
        if r != c {
            return Err(HydroError::shape(format!("adjacency is {r}×{c}")));
        }
        let mut tri = TriMat::new((r, r));
        for ((i, j), &w) in adjacency.indexed_iter() {
            if i != j && w != 0.0 {
                tri.add_triplet(i, j, w);
            }
        }
        Self::new(tri.to_csr(), features, labels, num_classes, splits)
    }

    pub(crate) fn push_flag(&mut self, flag: GraphFlag) {
        self.flags.push(flag);
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    /// Number of undirected edges (unordered pairs with nonzero weight).
    pub fn num_edges(&self) -> usize {
        let loops = (0..self.n())
            .filter(|&i| self.adjacency.get(i, i).is_some_and(|&w| w != 0.0))
            .count();
        (self.adjacency.nnz() - loops) / 2 + loops
    }

    pub fn num_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn adjacency(&self) -> &CsMat<f64> {
        &self.adjacency
    }

    pub fn dense_adjacency(&self) -> Array2<f64> {
        self.adjacency.to_dense()
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn splits(&self) -> &Splits {
        &self.splits
    }

    pub fn flags(&self) -> &[GraphFlag] {
        &self.flags
    }

    /// Neighbours of `i` with their edge weights, in ascending index order.
    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let row = self.adjacency.outer_view(i).expect("row in range");
        row.iter()
            .map(|(j, &w)| (j, w))
            .collect::<Vec<_>>()
            .into_iter()
    }

    /// Weighted degrees.
    pub fn degrees(&self) -> Vec<f64> {
        (0..self.n())
            .map(|i| self.neighbors(i).map(|(_, w)| w).sum())
            .collect()
    }

    /// Undirected edges `(u, v, w)` with `u < v`, in row-major order.
    pub fn edges(&self) -> Vec<(usize, usize, f64)> {
        self.adjacency
            .iter()
            .filter(|(_, (i, j))| i < j)
            .map(|(&w, (i, j))| (i, j, w))
            .collect()
    }

    /// Connected components as node lists, each sorted, ordered by their
    /// smallest node.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let n = self.n();
        let mut comp = vec![usize::MAX; n];
        let mut out = Vec::new();
        for start in 0..n {
            if comp[start] != usize::MAX {
                continue;
            }
            let id = out.len();
            let mut members = vec![start];
            comp[start] = id;
            let mut head = 0;
            while head < members.len() {
                let u = members[head];
                head += 1;
                for (v, _) in self.neighbors(u) {
                    if comp[v] == usize::MAX {
                        comp[v] = id;
                        members.push(v);
                    }
                }
            }
            members.sort_unstable();
            out.push(members);
        }
        out
    }

    pub fn is_connected(&self) -> bool {
        self.n() > 0 && self.components().len() == 1
    }

    /// The subgraph induced by `nodes`, in the given order. Split membership
    /// carries over to the selected nodes.
    pub fn induced(&self, nodes: &[usize]) -> Result<Graph> {
        let n = self.n();
        let mut pos = vec![usize::MAX; n];
        for (k, &u) in nodes.iter().enumerate() {
            if u >= n {
                return Err(HydroError::contract(format!("node {u} out of range")));
            }
            if pos[u] != usize::MAX {
                return Err(HydroError::contract(format!("node {u} selected twice")));
            }
            pos[u] = k;
        }
        let k = nodes.len();
        let mut tri = TriMat::new((k, k));
        for (a, &u) in nodes.iter().enumerate() {
            for (v, w) in self.neighbors(u) {
                if pos[v] != usize::MAX {
                    tri.add_triplet(a, pos[v], w);
                }
            }
        }
        let remap = |idx: &[usize]| -> Vec<usize> {
            let mut out: Vec<usize> = idx
                .iter()
                .filter(|&&i| pos[i] != usize::MAX)
                .map(|&i| pos[i])
                .collect();
            out.sort_unstable();
            out
        };
        let splits = Splits {
            train: remap(&self.splits.train),
            val: remap(&self.splits.val),
            test: remap(&self.splits.test),
        };
        let features = self.features.select(ndarray::Axis(0), nodes);
        let labels = nodes.iter().map(|&u| self.labels[u]).collect();
        Graph::new(tri.to_csr(), features, labels, self.num_classes, splits)
    }

    /// The same graph with a different split assignment.
    pub fn with_splits(&self, splits: Splits) -> Result<Graph> {
        splits.validate(self.n())?;
        let mut g = self.clone();
        g.splits = splits;
        Ok(g)
    }

    /// The same graph with the given undirected edges removed.
    pub fn without_edges(&self, removed: &[(usize, usize)]) -> Result<Graph> {
        let drop: BTreeSet<(usize, usize)> =
            removed.iter().map(|&(u, v)| (u.min(v), u.max(v))).collect();
        let mut tri = TriMat::new((self.n(), self.n()));
        for (&w, (i, j)) in self.adjacency.iter() {
            if !drop.contains(&(i.min(j), i.max(j))) {
                tri.add_triplet(i, j, w);
            }
        }
        Graph::new(
            tri.to_csr(),
            self.features.clone(),
            self.labels.clone(),
            self.num_classes,
            self.splits.clone(),
        )
    }

    /// Per-class node counts over the training split.
    pub fn train_class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &i in &self.splits.train {
            counts[self.labels[i]] += 1;
        }
        counts
    }
}
