//! Link-reduced graphs: remove a fault set `F`, then up to `f` further
//! incoming links at every node.
//!
//! Reduced graphs are identified by their removal choices, so two choices
//! that happen to leave the same edge set are still counted twice.

use itertools::Itertools;
use num_bigint::BigUint;
use num_traits::{One, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{DiGraph, Edge, GraphError, NodeId, MAX_MASK_NODES};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ReductionError {
    #[error("fault set has {size} links but the budget is f = {f}")]
    FaultBudget { size: usize, f: usize },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("enumeration works on at most {MAX_MASK_NODES} nodes, got {0}")]
    TooManyNodes(usize),
    #[error("node {node}: cannot remove {removed:?}, surviving in-links come from {surviving:?}")]
    InvalidRemoval {
        node: NodeId,
        removed: Vec<NodeId>,
        surviving: Vec<NodeId>,
    },
}

/// One link-reduced graph G_F.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReducedGraph {
    pub n: usize,
    /// F, sorted.
    pub fault_set: Vec<Edge>,
    /// N_i^r for every node: senders whose link into `i` was additionally removed.
    pub removed: Vec<Vec<NodeId>>,
}

impl ReducedGraph {
    /// Validates the removal choices against `g` and the budget `f`.
    pub fn new(
        g: &DiGraph,
        fault_set: Vec<Edge>,
        removed: Vec<Vec<NodeId>>,
        f: usize,
    ) -> Result<Self, ReductionError> {
        let mut fault_set = fault_set;
        fault_set.sort_unstable();
        check_fault_set(g, &fault_set, f)?;
        assert_eq!(removed.len(), g.n(), "one removal set per node");
        for (i, r) in removed.iter().enumerate() {
            let surviving = surviving_in_neighbors(g, &fault_set, i);
            if r.len() > f || !r.iter().all(|j| surviving.contains(j)) {
                return Err(ReductionError::InvalidRemoval {
                    node: i,
                    removed: r.clone(),
                    surviving,
                });
            }
        }
        let removed = removed
            .into_iter()
            .map(|mut r| {
                r.sort_unstable();
                r
            })
            .collect();
        Ok(ReducedGraph {
            n: g.n(),
            fault_set,
            removed,
        })
    }

    /// E_F for the base graph `g`.
    pub fn surviving_edges(&self, g: &DiGraph) -> Vec<Edge> {
        g.edges()
            .iter()
            .copied()
            .filter(|&(j, i)| {
                self.fault_set.binary_search(&(j, i)).is_err() && !self.removed[i].contains(&j)
            })
            .collect()
    }

    pub fn graph(&self, g: &DiGraph) -> DiGraph {
        DiGraph::new(self.n, self.surviving_edges(g)).expect("subgraph of a valid graph")
    }

    pub fn connectivity_matrix(&self, g: &DiGraph) -> ConnectivityMatrix {
        ConnectivityMatrix::from_graph(&self.graph(g))
    }
}

pub(crate) fn check_fault_set(g: &DiGraph, fault_set: &[Edge], f: usize) -> Result<(), ReductionError> {
    if fault_set.len() > f {
        return Err(ReductionError::FaultBudget {
            size: fault_set.len(),
            f,
        });
    }
    for &(j, i) in fault_set {
        if !g.has_edge((j, i)) {
            return Err(GraphError::MissingEdge(j, i).into());
        }
    }
    Ok(())
}

fn surviving_in_neighbors(g: &DiGraph, fault_set: &[Edge], i: NodeId) -> Vec<NodeId> {
    g.in_neighbors(i)
        .iter()
        .copied()
        .filter(|&j| !fault_set.contains(&(j, i)))
        .collect()
}

/// All subsets of `items` of size at most `f`, in lexicographic order.
fn small_subsets(items: &[NodeId], f: usize) -> Vec<Vec<NodeId>> {
    let mut out: Vec<Vec<NodeId>> = (0..=f.min(items.len()))
        .flat_map(|k| items.iter().copied().combinations(k))
        .collect();
    out.sort();
    out
}

/// Lazy enumeration of every reduced graph for one fault set.
///
/// Order is lexicographic in the tuple of per-node removal sets, with the
/// highest node id varying fastest.
pub struct ReducedGraphs {
    n: usize,
    fault_set: Vec<Edge>,
    choices: Vec<Vec<Vec<NodeId>>>,
    masks: Vec<Vec<u64>>,
    cursor: Vec<usize>,
    done: bool,
}

impl ReducedGraphs {
    /// In-neighbor masks of the reduced graph at the current cursor.
    fn current_masks(&self) -> Vec<u64> {
        self.cursor
            .iter()
            .enumerate()
            .map(|(i, &k)| self.masks[i][k])
            .collect()
    }

    fn advance(&mut self) {
        for i in (0..self.n).rev() {
            self.cursor[i] += 1;
            if self.cursor[i] < self.choices[i].len() {
                return;
            }
            self.cursor[i] = 0;
        }
        self.done = true;
    }

    /// Visits the in-masks of each reduced graph without building `ReducedGraph`
    /// values; returns the graph at which `visit` breaks.
    pub fn for_each_masks<B>(
        mut self,
        mut visit: impl FnMut(&[u64]) -> std::ops::ControlFlow<B>,
    ) -> Option<(ReducedGraph, B)> {
        while !self.done {
            let masks = self.current_masks();
            if let std::ops::ControlFlow::Break(b) = visit(&masks) {
                return Some((self.current(), b));
            }
            self.advance();
        }
        None
    }

    fn current(&self) -> ReducedGraph {
        ReducedGraph {
            n: self.n,
            fault_set: self.fault_set.clone(),
            removed: self
                .cursor
                .iter()
                .enumerate()
                .map(|(i, &k)| self.choices[i][k].clone())
                .collect(),
        }
    }

    /// Number of reduced graphs this enumerator yields in total.
    pub fn total(&self) -> BigUint {
        self.choices
            .iter()
            .map(|c| BigUint::from(c.len()))
            .product()
    }
}

impl Iterator for ReducedGraphs {
    type Item = ReducedGraph;

    fn next(&mut self) -> Option<ReducedGraph> {
        if self.done {
            return None;
        }
        let out = self.current();
        self.advance();
        Some(out)
    }
}

pub fn enumerate_reduced_graphs(
    g: &DiGraph,
    fault_set: &[Edge],
    f: usize,
) -> Result<ReducedGraphs, ReductionError> {
    if g.n() > MAX_MASK_NODES {
        return Err(ReductionError::TooManyNodes(g.n()));
    }
    let mut fault_set = fault_set.to_vec();
    fault_set.sort_unstable();
    fault_set.dedup();
    check_fault_set(g, &fault_set, f)?;

    let mut choices = Vec::with_capacity(g.n());
    let mut masks = Vec::with_capacity(g.n());
    for i in g.nodes() {
        let surviving = surviving_in_neighbors(g, &fault_set, i);
        let full = surviving.iter().fold(0u64, |m, &j| m | (1 << j));
        let subsets = small_subsets(&surviving, f);
        masks.push(
            subsets
                .iter()
                .map(|s| s.iter().fold(full, |m, &j| m & !(1 << j)))
                .collect(),
        );
        choices.push(subsets);
    }
    Ok(ReducedGraphs {
        n: g.n(),
        fault_set,
        choices,
        masks,
        cursor: vec![0; g.n()],
        done: false,
    })
}

/// Every F ⊆ E with |F| <= f: by size, then lexicographically.
pub fn fault_sets(g: &DiGraph, f: usize) -> impl Iterator<Item = Vec<Edge>> + '_ {
    (0..=f.min(g.edge_count())).flat_map(move |k| g.edges().iter().copied().combinations(k))
}

fn binomial(n: usize, k: usize) -> BigUint {
    if k > n {
        return BigUint::zero();
    }
    let k = k.min(n - k);
    let mut acc = BigUint::one();
    for t in 0..k {
        acc = acc * BigUint::from(n - t) / BigUint::from(t + 1);
    }
    acc
}

/// Number of ways to drop at most `f` of `d` incoming links.
fn removal_choices(d: usize, f: usize) -> BigUint {
    (0..=f.min(d)).map(|k| binomial(d, k)).sum()
}

/// r = Σ_{|F| <= f} |R_F|.
///
/// A fault set only matters through how many of its links end at each node,
/// so the sum is the coefficient sum (degrees 0..=f) of a product of
/// per-node polynomials Σ_c C(d_i, c) · choices(d_i - c, f) · x^c.
pub fn count_r(g: &DiGraph, f: usize) -> BigUint {
    let mut poly = vec![BigUint::one()];
    for i in g.nodes() {
        let d = g.in_degree(i);
        let node_poly: Vec<BigUint> = (0..=f.min(d))
            .map(|c| binomial(d, c) * removal_choices(d - c, f))
            .collect();
        let mut next = vec![BigUint::zero(); (poly.len() + node_poly.len() - 1).min(f + 1)];
        for (a, pa) in poly.iter().enumerate() {
            for (b, pb) in node_poly.iter().enumerate() {
                if a + b <= f {
                    next[a + b] += pa * pb;
                }
            }
        }
        poly = next;
    }
    poly.into_iter().sum()
}

/// |R_F| for a single fault set.
pub fn count_for_fault_set(g: &DiGraph, fault_set: &[Edge], f: usize) -> Result<BigUint, ReductionError> {
    Ok(enumerate_reduced_graphs(g, fault_set, f)?.total())
}

/// H with H[i][j] = 1 iff j = i or (j, i) survives. Rows stored as bitmasks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConnectivityMatrix {
    rows: Vec<u64>,
}

impl ConnectivityMatrix {
    pub fn from_graph(g: &DiGraph) -> Self {
        Self::from_in_masks(&g.in_masks())
    }

    pub fn from_in_masks(in_masks: &[u64]) -> Self {
        ConnectivityMatrix {
            rows: in_masks
                .iter()
                .enumerate()
                .map(|(i, &m)| m | (1 << i))
                .collect(),
        }
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.rows[i] & (1 << j) != 0
    }

    pub fn to_rows(&self) -> Vec<Vec<u8>> {
        (0..self.n())
            .map(|i| (0..self.n()).map(|j| self.get(i, j) as u8).collect())
            .collect()
    }

    /// Boolean product `self · other`.
    pub fn mul(&self, other: &ConnectivityMatrix) -> ConnectivityMatrix {
        let rows = self
            .rows
            .iter()
            .map(|&row| {
                let mut acc = 0u64;
                let mut rest = row;
                while rest != 0 {
                    let k = rest.trailing_zeros() as usize;
                    rest &= rest - 1;
                    acc |= other.rows[k];
                }
                acc
            })
            .collect();
        ConnectivityMatrix { rows }
    }

    pub fn pow(&self, k: usize) -> ConnectivityMatrix {
        let mut out = ConnectivityMatrix {
            rows: (0..self.n()).map(|i| 1u64 << i).collect(),
        };
        for _ in 0..k {
            out = out.mul(self);
        }
        out
    }

    /// Columns whose every entry is non-zero.
    pub fn positive_columns(&self) -> Vec<usize> {
        let all = self.rows.iter().fold(u64::MAX, |acc, &r| acc & r);
        (0..self.n()).filter(|&j| all & (1 << j) != 0).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{chain3, fig1, isolated2, k2};
    use std::collections::BTreeSet;

    #[test]
    fn k2_reductions() {
        let g = k2();
        let all: Vec<_> = enumerate_reduced_graphs(&g, &[], 0).unwrap().collect();
        assert_eq!(all.len(), 1);
        assert_eq!(all[0].surviving_edges(&g), g.edges());

        let all: Vec<_> = enumerate_reduced_graphs(&g, &[], 1).unwrap().collect();
        assert_eq!(all.len(), 4);
        let distinct: BTreeSet<_> = all.iter().map(|r| r.surviving_edges(&g)).collect();
        assert_eq!(distinct.len(), 4);
    }

    #[test]
    fn fig1_empty_fault_set_has_1024_reductions() {
        let g = fig1();
        assert_eq!(enumerate_reduced_graphs(&g, &[], 1).unwrap().count(), 1024);
    }

    #[test]
    fn rejects_oversized_or_foreign_fault_sets() {
        let g = k2();
        assert_eq!(
            enumerate_reduced_graphs(&g, &[(0, 1), (1, 0)], 1).err(),
            Some(ReductionError::FaultBudget { size: 2, f: 1 })
        );
        assert!(enumerate_reduced_graphs(&chain3(), &[(2, 1)], 1).is_err());
    }

    fn brute_force_r(g: &DiGraph, f: usize) -> usize {
        fault_sets(g, f)
            .map(|fs| enumerate_reduced_graphs(g, &fs, f).unwrap().count())
            .sum()
    }

    #[test]
    fn count_r_goldens() {
        // Frozen from brute_force_r.
        assert_eq!(brute_force_r(&k2(), 0), 1);
        assert_eq!(count_r(&k2(), 0), BigUint::from(1u32));
        assert_eq!(brute_force_r(&k2(), 1), 8);
        assert_eq!(count_r(&k2(), 1), BigUint::from(8u32));
        assert_eq!(brute_force_r(&fig1(), 1), 12544);
        assert_eq!(count_r(&fig1(), 1), BigUint::from(12544u32));
    }

    #[test]
    fn count_r_matches_enumeration_on_small_graphs() {
        for n in 2..=4usize {
            let pairs: Vec<Edge> = (0..n)
                .flat_map(|j| (0..n).filter(move |&i| i != j).map(move |i| (j, i)))
                .collect();
            for bits in 0..(1u32 << pairs.len()) {
                let edges = pairs
                    .iter()
                    .enumerate()
                    .filter(|(k, _)| bits & (1 << k) != 0)
                    .map(|(_, &e)| e);
                let g = DiGraph::new(n, edges).unwrap();
                for f in 0..=1 {
                    assert_eq!(count_r(&g, f), BigUint::from(brute_force_r(&g, f)));
                }
            }
        }
    }

    #[test]
    fn count_r_at_f2_matches_enumeration() {
        let g = DiGraph::complete(4).unwrap();
        assert_eq!(count_r(&g, 2), BigUint::from(brute_force_r(&g, 2)));
    }

    #[test]
    fn enumeration_is_lazy_and_ordered() {
        let g = fig1();
        let mut it = enumerate_reduced_graphs(&g, &[], 1).unwrap();
        let first = it.next().unwrap();
        assert!(first.removed.iter().all(Vec::is_empty));
        let second = it.next().unwrap();
        assert_eq!(second.removed[4], vec![1]);
    }

    #[test]
    fn connectivity_matrix_examples() {
        let g = k2();
        let full = ReducedGraph::new(&g, vec![], vec![vec![], vec![]], 0).unwrap();
        assert_eq!(full.connectivity_matrix(&g).to_rows(), vec![vec![1, 1], vec![1, 1]]);

        let g = isolated2();
        let rg = ReducedGraph::new(&g, vec![], vec![vec![], vec![]], 0).unwrap();
        assert_eq!(rg.connectivity_matrix(&g).to_rows(), vec![vec![1, 0], vec![0, 1]]);

        let g = DiGraph::new(2, [(0, 1)]).unwrap();
        let rg = ReducedGraph::new(&g, vec![], vec![vec![], vec![]], 0).unwrap();
        assert_eq!(rg.connectivity_matrix(&g).to_rows(), vec![vec![1, 0], vec![1, 1]]);
    }

    #[test]
    fn reduced_graph_validation() {
        let g = fig1();
        assert!(ReducedGraph::new(&g, vec![(1, 4)], vec![vec![], vec![], vec![], vec![], vec![1]], 1).is_err());
        assert!(ReducedGraph::new(&g, vec![(1, 4)], vec![vec![], vec![], vec![], vec![], vec![2]], 1).is_ok());
        assert!(ReducedGraph::new(&g, vec![], vec![vec![1, 2], vec![], vec![], vec![], vec![]], 1).is_err());
    }

    #[test]
    fn reduced_powers_have_positive_column() {
        let g = fig1();
        for fs in fault_sets(&g, 1) {
            for rg in enumerate_reduced_graphs(&g, &fs, 1).unwrap() {
                let h = rg.connectivity_matrix(&g).pow(g.n());
                assert!(!h.positive_columns().is_empty());
            }
        }
        let c = chain3();
        let found = fault_sets(&c, 1).any(|fs| {
            enumerate_reduced_graphs(&c, &fs, 1)
                .unwrap()
                .any(|rg| rg.connectivity_matrix(&c).pow(3).positive_columns().is_empty())
        });
        assert!(found);
    }
}
