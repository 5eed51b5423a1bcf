//! Simple directed graphs, strongly connected components and reachability.
//!
//! Nodes are dense ids `0..n`. An edge `(j, i)` is a channel from `j` to `i`.

use std::collections::{BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type NodeId = usize;

/// A directed link `(from, to)`.
pub type Edge = (NodeId, NodeId);

/// Bitmask graphs are used on the enumeration hot paths.
pub const MAX_MASK_NODES: usize = 64;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GraphError {
    #[error("a graph needs at least 2 nodes, got {0}")]
    TooFewNodes(usize),
    #[error("self-loop on node {0}")]
    SelfLoop(NodeId),
    #[error("duplicate edge ({0}, {1})")]
    DuplicateEdge(NodeId, NodeId),
    #[error("edge ({0}, {1}) references a node outside 0..{2}")]
    NodeOutOfRange(NodeId, NodeId, usize),
    #[error("edge ({0}, {1}) is not in the graph")]
    MissingEdge(NodeId, NodeId),
}

/// Simple directed graph without self-loops.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawGraph", into = "RawGraph")]
pub struct DiGraph {
    n: usize,
    edges: Vec<Edge>,
    in_nbrs: Vec<Vec<NodeId>>,
    out_nbrs: Vec<Vec<NodeId>>,
}

#[derive(Serialize, Deserialize)]
struct RawGraph {
    n: usize,
    edges: Vec<Edge>,
}

impl TryFrom<RawGraph> for DiGraph {
    type Error = GraphError;

    fn try_from(raw: RawGraph) -> Result<Self, Self::Error> {
        DiGraph::new(raw.n, raw.edges)
    }
}

impl From<DiGraph> for RawGraph {
    fn from(g: DiGraph) -> Self {
        RawGraph { n: g.n, edges: g.edges }
    }
}

impl DiGraph {
    pub fn new(n: usize, edges: impl IntoIterator<Item = Edge>) -> Result<Self, GraphError> {
        if n < 2 {
            return Err(GraphError::TooFewNodes(n));
        }
        let mut set = BTreeSet::new();
        for (j, i) in edges {
            if j >= n || i >= n {
                return Err(GraphError::NodeOutOfRange(j, i, n));
            }
            if j == i {
                return Err(GraphError::SelfLoop(i));
            }
            if !set.insert((j, i)) {
                return Err(GraphError::DuplicateEdge(j, i));
            }
        }
        Ok(Self::from_sorted_unchecked(n, set.into_iter().collect()))
    }

    /// `edges` must already be sorted, deduplicated and valid for `n`.
    fn from_sorted_unchecked(n: usize, edges: Vec<Edge>) -> Self {
        let mut in_nbrs = vec![Vec::new(); n];
        let mut out_nbrs = vec![Vec::new(); n];
        for &(j, i) in &edges {
            out_nbrs[j].push(i);
            in_nbrs[i].push(j);
        }
        for list in &mut in_nbrs {
            list.sort_unstable();
        }
        DiGraph {
            n,
            edges,
            in_nbrs,
            out_nbrs,
        }
    }

    /// Complete bidirectional graph on `n` nodes.
    pub fn complete(n: usize) -> Result<Self, GraphError> {
        let edges = (0..n).flat_map(|j| (0..n).filter(move |&i| i != j).map(move |i| (j, i)));
        Self::new(n, edges)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nodes(&self) -> std::ops::Range<NodeId> {
        0..self.n
    }

    /// Edges in ascending `(from, to)` order.
    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// N_i^-, sorted ascending.
    pub fn in_neighbors(&self, i: NodeId) -> &[NodeId] {
        &self.in_nbrs[i]
    }

    /// N_i^+, sorted ascending.
    pub fn out_neighbors(&self, i: NodeId) -> &[NodeId] {
        &self.out_nbrs[i]
    }

    /// E_i^-: incoming links of `i`.
    pub fn in_links(&self, i: NodeId) -> impl Iterator<Item = Edge> + '_ {
        self.in_nbrs[i].iter().map(move |&j| (j, i))
    }

    pub fn in_degree(&self, i: NodeId) -> usize {
        self.in_nbrs[i].len()
    }

    pub fn max_in_degree(&self) -> usize {
        self.in_nbrs.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn has_edge(&self, edge: Edge) -> bool {
        self.edges.binary_search(&edge).is_ok()
    }

    /// The graph `(V, E - removed)`. Every removed edge must exist.
    pub fn without_edges(&self, removed: &[Edge]) -> Result<DiGraph, GraphError> {
        for &(j, i) in removed {
            if !self.has_edge((j, i)) {
                return Err(GraphError::MissingEdge(j, i));
            }
        }
        let edges = self
            .edges
            .iter()
            .copied()
            .filter(|e| !removed.contains(e))
            .collect();
        Ok(Self::from_sorted_unchecked(self.n, edges))
    }

    /// Per-node bitmask of in-neighbors. Panics when `n > 64`.
    pub fn in_masks(&self) -> Vec<u64> {
        assert!(self.n <= MAX_MASK_NODES, "bitmask view needs n <= 64");
        self.in_nbrs
            .iter()
            .map(|list| list.iter().fold(0u64, |m, &j| m | (1 << j)))
            .collect()
    }

    /// Same graph with nodes renamed by `perm[old] = new`.
    pub fn relabel(&self, perm: &[NodeId]) -> Result<DiGraph, GraphError> {
        DiGraph::new(self.n, self.edges.iter().map(|&(j, i)| (perm[j], perm[i])))
    }
}

/// Strongly connected component decomposition and its condensation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Decomposition {
    /// Components sorted by smallest member; members sorted ascending.
    pub components: Vec<Vec<NodeId>>,
    /// Component index of each node.
    pub component_of: Vec<usize>,
    /// Direct edges of the condensation, deduplicated and sorted.
    pub dag_edges: Vec<(usize, usize)>,
    /// Components with no incoming condensation edge.
    pub source_indices: Vec<usize>,
}

impl Decomposition {
    /// Kahn's algorithm over the condensation.
    pub fn is_acyclic(&self) -> bool {
        let h = self.components.len();
        let mut indeg = vec![0usize; h];
        let mut succ = vec![Vec::new(); h];
        for &(a, b) in &self.dag_edges {
            if a == b {
                return false;
            }
            indeg[b] += 1;
            succ[a].push(b);
        }
        let mut queue: VecDeque<usize> = (0..h).filter(|&c| indeg[c] == 0).collect();
        let mut seen = 0;
        while let Some(c) = queue.pop_front() {
            seen += 1;
            for &d in &succ[c] {
                indeg[d] -= 1;
                if indeg[d] == 0 {
                    queue.push_back(d);
                }
            }
        }
        seen == h
    }
}

/// Iterative Tarjan; output ordering is canonicalised afterwards.
pub fn decompose(g: &DiGraph) -> Decomposition {
    let n = g.n();
    const UNVISITED: usize = usize::MAX;
    let mut index = vec![UNVISITED; n];
    let mut low = vec![0usize; n];
    let mut on_stack = vec![false; n];
    let mut stack = Vec::new();
    let mut raw: Vec<Vec<NodeId>> = Vec::new();
    let mut next_index = 0;

    for root in 0..n {
        if index[root] != UNVISITED {
            continue;
        }
        // (node, position in out-neighbor list)
        let mut call: Vec<(NodeId, usize)> = vec![(root, 0)];
        index[root] = next_index;
        low[root] = next_index;
        next_index += 1;
        stack.push(root);
        on_stack[root] = true;

        while let Some(&mut (v, ref mut pos)) = call.last_mut() {
            if let Some(&w) = g.out_neighbors(v).get(*pos) {
                *pos += 1;
                if index[w] == UNVISITED {
                    index[w] = next_index;
                    low[w] = next_index;
                    next_index += 1;
                    stack.push(w);
                    on_stack[w] = true;
                    call.push((w, 0));
                } else if on_stack[w] {
                    low[v] = low[v].min(index[w]);
                }
                continue;
            }
            call.pop();
            if let Some(&(parent, _)) = call.last() {
                low[parent] = low[parent].min(low[v]);
            }
            if low[v] == index[v] {
                let mut comp = Vec::new();
                loop {
                    let w = stack.pop().expect("tarjan stack underflow");
                    on_stack[w] = false;
                    comp.push(w);
                    if w == v {
                        break;
                    }
                }
                raw.push(comp);
            }
        }
    }

    for comp in &mut raw {
        comp.sort_unstable();
    }
    raw.sort_unstable_by_key(|c| c[0]);

    let mut component_of = vec![0; n];
    for (k, comp) in raw.iter().enumerate() {
        for &v in comp {
            component_of[v] = k;
        }
    }
    let dag: BTreeSet<(usize, usize)> = g
        .edges()
        .iter()
        .map(|&(j, i)| (component_of[j], component_of[i]))
        .filter(|(a, b)| a != b)
        .collect();
    let mut has_incoming = vec![false; raw.len()];
    for &(_, b) in &dag {
        has_incoming[b] = true;
    }
    let source_indices = (0..raw.len()).filter(|&k| !has_incoming[k]).collect();

    Decomposition {
        components: raw,
        component_of,
        dag_edges: dag.into_iter().collect(),
        source_indices,
    }
}

pub fn source_components(d: &Decomposition) -> Vec<Vec<NodeId>> {
    d.source_indices
        .iter()
        .map(|&k| d.components[k].clone())
        .collect()
}

/// Breadth-first reachability from `s` (including `s`).
pub fn reachable_from(g: &DiGraph, s: NodeId) -> Vec<bool> {
    let mut seen = vec![false; g.n()];
    let mut queue = VecDeque::from([s]);
    seen[s] = true;
    while let Some(v) = queue.pop_front() {
        for &w in g.out_neighbors(v) {
            if !seen[w] {
                seen[w] = true;
                queue.push_back(w);
            }
        }
    }
    seen
}

pub fn reaches_all(g: &DiGraph, s: NodeId) -> bool {
    reachable_from(g, s).into_iter().all(|b| b)
}

/// Ancestor sets (nodes with a path to `v`, `v` included) from in-neighbor masks.
pub fn ancestor_masks(in_masks: &[u64]) -> Vec<u64> {
    let n = in_masks.len();
    let mut anc: Vec<u64> = (0..n).map(|v| in_masks[v] | (1 << v)).collect();
    loop {
        let mut changed = false;
        for v in 0..n {
            let mut acc = anc[v];
            let mut rest = anc[v];
            while rest != 0 {
                let u = rest.trailing_zeros() as usize;
                rest &= rest - 1;
                acc |= anc[u];
            }
            if acc != anc[v] {
                anc[v] = acc;
                changed = true;
            }
        }
        if !changed {
            return anc;
        }
    }
}

/// Source components as node masks, computed from in-neighbor masks.
///
/// A node lies in a source component iff each of its ancestors is also
/// reachable from it; the component is then exactly its ancestor set.
pub fn source_component_masks(in_masks: &[u64]) -> Vec<u64> {
    let anc = ancestor_masks(in_masks);
    let mut out = Vec::new();
    for (v, &a) in anc.iter().enumerate() {
        if a.trailing_zeros() as usize != v {
            continue;
        }
        let mut rest = a;
        let mut closed = true;
        while rest != 0 {
            let u = rest.trailing_zeros() as usize;
            rest &= rest - 1;
            if anc[u] & (1 << v) == 0 {
                closed = false;
                break;
            }
        }
        if closed {
            out.push(a);
        }
    }
    out
}

pub fn mask_to_nodes(mask: u64) -> Vec<NodeId> {
    (0..MAX_MASK_NODES).filter(|&v| mask & (1 << v) != 0).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::fig1;
    use proptest::prelude::*;

    #[test]
    fn rejects_invalid_graphs() {
        assert_eq!(DiGraph::new(1, []), Err(GraphError::TooFewNodes(1)));
        assert_eq!(DiGraph::new(2, [(0, 0)]), Err(GraphError::SelfLoop(0)));
        assert_eq!(
            DiGraph::new(2, [(0, 1), (0, 1)]),
            Err(GraphError::DuplicateEdge(0, 1))
        );
        assert!(matches!(
            DiGraph::new(2, [(0, 2)]),
            Err(GraphError::NodeOutOfRange(..))
        ));
    }

    #[test]
    fn decompose_small_cases() {
        let cycle = DiGraph::new(2, [(0, 1), (1, 0)]).unwrap();
        let d = decompose(&cycle);
        assert_eq!(d.components, vec![vec![0, 1]]);
        assert_eq!(source_components(&d), vec![vec![0, 1]]);

        let isolated = DiGraph::new(2, []).unwrap();
        let d = decompose(&isolated);
        assert_eq!(d.components, vec![vec![0], vec![1]]);
        assert_eq!(source_components(&d), vec![vec![0], vec![1]]);

        let chain = DiGraph::new(3, [(0, 1), (1, 2)]).unwrap();
        let d = decompose(&chain);
        assert_eq!(source_components(&d), vec![vec![0]]);
        assert!(d.is_acyclic());
    }

    #[test]
    fn fig1_has_clique_source_and_sink() {
        let g = fig1();
        assert_eq!(g.edge_count(), 15);
        let d = decompose(&g);
        assert_eq!(d.components, vec![vec![0, 1, 2, 3], vec![4]]);
        assert_eq!(source_components(&d), vec![vec![0, 1, 2, 3]]);
        assert!(reaches_all(&g, 0));
        assert!(!reaches_all(&g, 4));
    }

    #[test]
    fn chain_reachability() {
        let chain = DiGraph::new(3, [(0, 1), (1, 2)]).unwrap();
        assert!(reaches_all(&chain, 0));
        assert!(!reaches_all(&chain, 2));
    }

    #[test]
    fn without_edges_requires_existing_edges() {
        let g = fig1();
        let h = g.without_edges(&[(1, 4)]).unwrap();
        assert_eq!(h.in_neighbors(4), &[2, 3]);
        assert_eq!(
            g.without_edges(&[(4, 1)]),
            Err(GraphError::MissingEdge(4, 1))
        );
    }

    /// Mutual-reachability partition via transitive closure.
    fn brute_force_components(g: &DiGraph) -> Vec<Vec<NodeId>> {
        let n = g.n();
        let reach: Vec<Vec<bool>> = (0..n).map(|s| reachable_from(g, s)).collect();
        let mut assigned = vec![false; n];
        let mut out = Vec::new();
        for v in 0..n {
            if assigned[v] {
                continue;
            }
            let comp: Vec<NodeId> = (0..n).filter(|&u| reach[v][u] && reach[u][v]).collect();
            for &u in &comp {
                assigned[u] = true;
            }
            out.push(comp);
        }
        out
    }

    fn graph_from_bits(n: usize, bits: u64) -> DiGraph {
        let pairs: Vec<Edge> = (0..n)
            .flat_map(|j| (0..n).filter(move |&i| i != j).map(move |i| (j, i)))
            .collect();
        let edges = pairs
            .iter()
            .enumerate()
            .filter(|(k, _)| bits & (1 << k) != 0)
            .map(|(_, &e)| e);
        DiGraph::new(n, edges).unwrap()
    }

    #[test]
    fn decompose_matches_closure_on_all_small_graphs() {
        for n in 2..=4usize {
            let m = n * (n - 1);
            for bits in 0..(1u64 << m) {
                let g = graph_from_bits(n, bits);
                let d = decompose(&g);
                assert_eq!(d.components, brute_force_components(&g));
                assert!(d.is_acyclic());
                let fast: Vec<Vec<NodeId>> = source_component_masks(&g.in_masks())
                    .into_iter()
                    .map(mask_to_nodes)
                    .collect();
                assert_eq!(fast, source_components(&d));
            }
        }
    }

    fn arb_graph() -> impl Strategy<Value = DiGraph> {
        (2usize..=8).prop_flat_map(|n| {
            proptest::collection::vec(any::<bool>(), n * (n - 1)).prop_map(move |bits| {
                let mask = bits
                    .iter()
                    .enumerate()
                    .fold(0u64, |m, (k, &b)| if b { m | (1 << k) } else { m });
                graph_from_bits(n, mask)
            })
        })
    }

    proptest! {
        #[test]
        fn decompose_agrees_with_closure(g in arb_graph()) {
            let d = decompose(&g);
            prop_assert_eq!(&d.components, &brute_force_components(&g));
            prop_assert!(d.is_acyclic());
            prop_assert!(!d.source_indices.is_empty());
        }

        #[test]
        fn unique_source_reaches_everything(g in arb_graph()) {
            let d = decompose(&g);
            if d.source_indices.len() == 1 {
                for &s in &d.components[d.source_indices[0]] {
                    prop_assert!(reaches_all(&g, s));
                }
            }
        }

        #[test]
        fn mask_sources_match_decomposition(g in arb_graph()) {
            let fast: Vec<Vec<NodeId>> = source_component_masks(&g.in_masks())
                .into_iter()
                .map(mask_to_nodes)
                .collect();
            prop_assert_eq!(fast, source_components(&decompose(&g)));
        }
    }
}
