//! Exhaustive checkers for Condition P (partition form) and Condition S
//! (unique source component in every link-reduced graph).

use std::ops::ControlFlow;
use std::sync::atomic::{AtomicUsize, Ordering};

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{decompose, source_component_masks, source_components, DiGraph, Edge, NodeId};
use crate::reduction::{count_r, enumerate_reduced_graphs, fault_sets, ReducedGraph, ReductionError};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConditionError {
    #[error("node sets must be non-empty and disjoint")]
    InvalidSets,
    #[error("invalid partition: {0}")]
    InvalidPartition(String),
    #[error("{what} is {actual}, above the cap of {cap}; raise the cap to override")]
    TooLarge {
        what: &'static str,
        actual: String,
        cap: String,
    },
    #[error("witness does not violate the condition")]
    InvalidWitness,
    #[error(transparent)]
    Reduction(#[from] ReductionError),
}

/// Partition (L, C, R) of the node set with L and R non-empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub l: Vec<NodeId>,
    pub c: Vec<NodeId>,
    pub r: Vec<NodeId>,
}

impl Partition {
    pub fn new(n: usize, l: Vec<NodeId>, c: Vec<NodeId>, r: Vec<NodeId>) -> Result<Self, ConditionError> {
        if l.is_empty() || r.is_empty() {
            return Err(ConditionError::InvalidPartition("L and R must be non-empty".into()));
        }
        let mut seen = vec![false; n];
        for &v in l.iter().chain(&c).chain(&r) {
            if v >= n || seen[v] {
                return Err(ConditionError::InvalidPartition(format!(
                    "node {v} is out of range or appears twice"
                )));
            }
            seen[v] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(ConditionError::InvalidPartition("sets do not cover V".into()));
        }
        let sorted = |mut v: Vec<NodeId>| {
            v.sort_unstable();
            v
        };
        Ok(Partition {
            l: sorted(l),
            c: sorted(c),
            r: sorted(r),
        })
    }

    fn from_masks(l: u64, c: u64, r: u64) -> Self {
        use crate::graph::mask_to_nodes;
        Partition {
            l: mask_to_nodes(l),
            c: mask_to_nodes(c),
            r: mask_to_nodes(r),
        }
    }
}

/// A fault set and partition under which neither C∪R ⇒ L nor L∪C ⇒ R.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PViolationWitness {
    pub partition: Partition,
    pub fault_set: Vec<Edge>,
}

impl PViolationWitness {
    /// Re-verifies the violation on (V, E - F).
    pub fn new(g: &DiGraph, partition: Partition, fault_set: Vec<Edge>, f: usize) -> Result<Self, ConditionError> {
        crate::reduction::check_fault_set(g, &fault_set, f)?;
        let reduced = g.without_edges(&fault_set).map_err(ReductionError::from)?;
        let cr: Vec<NodeId> = partition.c.iter().chain(&partition.r).copied().collect();
        let lc: Vec<NodeId> = partition.l.iter().chain(&partition.c).copied().collect();
        if implies_relation(&reduced, &cr, &partition.l, f)? || implies_relation(&reduced, &lc, &partition.r, f)? {
            return Err(ConditionError::InvalidWitness);
        }
        Ok(PViolationWitness { partition, fault_set })
    }
}

/// A reduced graph with more than one source component.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SViolationWitness {
    pub reduced: ReducedGraph,
    pub sources: Vec<Vec<NodeId>>,
}

impl SViolationWitness {
    pub fn new(g: &DiGraph, reduced: ReducedGraph) -> Result<Self, ConditionError> {
        let sources = source_components(&decompose(&reduced.graph(g)));
        if sources.len() < 2 {
            return Err(ConditionError::InvalidWitness);
        }
        Ok(SViolationWitness { reduced, sources })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", content = "witness", rename_all = "snake_case")]
pub enum Verdict<W> {
    Satisfied,
    Violated(W),
}

impl<W> Verdict<W> {
    pub fn is_satisfied(&self) -> bool {
        matches!(self, Verdict::Satisfied)
    }

    pub fn witness(&self) -> Option<&W> {
        match self {
            Verdict::Satisfied => None,
            Verdict::Violated(w) => Some(w),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CheckOptions {
    /// Node cap for the 3^n partition search.
    pub max_nodes_p: usize,
    /// Node cap for the reduced-graph search.
    pub max_nodes_s: usize,
    /// Cap on r, the total number of reduced graphs.
    pub max_reduced_graphs: u64,
    /// Ignore all caps.
    pub allow_large: bool,
    /// Only visit partitions where the smallest node of L ∪ R lies in L.
    pub symmetry_pruning: bool,
    /// For f > 0, report the in-degree witness before enumerating.
    pub indegree_prefilter: bool,
    pub threads: usize,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            max_nodes_p: 12,
            max_nodes_s: 8,
            max_reduced_graphs: 10_000_000,
            allow_large: false,
            symmetry_pruning: false,
            indegree_prefilter: true,
            threads: 1,
        }
    }
}

/// A ⇒ B: some node of B has more than `f` incoming links from A.
pub fn implies_relation(g: &DiGraph, a: &[NodeId], b: &[NodeId], f: usize) -> Result<bool, ConditionError> {
    if a.is_empty() || b.is_empty() || a.iter().any(|v| b.contains(v)) {
        return Err(ConditionError::InvalidSets);
    }
    Ok(b.iter()
        .any(|&i| g.in_neighbors(i).iter().filter(|j| a.contains(j)).count() > f))
}

fn implies_masks(in_masks: &[u64], from: u64, to: u64, f: usize) -> bool {
    let mut rest = to;
    while rest != 0 {
        let i = rest.trailing_zeros() as usize;
        rest &= rest - 1;
        if (in_masks[i] & from).count_ones() as usize > f {
            return true;
        }
    }
    false
}

/// Every node has in-degree at least 2f + 1.
pub fn check_min_indegree(g: &DiGraph, f: usize) -> bool {
    g.nodes().all(|i| g.in_degree(i) > 2 * f)
}

/// For f > 0 and a node `i` with in-degree at most 2f: L = {i}, C = ∅,
/// R = V - {i}, and F = the first min(f, deg) incoming links of `i`.
pub fn indegree_witness(g: &DiGraph, f: usize) -> Option<PViolationWitness> {
    if f == 0 {
        return None;
    }
    let i = g.nodes().find(|&i| g.in_degree(i) <= 2 * f)?;
    let partition = Partition::new(g.n(), vec![i], vec![], g.nodes().filter(|&v| v != i).collect()).ok()?;
    let fault_set = g.in_links(i).take(f).collect();
    PViolationWitness::new(g, partition, fault_set, f).ok()
}

/// Runs `probe` over `items` and returns the hit with the lowest index.
///
/// With several threads the items are split into contiguous ranges; a worker
/// stops once a lower range has reported a hit.
fn first_hit<I: Sync, T: Send>(items: &[I], threads: usize, probe: impl Fn(&I) -> Option<T> + Sync) -> Option<T> {
    let threads = threads.max(1).min(items.len().max(1));
    if threads == 1 {
        return items.iter().find_map(probe);
    }
    let chunk = items.len().div_ceil(threads);
    let best = AtomicUsize::new(usize::MAX);
    let probe = &probe;
    let best_ref = &best;
    let mut hits: Vec<(usize, T)> = std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .enumerate()
            .map(|(k, part)| {
                scope.spawn(move || {
                    for item in part {
                        if best_ref.load(Ordering::Relaxed) < k {
                            return None;
                        }
                        if let Some(hit) = probe(item) {
                            best_ref.fetch_min(k, Ordering::Relaxed);
                            return Some((k, hit));
                        }
                    }
                    None
                })
            })
            .collect();
        handles
            .into_iter()
            .filter_map(|h| h.join().expect("checker worker panicked"))
            .collect()
    });
    hits.sort_by_key(|(k, _)| *k);
    hits.into_iter().next().map(|(_, t)| t)
}

/// Searches every F with |F| <= f and every labelling of nodes with L/C/R.
///
/// Partitions are visited in base-3 counting order with node 0 as the most
/// significant digit (0 = L, 1 = C, 2 = R).
pub fn check_condition_p(g: &DiGraph, f: usize, opts: &CheckOptions) -> Result<Verdict<PViolationWitness>, ConditionError> {
    let n = g.n();
    if n > opts.max_nodes_p && !opts.allow_large {
        return Err(ConditionError::TooLarge {
            what: "node count",
            actual: n.to_string(),
            cap: opts.max_nodes_p.to_string(),
        });
    }
    if opts.indegree_prefilter && !check_min_indegree(g, f) {
        if let Some(w) = indegree_witness(g, f) {
            return Ok(Verdict::Violated(w));
        }
    }
    let base_masks = g.in_masks();
    let all: u64 = if n == 64 { u64::MAX } else { (1u64 << n) - 1 };
    let candidates: Vec<Vec<Edge>> = fault_sets(g, f).collect();

    let hit = first_hit(&candidates, opts.threads, |fs| {
        let mut masks = base_masks.clone();
        for &(j, i) in fs {
            masks[i] &= !(1u64 << j);
        }
        let mut digits = vec![0u8; n];
        loop {
            let (mut l, mut c) = (0u64, 0u64);
            for (v, &d) in digits.iter().enumerate() {
                match d {
                    0 => l |= 1 << v,
                    1 => c |= 1 << v,
                    _ => {}
                }
            }
            let r = all & !l & !c;
            let pruned = opts.symmetry_pruning && l != 0 && r != 0 && (l | r).trailing_zeros() != l.trailing_zeros();
            if l != 0 && r != 0 && !pruned && !implies_masks(&masks, c | r, l, f) && !implies_masks(&masks, l | c, r, f) {
                return Some((Partition::from_masks(l, c, r), fs.clone()));
            }
            // base-3 increment
            let mut pos = n;
            loop {
                if pos == 0 {
                    return None;
                }
                pos -= 1;
                digits[pos] += 1;
                if digits[pos] < 3 {
                    break;
                }
                digits[pos] = 0;
            }
        }
    });

    match hit {
        None => Ok(Verdict::Satisfied),
        Some((partition, fault_set)) => Ok(Verdict::Violated(PViolationWitness::new(g, partition, fault_set, f)?)),
    }
}

fn check_s_caps(g: &DiGraph, f: usize, opts: &CheckOptions) -> Result<(), ConditionError> {
    if opts.allow_large {
        return Ok(());
    }
    if g.n() > opts.max_nodes_s {
        return Err(ConditionError::TooLarge {
            what: "node count",
            actual: g.n().to_string(),
            cap: opts.max_nodes_s.to_string(),
        });
    }
    let r = count_r(g, f);
    if r > BigUint::from(opts.max_reduced_graphs) {
        return Err(ConditionError::TooLarge {
            what: "reduced graph count r",
            actual: r.to_string(),
            cap: opts.max_reduced_graphs.to_string(),
        });
    }
    Ok(())
}

/// Searches every reduced graph for one with more than one source component.
pub fn check_condition_s(g: &DiGraph, f: usize, opts: &CheckOptions) -> Result<Verdict<SViolationWitness>, ConditionError> {
    check_s_caps(g, f, opts)?;
    let candidates: Vec<Vec<Edge>> = fault_sets(g, f).collect();
    let hit = first_hit(&candidates, opts.threads, |fs| {
        let reductions = enumerate_reduced_graphs(g, fs, f).expect("fault set drawn from E within budget");
        reductions
            .for_each_masks(|masks| {
                if source_component_masks(masks).len() != 1 {
                    ControlFlow::Break(())
                } else {
                    ControlFlow::Continue(())
                }
            })
            .map(|(rg, ())| rg)
    });
    match hit {
        None => Ok(Verdict::Satisfied),
        Some(rg) => Ok(Verdict::Violated(SViolationWitness::new(g, rg)?)),
    }
}

/// Both checkers run independently; true iff their verdicts agree.
pub fn check_equivalence(g: &DiGraph, f: usize, opts: &CheckOptions) -> Result<bool, ConditionError> {
    let p = check_condition_p(g, f, opts)?.is_satisfied();
    let s = check_condition_s(g, f, opts)?.is_satisfied();
    Ok(p == s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{chain3, fig1, isolated2, k3};
    use crate::graph::reaches_all;
    use proptest::prelude::*;

    fn no_prefilter() -> CheckOptions {
        CheckOptions {
            indegree_prefilter: false,
            ..CheckOptions::default()
        }
    }

    #[test]
    fn implies_relation_examples() {
        let k4 = DiGraph::complete(4).unwrap();
        assert!(implies_relation(&k4, &[0, 1, 2], &[3], 1).unwrap());
        assert!(!implies_relation(&k4, &[0, 1, 2], &[3], 3).unwrap());
        let chain = DiGraph::new(2, [(0, 1)]).unwrap();
        assert!(implies_relation(&chain, &[0], &[1], 0).unwrap());
        assert_eq!(implies_relation(&chain, &[0], &[0, 1], 0), Err(ConditionError::InvalidSets));
        assert_eq!(implies_relation(&chain, &[], &[1], 0), Err(ConditionError::InvalidSets));
    }

    #[test]
    fn fig1_satisfies_both_conditions() {
        let g = fig1();
        assert!(check_condition_p(&g, 1, &no_prefilter()).unwrap().is_satisfied());
        assert!(check_condition_s(&g, 1, &CheckOptions::default()).unwrap().is_satisfied());
        assert!(check_min_indegree(&g, 1));
    }

    #[test]
    fn isolated_pair_violates_at_f0() {
        let g = isolated2();
        let w = check_condition_p(&g, 0, &no_prefilter()).unwrap();
        let w = w.witness().unwrap();
        assert_eq!(w.partition, Partition { l: vec![0], c: vec![], r: vec![1] });
        assert!(w.fault_set.is_empty());
        assert!(!check_condition_s(&g, 0, &CheckOptions::default()).unwrap().is_satisfied());
        assert!(check_equivalence(&g, 0, &CheckOptions::default()).unwrap());
    }

    #[test]
    fn chain_violates_s_at_f1() {
        let v = check_condition_s(&chain3(), 1, &CheckOptions::default()).unwrap();
        let w = v.witness().unwrap();
        assert!(w.sources.len() >= 2);
    }

    #[test]
    fn strongly_connected_graph_satisfies_s_at_f0() {
        let cycle = DiGraph::new(3, [(0, 1), (1, 2), (2, 0)]).unwrap();
        assert!(check_condition_s(&cycle, 0, &CheckOptions::default()).unwrap().is_satisfied());
    }

    #[test]
    fn min_indegree_examples() {
        assert!(!check_min_indegree(&k3(), 1));
        let mut edges: Vec<Edge> = fig1().edges().to_vec();
        edges.extend([(0, 5), (1, 5)]);
        let g = DiGraph::new(6, edges).unwrap();
        assert!(!check_min_indegree(&g, 1));
        let w = indegree_witness(&g, 1).unwrap();
        assert_eq!(w.partition.l, vec![5]);
    }

    #[test]
    fn prefilter_and_full_search_agree_on_k3() {
        let g = k3();
        let fast = check_condition_p(&g, 1, &CheckOptions::default()).unwrap();
        let slow = check_condition_p(&g, 1, &no_prefilter()).unwrap();
        assert!(!fast.is_satisfied() && !slow.is_satisfied());
    }

    #[test]
    fn caps_are_enforced() {
        let g = DiGraph::complete(13).unwrap();
        assert!(matches!(check_condition_p(&g, 1, &no_prefilter()), Err(ConditionError::TooLarge { .. })));
        let g = DiGraph::complete(9).unwrap();
        assert!(matches!(check_condition_s(&g, 1, &CheckOptions::default()), Err(ConditionError::TooLarge { .. })));
    }

    #[test]
    fn witness_constructor_rejects_non_violations() {
        let g = fig1();
        let part = Partition::new(5, vec![4], vec![], vec![0, 1, 2, 3]).unwrap();
        assert_eq!(PViolationWitness::new(&g, part, vec![], 1), Err(ConditionError::InvalidWitness));
    }

    #[test]
    fn threaded_search_finds_the_sequential_witness() {
        let g = DiGraph::new(5, [(0, 1), (1, 2), (2, 3), (3, 4), (4, 0), (0, 2), (2, 4)]).unwrap();
        let seq = check_condition_p(&g, 1, &no_prefilter()).unwrap();
        let par = check_condition_p(&g, 1, &CheckOptions { threads: 4, ..no_prefilter() }).unwrap();
        assert_eq!(seq, par);
        let seq = check_condition_s(&g, 1, &CheckOptions::default()).unwrap();
        let par = check_condition_s(&g, 1, &CheckOptions { threads: 3, ..CheckOptions::default() }).unwrap();
        assert_eq!(seq, par);
    }

    fn arb_graph(max_n: usize) -> impl Strategy<Value = DiGraph> {
        (2usize..=max_n).prop_flat_map(|n| {
            proptest::collection::vec(any::<bool>(), n * (n - 1)).prop_map(move |bits| {
                let pairs = (0..n).flat_map(|j| (0..n).filter(move |&i| i != j).map(move |i| (j, i)));
                let edges: Vec<Edge> = pairs.zip(bits).filter(|(_, b)| *b).map(|(e, _)| e).collect();
                DiGraph::new(n, edges).unwrap()
            })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn p_and_s_agree(g in arb_graph(6), f in 0usize..=1) {
            prop_assert!(check_equivalence(&g, f, &no_prefilter()).unwrap());
        }

        #[test]
        fn p_implies_min_indegree(g in arb_graph(6)) {
            if check_condition_p(&g, 1, &no_prefilter()).unwrap().is_satisfied() {
                prop_assert!(check_min_indegree(&g, 1));
            }
        }

        #[test]
        fn witnesses_reverify(g in arb_graph(6), f in 0usize..=1) {
            if let Verdict::Violated(w) = check_condition_p(&g, f, &no_prefilter()).unwrap() {
                prop_assert!(PViolationWitness::new(&g, w.partition.clone(), w.fault_set.clone(), f).is_ok());
            }
        }

        #[test]
        fn symmetry_pruning_keeps_verdict(g in arb_graph(6), f in 0usize..=1) {
            let plain = check_condition_p(&g, f, &no_prefilter()).unwrap().is_satisfied();
            let pruned = check_condition_p(&g, f, &CheckOptions { symmetry_pruning: true, ..no_prefilter() }).unwrap().is_satisfied();
            prop_assert_eq!(plain, pruned);
        }

        #[test]
        fn s_graphs_have_a_spreading_node(g in arb_graph(5)) {
            if check_condition_s(&g, 1, &CheckOptions::default()).unwrap().is_satisfied() {
                for fs in fault_sets(&g, 1) {
                    for rg in enumerate_reduced_graphs(&g, &fs, 1).unwrap() {
                        let h = rg.graph(&g);
                        prop_assert!(h.nodes().any(|s| reaches_all(&h, s)));
                    }
                }
            }
        }
    }
}
