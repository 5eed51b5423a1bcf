//! Named graphs used throughout the tests and shipped as JSON fixtures.

use crate::graph::{DiGraph, Edge};

/// Nodes A..E = 0..4: a clique on A-D plus links B->E, C->E, D->E.
pub fn fig1() -> DiGraph {
    let mut edges: Vec<Edge> = (0..4)
        .flat_map(|j| (0..4).filter(move |&i| i != j).map(move |i| (j, i)))
        .collect();
    edges.extend([(1, 4), (2, 4), (3, 4)]);
    DiGraph::new(5, edges).expect("fig1 is a valid graph")
}

pub fn fig1_labels() -> Vec<String> {
    ["A", "B", "C", "D", "E"].map(String::from).to_vec()
}

/// 0 -> 1 -> 2
pub fn chain3() -> DiGraph {
    DiGraph::new(3, [(0, 1), (1, 2)]).expect("chain is a valid graph")
}

/// Two nodes linked in both directions.
pub fn k2() -> DiGraph {
    DiGraph::complete(2).expect("k2 is a valid graph")
}

/// Bidirectional triangle: every in-degree is 2, so it violates the
/// 2f+1 in-degree requirement at f = 1 while still admitting the trim step.
pub fn k3() -> DiGraph {
    DiGraph::complete(3).expect("k3 is a valid graph")
}

pub fn isolated2() -> DiGraph {
    DiGraph::new(2, []).expect("two isolated nodes form a valid graph")
}

/// Cliques on 0..4 and 4..8 with cross links 4->0, 5->0, 1->5, 2->6.
/// Every in-degree is at least 3, yet at f = 1 the partition L = {0..3},
/// R = {4..7} with F = {(4, 0)} leaves neither side reaching the other.
pub fn two_cliques() -> DiGraph {
    let clique = |base: usize| {
        (base..base + 4).flat_map(move |j| (base..base + 4).filter(move |&i| i != j).map(move |i| (j, i)))
    };
    let edges: Vec<Edge> = clique(0).chain(clique(4)).chain([(4, 0), (5, 0), (1, 5), (2, 6)]).collect();
    DiGraph::new(8, edges).expect("two cliques form a valid graph")
}
