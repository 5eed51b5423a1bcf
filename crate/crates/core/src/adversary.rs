//! Link adversaries: per-iteration choice of at most `f` faulty links and the
//! values they deliver.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conditions::Partition;
use crate::graph::{DiGraph, Edge, NodeId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdversaryError {
    #[error("adversary overrides {size} links in iteration {t}, budget is {f}")]
    BudgetExceeded { t: usize, size: usize, f: usize },
    #[error("invalid adversary config: {0}")]
    InvalidConfig(String),
}

/// What a receiver gets on a link.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Delivery {
    Value(f64),
    Dropped,
}

/// How the faulty links are picked each iteration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LinkSelection {
    /// `f` consecutive links of the sorted edge list, shifted by `f` each iteration.
    #[default]
    RoundRobin,
    /// `f` distinct links drawn uniformly from the seeded generator.
    Random,
    /// The same links every iteration.
    Static(Vec<Edge>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct DropParams {
    #[serde(default)]
    pub links: LinkSelection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstantParams {
    pub value: f64,
    #[serde(default)]
    pub links: LinkSelection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffsetParams {
    pub delta: f64,
    #[serde(default)]
    pub links: LinkSelection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomParams {
    pub low: f64,
    pub high: f64,
    #[serde(default)]
    pub links: LinkSelection,
}

/// Delivers `m_minus` on faulty links into L, `m_plus` on faulty links into R
/// and `(m + M) / 2` on faulty links into C.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitParams {
    pub partition: Partition,
    pub fault_set: Vec<Edge>,
    pub m: f64,
    #[serde(rename = "M")]
    pub big_m: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m_minus: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m_plus: Option<f64>,
}

impl SplitParams {
    pub fn m_minus(&self) -> f64 {
        self.m_minus.unwrap_or(self.m - 1.0)
    }

    pub fn m_plus(&self) -> f64 {
        self.m_plus.unwrap_or(self.big_m + 1.0)
    }

    /// Inputs that the split adversary keeps frozen: m on L, M on R, midpoint on C.
    pub fn frozen_inputs(&self, n: usize) -> Vec<f64> {
        let mut v = vec![(self.m + self.big_m) / 2.0; n];
        for &i in &self.partition.l {
            v[i] = self.m;
        }
        for &i in &self.partition.r {
            v[i] = self.big_m;
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum AdversaryKind {
    None,
    Drop(DropParams),
    Constant(ConstantParams),
    Offset(OffsetParams),
    Random(RandomParams),
    Split(SplitParams),
}

/// JSON form: `{"kind": ..., "f": ..., "params": {...}, "seed": ...}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversaryConfig {
    #[serde(flatten)]
    pub kind: AdversaryKind,
    pub f: usize,
    #[serde(default)]
    pub seed: u64,
}

impl AdversaryConfig {
    pub fn none(f: usize) -> Self {
        AdversaryConfig {
            kind: AdversaryKind::None,
            f,
            seed: 0,
        }
    }
}

/// Read-only snapshot of the states at the start of an iteration.
#[derive(Debug, Clone, Copy)]
pub struct OmniscientView<'a> {
    pub graph: &'a DiGraph,
    pub states: &'a [f64],
}

impl OmniscientView<'_> {
    /// Value sent on `edge`, i.e. the sender's current state.
    pub fn sent(&self, edge: Edge) -> f64 {
        self.states[edge.0]
    }
}

/// A validated adversary bound to a graph.
#[derive(Debug, Clone)]
pub struct Adversary {
    cfg: AdversaryConfig,
    edges: Vec<Edge>,
    side: Vec<Side>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Side {
    L,
    C,
    R,
}

fn finite(x: f64, what: &str) -> Result<(), AdversaryError> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(AdversaryError::InvalidConfig(format!("{what} must be finite")))
    }
}

fn check_links(g: &DiGraph, links: &[Edge], f: usize) -> Result<(), AdversaryError> {
    if links.len() > f {
        return Err(AdversaryError::InvalidConfig(format!(
            "{} static links exceed the budget f = {f}",
            links.len()
        )));
    }
    let mut seen = BTreeSet::new();
    for &e in links {
        if !g.has_edge(e) {
            return Err(AdversaryError::InvalidConfig(format!("link ({}, {}) is not in the graph", e.0, e.1)));
        }
        if !seen.insert(e) {
            return Err(AdversaryError::InvalidConfig(format!("link ({}, {}) listed twice", e.0, e.1)));
        }
    }
    Ok(())
}

impl Adversary {
    pub fn new(cfg: AdversaryConfig, g: &DiGraph) -> Result<Self, AdversaryError> {
        let mut side = vec![Side::C; g.n()];
        let selection = match &cfg.kind {
            AdversaryKind::None => None,
            AdversaryKind::Drop(p) => Some(&p.links),
            AdversaryKind::Constant(p) => {
                finite(p.value, "value")?;
                Some(&p.links)
            }
            AdversaryKind::Offset(p) => {
                finite(p.delta, "delta")?;
                Some(&p.links)
            }
            AdversaryKind::Random(p) => {
                finite(p.low, "low")?;
                finite(p.high, "high")?;
                if p.low > p.high {
                    return Err(AdversaryError::InvalidConfig("low must not exceed high".into()));
                }
                Some(&p.links)
            }
            AdversaryKind::Split(p) => {
                let part = &p.partition;
                Partition::new(g.n(), part.l.clone(), part.c.clone(), part.r.clone())
                    .map_err(|e| AdversaryError::InvalidConfig(e.to_string()))?;
                for (what, x) in [("m", p.m), ("M", p.big_m), ("m_minus", p.m_minus()), ("m_plus", p.m_plus())] {
                    finite(x, what)?;
                }
                if !(p.m_minus() < p.m && p.m < p.big_m && p.big_m < p.m_plus()) {
                    return Err(AdversaryError::InvalidConfig(
                        "split needs m_minus < m < M < m_plus".into(),
                    ));
                }
                check_links(g, &p.fault_set, cfg.f)?;
                for &i in &part.l {
                    side[i] = Side::L;
                }
                for &i in &part.r {
                    side[i] = Side::R;
                }
                None
            }
        };
        if let Some(LinkSelection::Static(links)) = selection {
            check_links(g, links, cfg.f)?;
        }
        Ok(Adversary {
            cfg,
            edges: g.edges().to_vec(),
            side,
        })
    }

    pub fn config(&self) -> &AdversaryConfig {
        &self.cfg
    }

    fn rng(&self, t: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(t as u64);
        rng
    }

    fn select(&self, links: &LinkSelection, t: usize, rng: &mut ChaCha8Rng) -> Vec<Edge> {
        let e = self.edges.len();
        let k = self.cfg.f.min(e);
        match links {
            LinkSelection::Static(links) => links.clone(),
            LinkSelection::RoundRobin => {
                let start = (t.saturating_sub(1) * k) % e.max(1);
                (0..k).map(|x| self.edges[(start + x) % e]).collect()
            }
            LinkSelection::Random => {
                let mut idx = sample(rng, e, k).into_vec();
                idx.sort_unstable();
                idx.into_iter().map(|x| self.edges[x]).collect()
            }
        }
    }

    /// Overrides for iteration `t` (1-based). Links not in the map deliver the
    /// sent value. Deterministic in (config, t, view).
    pub fn corrupt(&self, t: usize, view: &OmniscientView<'_>) -> Result<BTreeMap<Edge, Delivery>, AdversaryError> {
        let mut rng = self.rng(t);
        let mut out = BTreeMap::new();
        match &self.cfg.kind {
            AdversaryKind::None => {}
            AdversaryKind::Drop(p) => {
                for e in self.select(&p.links, t, &mut rng) {
                    out.insert(e, Delivery::Dropped);
                }
            }
            AdversaryKind::Constant(p) => {
                for e in self.select(&p.links, t, &mut rng) {
                    out.insert(e, Delivery::Value(p.value));
                }
            }
            AdversaryKind::Offset(p) => {
                for e in self.select(&p.links, t, &mut rng) {
                    out.insert(e, Delivery::Value(view.sent(e) + p.delta));
                }
            }
            AdversaryKind::Random(p) => {
                for e in self.select(&p.links, t, &mut rng) {
                    out.insert(e, Delivery::Value(rng.gen_range(p.low..=p.high)));
                }
            }
            AdversaryKind::Split(p) => {
                for &e in &p.fault_set {
                    let v = match self.side[e.1] {
                        Side::L => p.m_minus(),
                        Side::R => p.m_plus(),
                        Side::C => (p.m + p.big_m) / 2.0,
                    };
                    out.insert(e, Delivery::Value(v));
                }
            }
        }
        if out.len() > self.cfg.f {
            return Err(AdversaryError::BudgetExceeded {
                t,
                size: out.len(),
                f: self.cfg.f,
            });
        }
        Ok(out)
    }
}

/// Links whose delivery differs from the sent value, or is dropped.
pub fn faulty_links(overrides: &BTreeMap<Edge, Delivery>, view: &OmniscientView<'_>) -> Vec<Edge> {
    overrides
        .iter()
        .filter(|(&e, d)| match d {
            Delivery::Dropped => true,
            Delivery::Value(v) => *v != view.sent(e),
        })
        .map(|(&e, _)| e)
        .collect()
}

/// Value node `i` takes from link `(j, i)`: dropped messages become `i`'s own state.
pub fn received_value(overrides: &BTreeMap<Edge, Delivery>, view: &OmniscientView<'_>, j: NodeId, i: NodeId) -> f64 {
    match overrides.get(&(j, i)) {
        None => view.states[j],
        Some(Delivery::Value(v)) => *v,
        Some(Delivery::Dropped) => view.states[i],
    }
}
