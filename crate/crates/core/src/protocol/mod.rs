//! Synchronous simulator for the trim-and-average iteration.

mod tend;

pub use tend::{blocks_needed, compute_t_end, BlockCount, TEndError, TEndReport, EXACT_DIGITS_LIMIT};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversary::{faulty_links, Adversary, AdversaryConfig, AdversaryError, Delivery, OmniscientView};
use crate::conditions::CheckOptions;
use crate::graph::{DiGraph, Edge, NodeId};
use crate::io::{canonical_json, sha256_hex};

pub const TRACE_FORMAT: &str = "byzlink-trace";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("node {node} has {in_degree} incoming links, at least 2f = {} are needed", 2 * f)]
    InsufficientInDegree { node: NodeId, in_degree: usize, f: usize },
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Adversary(#[from] AdversaryError),
    #[error(transparent)]
    TEnd(#[from] TEndError),
    #[error("t_end ~ 10^{log10:.3} iterations exceeds max_iterations = {max}")]
    TEndTooLarge { log10: f64, max: usize },
    #[error("trace audit failed at iteration {t}: {msg}")]
    Audit { t: usize, msg: String },
}

/// Result of one node's update.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateOutcome {
    pub value: f64,
    /// Senders whose values were averaged, including the node itself.
    pub kept: Vec<NodeId>,
    /// Senders of the `f` smallest received values.
    pub low: Vec<NodeId>,
    /// Senders of the `f` largest received values.
    pub high: Vec<NodeId>,
}

/// Trim-and-average update of node `id`.
///
/// The received values are sorted by (value, sender), the `f` lowest and `f`
/// highest are discarded and the rest are averaged together with `own` using
/// the uniform weight `1 / (|received| + 1 - 2f)`. Dropped messages count as
/// `own`.
pub fn update_step(id: NodeId, own: f64, received: &[(NodeId, Delivery)], f: usize) -> Result<UpdateOutcome, ProtocolError> {
    if received.len() < 2 * f {
        return Err(ProtocolError::InsufficientInDegree {
            node: id,
            in_degree: received.len(),
            f,
        });
    }
    let mut vals: Vec<(f64, NodeId)> = received
        .iter()
        .map(|&(j, d)| match d {
            Delivery::Value(v) => (v, j),
            Delivery::Dropped => (own, j),
        })
        .collect();
    vals.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mid = &vals[f..vals.len() - f];
    let k = (mid.len() + 1) as f64;
    let shift: f64 = mid.iter().map(|&(w, _)| w - own).sum();
    let (lo, hi) = mid.iter().fold((own, own), |(lo, hi), &(w, _)| (lo.min(w), hi.max(w)));
    let value = (own + shift / k).clamp(lo, hi);

    let mut kept: Vec<NodeId> = mid.iter().map(|&(_, j)| j).chain([id]).collect();
    kept.sort_unstable();
    let mut low: Vec<NodeId> = vals[..f].iter().map(|&(_, j)| j).collect();
    low.sort_unstable();
    let mut high: Vec<NodeId> = vals[vals.len() - f..].iter().map(|&(_, j)| j).collect();
    high.sort_unstable();
    Ok(UpdateOutcome { value, kept, low, high })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum StopMode {
    /// Run exactly the t_end iterations of the convergence bound.
    PaperTEnd,
    /// Stop as soon as max - min < epsilon (or at `max_iterations`).
    Empirical,
    Fixed { iterations: usize },
}

fn default_max_iterations() -> usize {
    100_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub graph: DiGraph,
    pub f: usize,
    pub inputs: Vec<f64>,
    pub mu: f64,
    #[serde(rename = "U")]
    pub upper: f64,
    pub epsilon: f64,
    pub stop: StopMode,
    pub adversary: AdversaryConfig,
    /// Overrides the adversary seed when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
}

impl SimulationConfig {
    pub fn new(graph: DiGraph, f: usize, inputs: Vec<f64>, adversary: AdversaryConfig, stop: StopMode) -> Self {
        let mu = inputs.iter().copied().fold(f64::INFINITY, f64::min);
        let upper = inputs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        SimulationConfig {
            graph,
            f,
            inputs,
            mu,
            upper,
            epsilon: 1e-3,
            stop,
            adversary,
            seed: None,
            max_iterations: default_max_iterations(),
        }
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        let bad = |m: String| Err(ProtocolError::InvalidConfig(m));
        let n = self.graph.n();
        if self.inputs.len() != n {
            return bad(format!("{} inputs for {n} nodes", self.inputs.len()));
        }
        if !(self.mu.is_finite() && self.upper.is_finite() && self.mu <= self.upper) {
            return bad("need finite mu <= U".into());
        }
        if let Some(i) = self.inputs.iter().position(|x| !(self.mu <= *x && *x <= self.upper)) {
            return bad(format!("input {i} is outside [mu, U]"));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad("epsilon must be positive".into());
        }
        if self.adversary.f > self.f {
            return bad(format!(
                "adversary budget {} exceeds f = {}",
                self.adversary.f, self.f
            ));
        }
        for i in self.graph.nodes() {
            let d = self.graph.in_degree(i);
            if d < 2 * self.f {
                return Err(ProtocolError::InsufficientInDegree { node: i, in_degree: d, f: self.f });
            }
        }
        Ok(())
    }

    pub fn effective_adversary(&self) -> AdversaryConfig {
        let mut a = self.adversary.clone();
        if let Some(s) = self.seed {
            a.seed = s;
        }
        a
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(canonical_json(self).as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub format: String,
    pub version: String,
    pub config_hash: String,
    pub config: SimulationConfig,
    /// Exact t_end as a decimal string when the run used it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_end: Option<String>,
}

/// One synchronous round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub t: usize,
    pub v: Vec<f64>,
    /// Links whose delivery differed from the sent value, dropped ones included.
    pub faults: Vec<Edge>,
    pub dropped: Vec<Edge>,
    /// Tampered deliveries `(j, i, value)`.
    pub delivered: Vec<(NodeId, NodeId, f64)>,
    pub kept: BTreeMap<NodeId, Vec<NodeId>>,
    pub low: BTreeMap<NodeId, Vec<NodeId>>,
    pub high: BTreeMap<NodeId, Vec<NodeId>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub iterations: usize,
    pub final_spread: f64,
    /// final_spread < epsilon.
    pub converged: bool,
    /// Iterations where min decreased or max increased.
    pub validity_violations: Vec<usize>,
    pub max_faults: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionTrace {
    pub header: TraceHeader,
    pub records: Vec<IterationRecord>,
    pub summary: TraceSummary,
}

impl ExecutionTrace {
    pub fn graph(&self) -> &DiGraph {
        &self.header.config.graph
    }

    pub fn f(&self) -> usize {
        self.header.config.f
    }

    /// States after iteration `t`; `t = 0` gives the inputs.
    pub fn states(&self, t: usize) -> &[f64] {
        if t == 0 {
            &self.header.config.inputs
        } else {
            &self.records[t - 1].v
        }
    }

    /// Values node `i` used in iteration `t`, per in-neighbour, after drop substitution.
    pub fn received(&self, t: usize, i: NodeId) -> Vec<(NodeId, f64)> {
        let prev = self.states(t - 1);
        let rec = &self.records[t - 1];
        self.graph()
            .in_neighbors(i)
            .iter()
            .map(|&j| {
                if rec.dropped.contains(&(j, i)) {
                    (j, prev[i])
                } else if let Some(&(_, _, w)) = rec.delivered.iter().find(|d| d.0 == j && d.1 == i) {
                    (j, w)
                } else {
                    (j, prev[j])
                }
            })
            .collect()
    }
}

pub fn spread(v: &[f64]) -> f64 {
    let (lo, hi) = min_max(v);
    hi - lo
}

fn min_max(v: &[f64]) -> (f64, f64) {
    v.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

/// Runs the simulation described by `cfg`.
pub fn run(cfg: &SimulationConfig) -> Result<ExecutionTrace, ProtocolError> {
    cfg.validate()?;
    let g = &cfg.graph;
    let adversary = Adversary::new(cfg.effective_adversary(), g)?;

    let mut t_end_str = None;
    let horizon = match cfg.stop {
        StopMode::Fixed { iterations } => Some(iterations),
        StopMode::Empirical => None,
        StopMode::PaperTEnd => {
            let rep = compute_t_end(g, cfg.f, cfg.epsilon, cfg.upper, cfg.mu, &CheckOptions::default())?;
            let t = rep
                .t_end_exact
                .as_deref()
                .and_then(|s| s.parse::<usize>().ok())
                .filter(|&t| t <= cfg.max_iterations);
            match t {
                Some(t) => {
                    t_end_str = Some(t.to_string());
                    Some(t)
                }
                None => {
                    return Err(ProtocolError::TEndTooLarge {
                        log10: rep.log10_t_end.unwrap_or(0.0),
                        max: cfg.max_iterations,
                    })
                }
            }
        }
    };

    let mut v = cfg.inputs.clone();
    let mut records = Vec::new();
    let mut violations = Vec::new();
    let mut max_faults = 0;
    let mut t = 0;
    loop {
        let done = match horizon {
            Some(h) => t >= h,
            None => spread(&v) < cfg.epsilon || t >= cfg.max_iterations,
        };
        if done {
            break;
        }
        t += 1;
        let view = OmniscientView { graph: g, states: &v };
        let overrides = adversary.corrupt(t, &view)?;
        let faults = faulty_links(&overrides, &view);
        if faults.len() > cfg.f {
            return Err(AdversaryError::BudgetExceeded {
                t,
                size: faults.len(),
                f: cfg.f,
            }
            .into());
        }
        max_faults = max_faults.max(faults.len());

        let mut next = vec![0.0; g.n()];
        let mut kept = BTreeMap::new();
        let mut low = BTreeMap::new();
        let mut high = BTreeMap::new();
        for i in g.nodes() {
            let received: Vec<(NodeId, Delivery)> = g
                .in_neighbors(i)
                .iter()
                .map(|&j| (j, overrides.get(&(j, i)).copied().unwrap_or(Delivery::Value(v[j]))))
                .collect();
            let out = update_step(i, v[i], &received, cfg.f)?;
            next[i] = out.value;
            kept.insert(i, out.kept);
            low.insert(i, out.low);
            high.insert(i, out.high);
        }

        let (lo0, hi0) = min_max(&v);
        let (lo1, hi1) = min_max(&next);
        if lo1 < lo0 || hi1 > hi0 {
            violations.push(t);
        }
        let mut dropped = Vec::new();
        let mut delivered = Vec::new();
        for &e in &faults {
            match overrides[&e] {
                Delivery::Dropped => dropped.push(e),
                Delivery::Value(w) => delivered.push((e.0, e.1, w)),
            }
        }
        records.push(IterationRecord {
            t,
            v: next.clone(),
            faults,
            dropped,
            delivered,
            kept,
            low,
            high,
        });
        v = next;
    }

    let final_spread = spread(&v);
    Ok(ExecutionTrace {
        header: TraceHeader {
            format: TRACE_FORMAT.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config_hash: cfg.hash(),
            config: cfg.clone(),
            t_end: t_end_str,
        },
        records,
        summary: TraceSummary {
            iterations: t,
            final_spread,
            converged: final_spread < cfg.epsilon,
            validity_violations: violations,
            max_faults,
        },
    })
}

/// Re-checks a trace: state vector lengths, fault budget, consistency of the
/// recorded faults with the tampered deliveries, and the convex-hull validity
/// of every round.
pub fn audit_trace(trace: &ExecutionTrace) -> Result<(), ProtocolError> {
    let g = trace.graph();
    let f = trace.f();
    let fail = |t: usize, msg: String| Err(ProtocolError::Audit { t, msg });
    for (idx, rec) in trace.records.iter().enumerate() {
        let t = idx + 1;
        if rec.t != t {
            return fail(t, format!("record numbered {}", rec.t));
        }
        if rec.v.len() != g.n() {
            return fail(t, format!("{} states for {} nodes", rec.v.len(), g.n()));
        }
        if rec.faults.len() > f {
            return fail(t, format!("{} faulty links, budget {f}", rec.faults.len()));
        }
        let prev = trace.states(t - 1);
        let mut listed: Vec<Edge> = rec.dropped.clone();
        for &(j, i, w) in &rec.delivered {
            if w == prev[j] {
                return fail(t, format!("link ({j}, {i}) recorded as tampered but delivered the sent value"));
            }
            listed.push((j, i));
        }
        listed.sort_unstable();
        let mut faults = rec.faults.clone();
        faults.sort_unstable();
        if listed != faults {
            return fail(t, "faults do not match dropped and tampered links".into());
        }
        if let Some(e) = faults.iter().find(|e| !g.has_edge(**e)) {
            return fail(t, format!("fault on missing link ({}, {})", e.0, e.1));
        }
        let (lo0, hi0) = min_max(prev);
        let (lo1, hi1) = min_max(&rec.v);
        if lo1 < lo0 || hi1 > hi0 {
            return fail(t, "states left the previous convex hull".into());
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adversary::{AdversaryKind, ConstantParams, LinkSelection};
    use crate::fixtures;
    use proptest::prelude::*;

    fn vals(xs: &[f64]) -> Vec<(NodeId, Delivery)> {
        xs.iter().enumerate().map(|(j, &x)| (j + 1, Delivery::Value(x))).collect()
    }

    #[test]
    fn hand_traced_update() {
        let out = update_step(0, 2.0, &vals(&[0.0, 1.0, 4.0]), 1).unwrap();
        assert_eq!(out.value, 1.5);
        assert_eq!(out.kept, vec![0, 2]);
        assert_eq!(out.low, vec![1]);
        assert_eq!(out.high, vec![3]);
    }

    #[test]
    fn f0_is_plain_average() {
        let out = update_step(0, 3.0, &vals(&[0.0, 1.0, 4.0]), 0).unwrap();
        assert_eq!(out.value, 2.0);
        assert_eq!(out.kept, vec![0, 1, 2, 3]);
    }

    #[test]
    fn ties_broken_by_sender() {
        let out = update_step(9, 1.0, &[(5, Delivery::Value(0.0)), (2, Delivery::Value(0.0)), (7, Delivery::Value(3.0))], 1).unwrap();
        assert_eq!(out.low, vec![2]);
        assert_eq!(out.kept, vec![5, 9]);
    }

    #[test]
    fn dropped_counts_as_own() {
        let out = update_step(0, 2.0, &[(1, Delivery::Dropped), (2, Delivery::Value(2.0))], 0).unwrap();
        assert_eq!(out.value, 2.0);
    }

    #[test]
    fn too_few_neighbours() {
        assert!(matches!(
            update_step(0, 1.0, &vals(&[1.0]), 1),
            Err(ProtocolError::InsufficientInDegree { .. })
        ));
    }

    #[test]
    fn constant_inputs_stay_put() {
        let cfg = SimulationConfig::new(
            fixtures::fig1(),
            1,
            vec![0.3; 5],
            AdversaryConfig::none(1),
            StopMode::Fixed { iterations: 20 },
        );
        let tr = run(&cfg).unwrap();
        assert!(tr.records.iter().all(|r| r.v.iter().all(|&x| x == 0.3)));
    }

    #[test]
    fn fig1_converges_fault_free() {
        let cfg = SimulationConfig::new(
            fixtures::fig1(),
            1,
            vec![0.0, 1.0, 2.0, 3.0, 4.0],
            AdversaryConfig::none(1),
            StopMode::Empirical,
        );
        let tr = run(&cfg).unwrap();
        assert!(tr.summary.converged);
        assert!(tr.summary.validity_violations.is_empty());
        audit_trace(&tr).unwrap();
        for w in tr.records.windows(2) {
            assert!(spread(&w[1].v) <= spread(&w[0].v));
        }
    }

    #[test]
    fn replay_is_identical() {
        let mut cfg = SimulationConfig::new(
            fixtures::fig1(),
            1,
            vec![0.0, 1.0, 2.0, 3.0, 4.0],
            AdversaryConfig {
                kind: AdversaryKind::Constant(ConstantParams {
                    value: 40.0,
                    links: LinkSelection::Random,
                }),
                f: 1,
                seed: 5,
            },
            StopMode::Fixed { iterations: 30 },
        );
        cfg.seed = Some(9);
        assert_eq!(run(&cfg).unwrap(), run(&cfg).unwrap());
    }

    #[test]
    fn t_end_stop_refuses_violating_graph() {
        let cfg = SimulationConfig::new(
            fixtures::isolated2(),
            0,
            vec![0.0, 1.0],
            AdversaryConfig::none(0),
            StopMode::PaperTEnd,
        );
        assert!(matches!(run(&cfg), Err(ProtocolError::TEnd(TEndError::ConditionSViolated(_)))));
    }

    #[test]
    fn t_end_stop_too_large_for_fig1() {
        let cfg = SimulationConfig::new(
            fixtures::fig1(),
            1,
            vec![0.0, 1.0, 2.0, 3.0, 4.0],
            AdversaryConfig::none(1),
            StopMode::PaperTEnd,
        );
        assert!(matches!(run(&cfg), Err(ProtocolError::TEndTooLarge { .. })));
    }

    #[test]
    fn t_end_stop_runs_on_tiny_bound() {
        let mut cfg = SimulationConfig::new(
            fixtures::k2(),
            0,
            vec![0.0, 1.0],
            AdversaryConfig::none(0),
            StopMode::PaperTEnd,
        );
        cfg.epsilon = 1.5;
        let tr = run(&cfg).unwrap();
        let t_end: usize = tr.header.t_end.as_deref().unwrap().parse().unwrap();
        assert_eq!(t_end, 148);
        assert_eq!(tr.summary.iterations, t_end);
    }

    #[test]
    fn budget_overrun_is_an_error() {
        let g = fixtures::fig1();
        let mut cfg = SimulationConfig::new(
            g,
            1,
            vec![0.0, 1.0, 2.0, 3.0, 4.0],
            AdversaryConfig {
                kind: AdversaryKind::Constant(ConstantParams {
                    value: 9.0,
                    links: LinkSelection::RoundRobin,
                }),
                f: 2,
                seed: 0,
            },
            StopMode::Fixed { iterations: 3 },
        );
        assert!(run(&cfg).is_err());
        cfg.adversary.f = 1;
        let mut tr = run(&cfg).unwrap();
        audit_trace(&tr).unwrap();
        tr.records[1].faults.push((0, 1));
        assert!(audit_trace(&tr).is_err());
    }

    fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-100.0f64..100.0, n)
    }

    proptest! {
        #[test]
        fn update_stays_in_hull(own in -100.0f64..100.0, rec in values(6), f in 0usize..=3) {
            let out = update_step(0, own, &vals(&rec), f).unwrap();
            let lo = rec.iter().copied().fold(own, f64::min);
            let hi = rec.iter().copied().fold(own, f64::max);
            prop_assert!(lo <= out.value && out.value <= hi);
            prop_assert_eq!(out.kept.len(), rec.len() + 1 - 2 * f);
        }

        #[test]
        fn equal_values_are_a_fixed_point(c in -100.0f64..100.0, k in 0usize..8, f in 0usize..=2) {
            let rec = vec![c; k + 2 * f];
            prop_assert_eq!(update_step(0, c, &vals(&rec), f).unwrap().value, c);
        }

        #[test]
        fn affine_invariance(inputs in values(5), shift in -50.0f64..50.0, e in -3i32..4) {
            let g = fixtures::fig1();
            let scale = 2f64.powi(e);
            let run_with = |xs: Vec<f64>| {
                run(&SimulationConfig::new(g.clone(), 1, xs, AdversaryConfig::none(1), StopMode::Fixed { iterations: 15 })).unwrap()
            };
            let base = run_with(inputs.clone());
            let shifted = run_with(inputs.iter().map(|x| x + shift).collect());
            let scaled = run_with(inputs.iter().map(|x| x * scale).collect());
            for t in 0..15 {
                for i in 0..5 {
                    let b = base.records[t].v[i];
                    prop_assert!((shifted.records[t].v[i] - (b + shift)).abs() < 1e-9);
                    prop_assert_eq!(scaled.records[t].v[i], b * scale);
                }
            }
        }

        #[test]
        fn permutation_equivariance(inputs in values(5), perm in Just((0..5).collect::<Vec<usize>>()).prop_shuffle()) {
            let g = fixtures::fig1();
            let h = g.relabel(&perm).unwrap();
            let mut permuted = vec![0.0; 5];
            for i in 0..5 {
                permuted[perm[i]] = inputs[i];
            }
            let a = run(&SimulationConfig::new(g, 1, inputs, AdversaryConfig::none(1), StopMode::Fixed { iterations: 10 })).unwrap();
            let b = run(&SimulationConfig::new(h, 1, permuted, AdversaryConfig::none(1), StopMode::Fixed { iterations: 10 })).unwrap();
            for t in 0..10 {
                for i in 0..5 {
                    prop_assert!((a.records[t].v[i] - b.records[t].v[perm[i]]).abs() < 1e-9);
                }
            }
        }
    }
}
