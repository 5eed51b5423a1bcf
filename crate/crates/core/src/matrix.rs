//! Transition matrices `M[t]` with `v[t] = M[t] v[t-1]` rebuilt from a trace,
//! and the ergodicity coefficients used to bound their products.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use num_bigint::BigUint;
use num_traits::ToPrimitive;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{DiGraph, NodeId};
use crate::protocol::ExecutionTrace;
use crate::reduction::{ReducedGraph, ReductionError};

pub const ROW_SUM_TOL: f64 = 1e-12;
pub const RESIDUAL_TOL: f64 = 1e-9;

/// Slack for comparing a kept faulty value with the trimmed means.
const RANGE_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatrixError {
    #[error("iteration {0} is not in the trace")]
    NoSuchIteration(usize),
    #[error("iteration {t}, row {i}: {msg}")]
    Corrupt { t: usize, i: NodeId, msg: String },
    #[error("matrix is not row stochastic (row {row})")]
    NotStochastic { row: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("{len} matrices do not split into blocks of {block}")]
    BlockLength { len: usize, block: String },
    #[error(transparent)]
    Reduction(#[from] ReductionError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Case {
    I,
    II,
    III,
}

/// How row `i` of `M[t]` was built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowMeta {
    pub case: Case,
    /// N_i^F: senders whose link into `i` was faulty.
    pub faulty: Vec<NodeId>,
    /// N_i^r: senders designated as removed.
    pub removed: Vec<NodeId>,
    pub s_g: Vec<NodeId>,
    pub l_g: Vec<NodeId>,
    /// Case I: `(k, S_k, L_k)` for every kept faulty sender.
    pub split: Vec<(NodeId, f64, f64)>,
    /// Case II: node whose weight was halved and spread over S_g and L_g.
    pub pivot: Option<NodeId>,
    pub a: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    pub t: usize,
    pub m: DMatrix<f64>,
    pub rows: Vec<RowMeta>,
}

/// beta = alpha / (4n) with alpha = 1 / (max in-degree + 1).
pub fn beta(g: &DiGraph) -> f64 {
    1.0 / (4 * g.n() * (g.max_in_degree() + 1)) as f64
}

fn mean(ids: &[NodeId], v: &[f64]) -> f64 {
    ids.iter().map(|&j| v[j]).sum::<f64>() / ids.len() as f64
}

/// Weights `(S, L)` with `S + L = 1` and `S m_s + L m_l = w`.
fn split_weights(w: f64, m_s: f64, m_l: f64) -> (f64, f64) {
    if m_l <= m_s {
        return (1.0, 0.0);
    }
    let l = ((w - m_s) / (m_l - m_s)).clamp(0.0, 1.0);
    (1.0 - l, l)
}

/// Rebuilds `M[t]` (1-based `t`) from the recorded trims and faults.
pub fn build_transition_matrix(trace: &ExecutionTrace, t: usize) -> Result<TransitionMatrix, MatrixError> {
    if t == 0 || t > trace.records.len() {
        return Err(MatrixError::NoSuchIteration(t));
    }
    let g = trace.graph();
    let f = trace.f();
    let n = g.n();
    let prev = trace.states(t - 1);
    let rec = &trace.records[t - 1];
    let mut m = DMatrix::<f64>::zeros(n, n);
    let mut rows = Vec::with_capacity(n);

    for i in g.nodes() {
        let corrupt = |msg: String| MatrixError::Corrupt { t, i, msg };
        let get = |map: &std::collections::BTreeMap<NodeId, Vec<NodeId>>| {
            map.get(&i).cloned().ok_or_else(|| corrupt("missing trim sets".into()))
        };
        let (kept, low, high) = (get(&rec.kept)?, get(&rec.low)?, get(&rec.high)?);
        let nbrs = g.in_neighbors(i);
        if low.len() != f || high.len() != f || kept.len() != nbrs.len() + 1 - 2 * f || !kept.contains(&i) {
            return Err(corrupt("trim sets have the wrong sizes".into()));
        }
        let mut all: Vec<NodeId> = kept.iter().chain(&low).chain(&high).copied().filter(|&j| j != i).collect();
        all.sort_unstable();
        if all != nbrs {
            return Err(corrupt("trim sets do not partition the in-neighbours".into()));
        }

        let received = trace.received(t, i);
        let w = |j: NodeId| received.iter().find(|r| r.0 == j).map(|r| r.1).expect("in-neighbour");
        let faulty: Vec<NodeId> = nbrs.iter().copied().filter(|&j| rec.faults.contains(&(j, i))).collect();
        let is_faulty = |j: &NodeId| faulty.contains(j);
        let s_g: Vec<NodeId> = low.iter().copied().filter(|j| !is_faulty(j)).collect();
        let l_g: Vec<NodeId> = high.iter().copied().filter(|j| !is_faulty(j)).collect();
        let kept_faulty: Vec<NodeId> = kept.iter().copied().filter(|j| is_faulty(j)).collect();
        let a = 1.0 / kept.len() as f64;
        let mut row = vec![0.0; n];
        let mut split = Vec::new();
        let mut pivot = None;

        let (case, removed) = if !s_g.is_empty() && !l_g.is_empty() {
            let m_s = mean(&s_g, prev);
            let m_l = mean(&l_g, prev);
            let tol = RANGE_TOL * (1.0 + m_s.abs().max(m_l.abs()));
            let (sum_s, sum_l) = if !kept_faulty.is_empty() {
                for &j in &kept {
                    if !is_faulty(&j) {
                        row[j] += a;
                    }
                }
                let (mut ss, mut ll) = (0.0, 0.0);
                for &k in &kept_faulty {
                    let wk = w(k);
                    if wk < m_s - tol || wk > m_l + tol {
                        return Err(corrupt(format!(
                            "kept faulty value {wk} from {k} lies outside [{m_s}, {m_l}]"
                        )));
                    }
                    let (sk, lk) = split_weights(wk, m_s, m_l);
                    assert!(sk.max(lk) >= 0.5);
                    split.push((k, sk, lk));
                    ss += sk;
                    ll += lk;
                }
                for &j in &s_g {
                    row[j] += a * ss / s_g.len() as f64;
                }
                for &j in &l_g {
                    row[j] += a * ll / l_g.len() as f64;
                }
                (ss, ll)
            } else {
                let in_range = |x: f64| m_s - tol <= x && x <= m_l + tol;
                pivot = if in_range(prev[i]) {
                    Some(i)
                } else {
                    kept.iter().copied().find(|&j| j != i)
                };
                for &j in &kept {
                    row[j] += a;
                }
                match pivot {
                    Some(z) => {
                        let (sz, lz) = split_weights(prev[z], m_s, m_l);
                        row[z] -= a / 2.0;
                        for &j in &s_g {
                            row[j] += a / 2.0 * sz / s_g.len() as f64;
                        }
                        for &j in &l_g {
                            row[j] += a / 2.0 * lz / l_g.len() as f64;
                        }
                        (sz, lz)
                    }
                    None => (1.0, 0.0),
                }
            };
            let removed = if sum_s >= sum_l { l_g.clone() } else { s_g.clone() };
            (if kept_faulty.is_empty() { Case::II } else { Case::I }, removed)
        } else {
            if !kept_faulty.is_empty() {
                return Err(corrupt("faulty kept link while a trimmed side is all faulty".into()));
            }
            for &j in &kept {
                row[j] = a;
            }
            let removed = if s_g.is_empty() { high.clone() } else { low.clone() };
            (Case::III, removed)
        };

        for (j, x) in row.into_iter().enumerate() {
            m[(i, j)] = x;
        }
        rows.push(RowMeta {
            case,
            faulty,
            removed,
            s_g,
            l_g,
            split,
            pivot,
            a,
        });
    }
    Ok(TransitionMatrix { t, m, rows })
}

pub fn build_all(trace: &ExecutionTrace) -> Result<Vec<TransitionMatrix>, MatrixError> {
    (1..=trace.records.len()).map(|t| build_transition_matrix(trace, t)).collect()
}

/// Largest `|row sum - 1|`, or infinity if some entry is negative.
pub fn stochastic_error(a: &DMatrix<f64>) -> f64 {
    if a.iter().any(|&x| x < 0.0 || !x.is_finite()) {
        return f64::INFINITY;
    }
    a.row_iter().map(|r| (r.sum() - 1.0).abs()).fold(0.0, f64::max)
}

/// `max |M[t] v[t-1] - v[t]|`.
pub fn residual(tm: &TransitionMatrix, trace: &ExecutionTrace) -> f64 {
    let prev = DVector::from_column_slice(trace.states(tm.t - 1));
    let next = DVector::from_column_slice(trace.states(tm.t));
    (&tm.m * prev - next).amax()
}

/// Pairs `(i, j)` with `j` in `{i} ∪ (N_i^- - N_i^F - N_i^r)` and `M_ij < beta`,
/// plus `(i, i)` for rows whose N_i^r exceeds `f`.
pub fn row_bound_violations(tm: &TransitionMatrix, g: &DiGraph, f: usize) -> Vec<(NodeId, NodeId)> {
    let b = beta(g);
    let mut out = Vec::new();
    for (i, meta) in tm.rows.iter().enumerate() {
        if meta.removed.len() > f {
            out.push((i, i));
            continue;
        }
        let cols = std::iter::once(i).chain(
            g.in_neighbors(i)
                .iter()
                .copied()
                .filter(|j| !meta.faulty.contains(j) && !meta.removed.contains(j)),
        );
        out.extend(cols.filter(|&j| tm.m[(i, j)] < b).map(|j| (i, j)));
    }
    out
}

pub fn verify_row_bound(tm: &TransitionMatrix, g: &DiGraph, f: usize) -> bool {
    row_bound_violations(tm, g, f).is_empty()
}

/// The reduced graph H[t] given by the recorded faults and removal sets.
pub fn reduced_graph_of(tm: &TransitionMatrix, trace: &ExecutionTrace) -> Result<ReducedGraph, MatrixError> {
    let removed = tm.rows.iter().map(|r| r.removed.clone()).collect();
    let faults = trace.records[tm.t - 1].faults.clone();
    Ok(ReducedGraph::new(trace.graph(), faults, removed, trace.f())?)
}

/// `beta * H[t] <= M[t]` entrywise, where H[t] has a unit diagonal.
pub fn dominates_reduced_graph(tm: &TransitionMatrix, trace: &ExecutionTrace) -> Result<bool, MatrixError> {
    let g = trace.graph();
    let h = reduced_graph_of(tm, trace)?.connectivity_matrix(g);
    let b = beta(g);
    Ok((0..g.n()).all(|i| (0..g.n()).all(|j| !h.get(i, j) || tm.m[(i, j)] >= b)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErgodicityReport {
    pub delta: f64,
    pub lambda: f64,
}

fn check_stochastic(a: &DMatrix<f64>) -> Result<(), MatrixError> {
    if !a.is_square() {
        return Err(MatrixError::Dimension(format!("{}x{} is not square", a.nrows(), a.ncols())));
    }
    for (row, r) in a.row_iter().enumerate() {
        if r.iter().any(|&x| !(x >= -ROW_SUM_TOL)) || (r.sum() - 1.0).abs() > 1e-9 {
            return Err(MatrixError::NotStochastic { row });
        }
    }
    Ok(())
}

/// delta(A) = max_j max_{i1,i2} |A_i1j - A_i2j|,
/// lambda(A) = 1 - min_{i1,i2} sum_j min(A_i1j, A_i2j).
///
/// For stochastic rows `1 - sum_j min(x_j, y_j) = sum_j (x_j - y_j)^+`; the
/// right-hand side is used so that identical rows give exactly 0.
pub fn ergodicity(a: &DMatrix<f64>) -> Result<ErgodicityReport, MatrixError> {
    check_stochastic(a)?;
    let n = a.nrows();
    let mut delta: f64 = 0.0;
    let mut lambda: f64 = 0.0;
    for i1 in 0..n {
        for i2 in 0..n {
            let mut s = 0.0;
            for j in 0..n {
                let d = a[(i1, j)] - a[(i2, j)];
                delta = delta.max(d.abs());
                s += d.max(0.0);
            }
            lambda = lambda.max(s);
        }
    }
    Ok(ErgodicityReport {
        delta,
        lambda: lambda.min(1.0),
    })
}

/// `ms[last] * ... * ms[0]`: the first matrix is applied first.
pub fn backward_product(ms: &[DMatrix<f64>]) -> Result<DMatrix<f64>, MatrixError> {
    let first = ms.first().ok_or_else(|| MatrixError::Dimension("empty product".into()))?;
    let n = first.nrows();
    let mut p = DMatrix::<f64>::identity(n, n);
    for a in ms {
        if a.nrows() != n || a.ncols() != n {
            return Err(MatrixError::Dimension(format!(
                "{}x{} matrix in a product of {n}x{n}",
                a.nrows(),
                a.ncols()
            )));
        }
        p = a * p;
    }
    Ok(p)
}

#[derive(Debug, Clone, PartialEq)]
pub struct QBlock {
    pub q: DMatrix<f64>,
    pub lambda: f64,
    /// 1 - beta^{rn}.
    pub bound: f64,
    pub holds: bool,
}

/// Backward products of consecutive runs of `r * n` matrices, each checked
/// against `lambda(Q) <= 1 - beta^{rn}`.
pub fn q_blocks(ms: &[DMatrix<f64>], r: &BigUint, n: usize, beta: f64) -> Result<Vec<QBlock>, MatrixError> {
    let block = (r * BigUint::from(n)).to_usize().filter(|&b| b > 0);
    let block = match block {
        Some(b) if ms.len() % b == 0 => b,
        _ => {
            return Err(MatrixError::BlockLength {
                len: ms.len(),
                block: (r * BigUint::from(n)).to_string(),
            })
        }
    };
    let bound = 1.0 - beta.powi(block as i32);
    ms.chunks(block)
        .map(|c| {
            let q = backward_product(c)?;
            let lambda = ergodicity(&q)?.lambda;
            Ok(QBlock {
                holds: lambda <= bound + ROW_SUM_TOL,
                q,
                lambda,
                bound,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpreadReport {
    pub up_to: usize,
    /// Iterations where some pair exceeded `n * delta(P) * max(|U|, |mu|)`.
    pub bound_violations: Vec<usize>,
    /// Largest `|P v[0] - v[t]|`.
    pub max_product_residual: f64,
    pub deltas: Vec<f64>,
    pub holds: bool,
}

/// Checks `|v_j[t] - v_k[t]| <= n delta(M[t]...M[1]) max(|U|, |mu|)` and
/// `v[t] = M[t]...M[1] v[0]` for `t <= up_to`.
pub fn spread_bound_check(trace: &ExecutionTrace, ms: &[TransitionMatrix], up_to: usize) -> Result<SpreadReport, MatrixError> {
    let cfg = &trace.header.config;
    let n = cfg.graph.n();
    let up_to = up_to.min(ms.len());
    let scale = n as f64 * cfg.upper.abs().max(cfg.mu.abs());
    let v0 = DVector::from_column_slice(&cfg.inputs);
    let mut p = DMatrix::<f64>::identity(n, n);
    let mut viol = Vec::new();
    let mut worst: f64 = 0.0;
    let mut deltas = Vec::new();
    for (t, tm) in ms.iter().enumerate().take(up_to).map(|(k, tm)| (k + 1, tm)) {
        if tm.t != t {
            return Err(MatrixError::NoSuchIteration(t));
        }
        p = &tm.m * p;
        let d = ergodicity(&p)?.delta;
        deltas.push(d);
        let v = trace.states(t);
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi - lo > scale * d + RESIDUAL_TOL {
            viol.push(t);
        }
        worst = worst.max((&p * &v0 - DVector::from_column_slice(v)).amax());
    }
    Ok(SpreadReport {
        up_to,
        holds: viol.is_empty() && worst < RESIDUAL_TOL,
        bound_violations: viol,
        max_product_residual: worst,
        deltas,
    })
}

/// Per-iteration checks on a trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationCheck {
    pub t: usize,
    pub residual: f64,
    pub row_sum_error: f64,
    pub row_bound: bool,
    pub dominates_reduced_graph: bool,
    pub cases: [usize; 3],
    pub delta: f64,
}

pub fn check_iteration(trace: &ExecutionTrace, tm: &TransitionMatrix) -> Result<IterationCheck, MatrixError> {
    let g = trace.graph();
    let mut cases = [0; 3];
    for r in &tm.rows {
        cases[r.case as usize] += 1;
    }
    Ok(IterationCheck {
        t: tm.t,
        residual: residual(tm, trace),
        row_sum_error: stochastic_error(&tm.m),
        row_bound: verify_row_bound(tm, g, trace.f()),
        dominates_reduced_graph: dominates_reduced_graph(tm, trace)?,
        cases,
        delta: ergodicity(&tm.m)?.delta,
    })
}

impl IterationCheck {
    pub fn passes(&self) -> bool {
        self.residual < RESIDUAL_TOL && self.row_sum_error < ROW_SUM_TOL && self.row_bound && self.dominates_reduced_graph
    }
}

/// Senders in `{i} ∪ (N_i^- - N_i^F - N_i^r)` for each row.
pub fn bounded_columns(tm: &TransitionMatrix, g: &DiGraph) -> Vec<BTreeSet<NodeId>> {
    tm.rows
        .iter()
        .enumerate()
        .map(|(i, meta)| {
            std::iter::once(i)
                .chain(
                    g.in_neighbors(i)
                        .iter()
                        .copied()
                        .filter(|j| !meta.faulty.contains(j) && !meta.removed.contains(j)),
                )
                .collect()
        })
        .collect()
}
