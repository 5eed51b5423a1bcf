//! Iterative approximate consensus under transient Byzantine link failures.
//!
//! * [`graph`], [`reduction`], [`conditions`]: decide whether a directed graph
//!   tolerates `f` faulty links per iteration.
//! * [`adversary`], [`protocol`]: simulate the trim-and-average algorithm
//!   against pluggable link adversaries.
//! * [`matrix`]: rebuild per-iteration transition matrices from a trace and
//!   check the ergodicity-based convergence argument on it.

pub mod adversary;
pub mod conditions;
pub mod fixtures;
pub mod graph;
pub mod io;
pub mod matrix;
pub mod protocol;
pub mod reduction;
