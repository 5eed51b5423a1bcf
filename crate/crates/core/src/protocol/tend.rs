//! Iteration count after which the geometric bound
//! `n * max(|U|, |mu|) * (1 - beta^{rn})^{floor(t / rn)}` drops to epsilon.

use num_bigint::BigUint;
use rug::float::Round;
use rug::ops::Pow;
use rug::{Float, Integer, Rational};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conditions::{check_condition_s, CheckOptions, ConditionError, SViolationWitness, Verdict};
use crate::graph::DiGraph;
use crate::reduction::count_r;

/// Exact t_end is reported in decimal up to this many digits.
pub const EXACT_DIGITS_LIMIT: usize = 10_000;

/// Above this many bits of `1/x` only a logarithmic estimate is produced.
const EXACT_BITS_LIMIT: f64 = 8.0e6;

const GUARD_BITS: u32 = 128;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TEndError {
    #[error("epsilon must be positive and finite")]
    Epsilon,
    #[error("max(|U|, |mu|) must be positive and finite")]
    Bound,
    #[error("the graph violates the unique-source condition")]
    ConditionSViolated(Box<SViolationWitness>),
    #[error(transparent)]
    Condition(#[from] ConditionError),
}

/// Smallest `k >= 0` with `(1 - x)^k <= epsilon / scale`, where `x = base^-exponent`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockCount {
    /// `None` when only the logarithmic estimate was affordable.
    pub k: Option<Integer>,
    /// `log10 k`; `None` when `k = 0`.
    pub log10_k: Option<Float>,
}

fn ln_target(prec: u32, epsilon: f64, scale: &Float) -> Float {
    let mut lt = Float::with_val(prec, epsilon).ln();
    lt -= Float::with_val(prec, scale).ln();
    lt
}

/// Block count of the geometric bound for rate `x = base^-exponent` and target
/// `epsilon / scale`. Ties count as reached, so `x = 1/2` with target `1/2`
/// needs one block.
pub fn blocks_needed(base: &Integer, exponent: &Integer, epsilon: f64, scale: f64) -> Result<BlockCount, TEndError> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(TEndError::Epsilon);
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(TEndError::Bound);
    }
    assert!(*base >= 2 && *exponent >= 1, "rate must lie in (0, 1/2]");
    if epsilon >= scale {
        return Ok(BlockCount { k: Some(Integer::new()), log10_k: None });
    }
    let scale_f = Float::with_val(64, scale);
    let lt64 = ln_target(64, epsilon, &scale_f);
    let x_bits = exponent.to_f64() * base.to_f64().log2();
    let k_bits = x_bits + (-lt64.to_f64()).log2().max(0.0) + 2.0;

    if x_bits > EXACT_BITS_LIMIT {
        // x is far below any double; -ln(1 - x) = x (1 + O(x)).
        let prec = 256;
        let mut ln_k = Float::with_val(prec, -ln_target(prec, epsilon, &Float::with_val(prec, scale))).ln();
        ln_k += Float::with_val(prec, base).ln() * Float::with_val(prec, exponent);
        let log10_k = ln_k / Float::with_val(prec, 10).ln();
        return Ok(BlockCount { k: None, log10_k: Some(log10_k) });
    }

    let prec = k_bits.ceil() as u32 + GUARD_BITS + 64;
    let x = Rational::from((Integer::from(1), base.clone().pow(exponent.to_u32().expect("exponent fits in u32"))));
    let (k, _) = ratio_ceil(prec, &x, epsilon, scale);
    let log10_k = if k == 0 {
        None
    } else {
        Some(Float::with_val(prec, &k).log10())
    };
    Ok(BlockCount { k: Some(k), log10_k })
}

/// `ceil(ln(target) / ln(1 - x))` at working precision `prec`.
fn ratio_ceil(prec: u32, x: &Rational, epsilon: f64, scale: f64) -> (Integer, Float) {
    let lt = ln_target(prec, epsilon, &Float::with_val(prec, scale));
    let mut l1 = -Float::with_val(prec, x);
    l1.ln_1p_mut();
    let ratio = Float::with_val(prec, &lt / &l1);
    let k = ratio.clone().ceil().to_integer().expect("finite ratio");
    (k.max(Integer::new()), ratio)
}

fn biguint_to_integer(b: &BigUint) -> Integer {
    Integer::from_digits(&b.to_bytes_le(), rug::integer::Order::Lsf)
}

/// t_end and the quantities it is built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TEndReport {
    pub n: usize,
    pub f: usize,
    pub max_in_degree: usize,
    pub alpha: String,
    pub beta: String,
    pub r: String,
    pub rn: String,
    pub epsilon: f64,
    pub bound: f64,
    /// epsilon / (n * max(|U|, |mu|)).
    pub target: f64,
    /// Block count, when it has at most `EXACT_DIGITS_LIMIT` digits.
    pub k_end: Option<String>,
    /// Decimal digits of t_end, when known exactly.
    pub t_end_digits: Option<usize>,
    /// Exact t_end, when it has at most `EXACT_DIGITS_LIMIT` digits.
    pub t_end_exact: Option<String>,
    /// `None` when t_end is 0.
    pub log10_t_end: Option<f64>,
    /// log10 t_end to 30 significant digits.
    pub log10_t_end_text: Option<String>,
    #[serde(skip)]
    pub t_end: Option<Integer>,
}

/// t_end for `g` with budget `f`. Requires the unique-source condition.
pub fn compute_t_end(
    g: &DiGraph,
    f: usize,
    epsilon: f64,
    upper: f64,
    mu: f64,
    opts: &CheckOptions,
) -> Result<TEndReport, TEndError> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(TEndError::Epsilon);
    }
    let bound = upper.abs().max(mu.abs());
    if !(bound > 0.0 && bound.is_finite()) {
        return Err(TEndError::Bound);
    }
    if let Verdict::Violated(w) = check_condition_s(g, f, opts)? {
        return Err(TEndError::ConditionSViolated(Box::new(w)));
    }
    let n = g.n();
    let dmax = g.max_in_degree();
    let beta_den = Integer::from(4 * n * (dmax + 1));
    let r = biguint_to_integer(&count_r(g, f));
    let rn = Integer::from(&r * n as u64);
    let scale = n as f64 * bound;

    let blocks = blocks_needed(&beta_den, &rn, epsilon, scale)?;
    let t_end = blocks.k.as_ref().map(|k| Integer::from(k * &rn));
    let log10_t = blocks.log10_k.as_ref().map(|lk| {
        let prec = lk.prec();
        Float::with_val(prec, lk + Float::with_val(prec, &rn).log10())
    });
    let digits = t_end.as_ref().map(|t| if *t == 0 { 1 } else { t.to_string_radix(10).len() });
    Ok(TEndReport {
        n,
        f,
        max_in_degree: dmax,
        alpha: format!("1/{}", dmax + 1),
        beta: format!("1/{beta_den}"),
        r: r.to_string(),
        rn: rn.to_string(),
        epsilon,
        bound,
        target: epsilon / scale,
        k_end: blocks
            .k
            .as_ref()
            .map(|k| k.to_string())
            .filter(|k| k.len() <= EXACT_DIGITS_LIMIT),
        t_end_digits: digits,
        t_end_exact: t_end
            .as_ref()
            .filter(|_| digits.unwrap_or(usize::MAX) <= EXACT_DIGITS_LIMIT)
            .map(|t| t.to_string()),
        log10_t_end: log10_t.as_ref().map(|l| l.to_f64()),
        log10_t_end_text: log10_t.as_ref().map(|l| l.to_string_radix_round(10, Some(30), Round::Nearest)),
        t_end,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    #[test]
    fn halving_needs_one_block() {
        let b = blocks_needed(&Integer::from(2), &Integer::from(1), 0.5, 1.0).unwrap();
        assert_eq!(b.k, Some(Integer::from(1)));
    }

    #[test]
    fn target_at_least_one_needs_nothing() {
        let b = blocks_needed(&Integer::from(80), &Integer::from(5), 10.0, 10.0).unwrap();
        assert_eq!(b.k, Some(Integer::new()));
        let b = blocks_needed(&Integer::from(80), &Integer::from(5), 11.0, 10.0).unwrap();
        assert_eq!(b.k, Some(Integer::new()));
    }

    #[test]
    fn small_case_against_direct_power() {
        // x = 1/4, target 1/100: (3/4)^16 = 0.0100226, (3/4)^17 = 0.0075169.
        let b = blocks_needed(&Integer::from(4), &Integer::from(1), 0.01, 1.0).unwrap();
        assert_eq!(b.k, Some(Integer::from(17)));
    }

    #[test]
    fn rejects_bad_inputs() {
        let g = fixtures::k2();
        let o = CheckOptions::default();
        assert_eq!(compute_t_end(&g, 0, 0.0, 1.0, 0.0, &o), Err(TEndError::Epsilon));
        assert_eq!(compute_t_end(&g, 0, 0.1, 0.0, 0.0, &o), Err(TEndError::Bound));
        assert!(matches!(
            compute_t_end(&fixtures::chain3(), 1, 0.1, 1.0, 0.0, &o),
            Err(TEndError::ConditionSViolated(_))
        ));
    }

    #[test]
    fn k2_report() {
        let rep = compute_t_end(&fixtures::k2(), 0, 1.5, 1.0, 0.0, &CheckOptions::default()).unwrap();
        assert_eq!(rep.beta, "1/16");
        assert_eq!(rep.rn, "2");
        assert_eq!(rep.k_end.as_deref(), Some("74"));
        assert_eq!(rep.t_end_exact.as_deref(), Some("148"));
    }

    #[test]
    fn huge_rate_falls_back_to_logs() {
        let b = blocks_needed(&Integer::from(80), &Integer::from(10_000_000u64), 1e-3, 20.0).unwrap();
        assert!(b.k.is_none());
        let l = b.log10_k.unwrap().to_f64();
        let expect = 1e7 * 80f64.log10() + (20_000f64.ln()).log10();
        assert!((l - expect).abs() < 1e-6 * expect);
    }
}
