//! Conditional expectation reward.
//!
//! For a generated answer `a` and reference `a*`,
//!
//! ```text
//! ρ(a, a*) = Σ_s π(s|q) π(a|s,q) π(a*|s,q) / Σ_s π(s|q) π(a|s,q)
//! ```
//!
//! i.e. the expected probability of regenerating `a*` under the posterior over
//! solutions given that `a` was produced. [`exact_cer`] evaluates the sums by
//! enumeration; [`empirical_cer`] replaces them with sampled solutions, which
//! turns the `π(s|q)` factor into the sampling law:
//!
//! ```text
//! R = Σ_j w_j P_j / Σ_j w_j,   w_j = π(a|s_j,q),  P_j = π(a*|s_j,q).
//! ```
//!
//! All ratios are computed from log-weights shifted by their maximum, which
//! cancels in the ratio and keeps the largest weight at exactly 1.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{
    enumerate_solutions, solution_index, AnswerId, PolicyParams, QuestionId, Solution,
    DEFAULT_ENUMERATION_CAP,
};
use crate::scalar::{fmt17, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    ExactMatch,
    CerExact,
    CerEmpirical,
    Combined,
}

impl std::str::FromStr for RewardKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact_match" => Ok(RewardKind::ExactMatch),
            "cer_exact" => Ok(RewardKind::CerExact),
            "cer_empirical" => Ok(RewardKind::CerEmpirical),
            "combined" => Ok(RewardKind::Combined),
            other => Err(Error::Config(format!("unknown reward kind {other:?}"))),
        }
    }
}

/// A rollout together with its question and reference answer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Quadruple {
    pub question: QuestionId,
    pub solution: Solution,
    pub answer: AnswerId,
    pub reference: AnswerId,
}

/// Result of a self-normalized ratio.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CerEstimate<T> {
    pub value: T,
    /// Every weight vanished (all log-weights `-inf`); `value` is then 0.
    pub degenerate: bool,
}

/// `Σ_j exp(lw_j − max) P_j / Σ_j exp(lw_j − max)`, summed left to right.
fn shifted_ratio<T: Scalar>(log_weights: &[T], p: &[T]) -> CerEstimate<T> {
    let max = log_weights.iter().copied().fold(T::neg_infinity(), T::max);
    if !max.is_finite() {
        return CerEstimate {
            value: T::zero(),
            degenerate: true,
        };
    }
    let mut num = T::zero();
    let mut den = T::zero();
    for (&lw, &pj) in log_weights.iter().zip(p) {
        let w = (lw - max).exp();
        num = num + w * pj;
        den = den + w;
    }
    CerEstimate {
        value: num / den,
        degenerate: false,
    }
}

pub fn exact_match_reward<T: Scalar>(a: AnswerId, a_ref: AnswerId) -> T {
    if a == a_ref {
        T::one()
    } else {
        T::zero()
    }
}

/// `ln π(s|q)` for every solution, in solution-index order.
pub fn solution_logprob_table<T: Scalar>(
    params: &PolicyParams<T>,
    q: QuestionId,
    cap: usize,
) -> Result<Vec<T>> {
    let shape = params.shape();
    if q.0 >= shape.questions {
        return Err(Error::InputDomain(format!("question {} out of range", q.0)));
    }
    Ok(enumerate_solutions(shape.vocab, shape.length, cap)?
        .iter()
        .map(|s| params.solution_logprob_unchecked(q, s))
        .collect())
}

/// CER by full enumeration of the solution space.
pub fn exact_cer<T: Scalar>(
    params: &PolicyParams<T>,
    q: QuestionId,
    a: AnswerId,
    a_ref: AnswerId,
) -> Result<T> {
    exact_cer_capped(params, q, a, a_ref, DEFAULT_ENUMERATION_CAP)
}

pub fn exact_cer_capped<T: Scalar>(
    params: &PolicyParams<T>,
    q: QuestionId,
    a: AnswerId,
    a_ref: AnswerId,
    cap: usize,
) -> Result<T> {
    let table = solution_logprob_table(params, q, cap)?;
    exact_cer_with_table(params, q, a, a_ref, &table)
}

/// [`exact_cer`] reusing a precomputed [`solution_logprob_table`].
pub fn exact_cer_with_table<T: Scalar>(
    params: &PolicyParams<T>,
    q: QuestionId,
    a: AnswerId,
    a_ref: AnswerId,
    solution_logprobs: &[T],
) -> Result<T> {
    let shape = params.shape();
    for x in [a, a_ref] {
        if x.0 >= shape.answers {
            return Err(Error::InputDomain(format!("answer {} out of range", x.0)));
        }
    }
    let log_w: Vec<T> = solution_logprobs
        .iter()
        .enumerate()
        .map(|(s, &lp)| lp + params.answer_logprob_at(q, s, a))
        .collect();
    let p: Vec<T> = (0..solution_logprobs.len())
        .map(|s| params.answer_logprob_at(q, s, a_ref).exp())
        .collect();
    Ok(shifted_ratio(&log_w, &p).value)
}

/// Monte-Carlo CER over the given solutions (assumed drawn from `π(·|q)`).
pub fn empirical_cer<T: Scalar>(
    params: &PolicyParams<T>,
    q: QuestionId,
    a: AnswerId,
    a_ref: AnswerId,
    solutions: &[Solution],
) -> Result<CerEstimate<T>> {
    if solutions.is_empty() {
        return Err(Error::InputDomain(
            "empirical CER needs at least one solution".into(),
        ));
    }
    let mut log_w = Vec::with_capacity(solutions.len());
    let mut p = Vec::with_capacity(solutions.len());
    for s in solutions {
        log_w.push(params.answer_logprob(q, s, a)?);
        p.push(params.answer_logprob(q, s, a_ref)?.exp());
    }
    Ok(shifted_ratio(&log_w, &p))
}

/// Per-question reward matrices for one group of rollouts.
///
/// `w[i][j] = π(a_i | s_j, q)`, `p[j] = π(a* | s_j, q)`, `d[i] = Σ_j w[i][j]`,
/// and `r = D⁻¹ W P`. `normalized` holds the rows of `D⁻¹ W`, computed from
/// shifted log-weights so they stay well defined when `d[i]` underflows.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardBatch<T> {
    pub question: QuestionId,
    pub reference: AnswerId,
    pub answers: Vec<AnswerId>,
    /// Indices into the solution pool, ascending; shared by every row.
    pub subset: Vec<usize>,
    pub w: Vec<Vec<T>>,
    pub p: Vec<T>,
    pub d: Vec<T>,
    pub r: Vec<T>,
    pub normalized: Vec<Vec<T>>,
    pub degenerate_rows: Vec<usize>,
}

#[derive(Debug, Clone)]
struct RowResult<T> {
    w: Vec<T>,
    d: T,
    normalized: Vec<T>,
    estimate: CerEstimate<T>,
}

fn compute_row<T: Scalar>(
    params: &PolicyParams<T>,
    q: QuestionId,
    a: AnswerId,
    subset_indices: &[usize],
    p: &[T],
) -> RowResult<T> {
    let log_w: Vec<T> = subset_indices
        .iter()
        .map(|&s| params.answer_logprob_at(q, s, a))
        .collect();
    let w: Vec<T> = log_w.iter().map(|lw| lw.exp()).collect();
    let d = w.iter().fold(T::zero(), |acc, &x| acc + x);
    let estimate = shifted_ratio(&log_w, p);
    let normalized = if estimate.degenerate {
        vec![T::zero(); w.len()]
    } else {
        let max = log_w.iter().copied().fold(T::neg_infinity(), T::max);
        let shifted: Vec<T> = log_w.iter().map(|&lw| (lw - max).exp()).collect();
        let total = shifted.iter().fold(T::zero(), |acc, &x| acc + x);
        shifted.into_iter().map(|x| x / total).collect()
    };
    RowResult {
        w,
        d,
        normalized,
        estimate,
    }
}

/// Picks `m` of `n` pool indices uniformly without replacement, sorted
/// ascending. `m == n` takes the whole pool in order without touching `rng`.
pub fn draw_subset<R: Rng + ?Sized>(n: usize, m: usize, rng: &mut R) -> Result<Vec<usize>> {
    if m == 0 || m > n {
        return Err(Error::InputDomain(format!(
            "subset size M={m} must satisfy 1 <= M <= N={n}"
        )));
    }
    if m == n {
        return Ok((0..n).collect());
    }
    let mut idx = rand::seq::index::sample(rng, n, m).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Tensorized CER for a group of rollouts, reusing the rollouts' own
/// solutions as the reference sample.
pub fn batch_cer<T: Scalar, R: Rng + ?Sized>(
    params: &PolicyParams<T>,
    q: QuestionId,
    rollouts: &[(Solution, AnswerId)],
    a_ref: AnswerId,
    m: usize,
    dedup: bool,
    rng: &mut R,
) -> Result<RewardBatch<T>> {
    let answers: Vec<AnswerId> = rollouts.iter().map(|(_, a)| *a).collect();
    let pool: Vec<Solution> = rollouts.iter().map(|(s, _)| s.clone()).collect();
    batch_cer_with_pool(params, q, &answers, &pool, a_ref, m, dedup, rng)
}

/// Tensorized CER scoring `answers` against an arbitrary solution pool (for
/// instance freshly sampled solutions instead of the rollouts themselves).
#[allow(clippy::too_many_arguments)]
pub fn batch_cer_with_pool<T: Scalar, R: Rng + ?Sized>(
    params: &PolicyParams<T>,
    q: QuestionId,
    answers: &[AnswerId],
    pool: &[Solution],
    a_ref: AnswerId,
    m: usize,
    dedup: bool,
    rng: &mut R,
) -> Result<RewardBatch<T>> {
    let shape = params.shape();
    if q.0 >= shape.questions {
        return Err(Error::InputDomain(format!("question {} out of range", q.0)));
    }
    if let Some(a) = answers
        .iter()
        .chain([&a_ref])
        .find(|a| a.0 >= shape.answers)
    {
        return Err(Error::InputDomain(format!("answer {} out of range", a.0)));
    }
    for s in pool {
        params.solution_logprob(q, s)?;
    }
    let subset = draw_subset(pool.len(), m, rng)?;
    let subset_indices: Vec<usize> = subset
        .iter()
        .map(|&j| solution_index(&pool[j], shape.vocab))
        .collect();
    let p: Vec<T> = subset_indices
        .iter()
        .map(|&s| params.answer_logprob_at(q, s, a_ref).exp())
        .collect();

    let mut cache: BTreeMap<AnswerId, RowResult<T>> = BTreeMap::new();
    let mut rows = Vec::with_capacity(answers.len());
    for &a in answers {
        let row = if dedup {
            cache
                .entry(a)
                .or_insert_with(|| compute_row(params, q, a, &subset_indices, &p))
                .clone()
        } else {
            compute_row(params, q, a, &subset_indices, &p)
        };
        rows.push(row);
    }

    let degenerate_rows = rows
        .iter()
        .enumerate()
        .filter(|(_, r)| r.estimate.degenerate)
        .map(|(i, _)| i)
        .collect();
    let mut batch = RewardBatch {
        question: q,
        reference: a_ref,
        answers: answers.to_vec(),
        subset,
        w: Vec::with_capacity(rows.len()),
        p,
        d: Vec::with_capacity(rows.len()),
        r: Vec::with_capacity(rows.len()),
        normalized: Vec::with_capacity(rows.len()),
        degenerate_rows,
    };
    for row in rows {
        batch.w.push(row.w);
        batch.d.push(row.d);
        batch.r.push(row.estimate.value);
        batch.normalized.push(row.normalized);
    }
    Ok(batch)
}

/// `(exact_match + R) / 2` per row.
pub fn combined_from_batch<T: Scalar>(batch: &RewardBatch<T>) -> Vec<T> {
    let two = T::of(2.0);
    batch
        .answers
        .iter()
        .zip(&batch.r)
        .map(|(&a, &r)| (exact_match_reward::<T>(a, batch.reference) + r) / two)
        .collect()
}

/// Rule-plus-CER reward with exact match as the rule.
pub fn combined_reward<T: Scalar, R: Rng + ?Sized>(
    params: &PolicyParams<T>,
    q: QuestionId,
    rollouts: &[(Solution, AnswerId)],
    a_ref: AnswerId,
    m: usize,
    rng: &mut R,
) -> Result<Vec<T>> {
    let batch = batch_cer(params, q, rollouts, a_ref, m, true, rng)?;
    Ok(combined_from_batch(&batch))
}

/// CSV view of a batch: one row per rollout with its answer label, reward and
/// row of `D⁻¹W`, followed by a row carrying `P`.
///
/// Header: `answer_label,R,w_1,...,w_M,P_row`. The `P_row` column is `0` on
/// rollout rows and `1` on the final row, whose label is `P`, whose `R` cell is
/// empty and whose `w_j` cells hold `P_j`.
pub fn explain_batch<T: Scalar>(batch: &RewardBatch<T>) -> String {
    let m = batch.p.len();
    let mut out = String::from("answer_label,R");
    for j in 1..=m {
        let _ = write!(out, ",w_{j}");
    }
    out.push_str(",P_row\n");
    for (i, a) in batch.answers.iter().enumerate() {
        let _ = write!(out, "a{},{}", a.0, fmt17(batch.r[i]));
        for &x in &batch.normalized[i] {
            let _ = write!(out, ",{}", fmt17(x));
        }
        out.push_str(",0\n");
    }
    out.push_str("P,");
    for &x in &batch.p {
        let _ = write!(out, ",{}", fmt17(x));
    }
    out.push_str(",1\n");
    out
}
