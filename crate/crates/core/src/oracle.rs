//! Brute-force checks of the reward's properties on enumerable policies, and
//! the Monte-Carlo error study for the reward-subset size `M`.
//!
//! Everything here sums over the full solution space with plain products of
//! probabilities. It deliberately does not share the log-shifted code path of
//! [`crate::reward`], except for the value under test.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{
    enumerate_solutions, AnswerId, PolicyParams, QuestionId, Solution, DEFAULT_ENUMERATION_CAP,
};
use crate::reward::{empirical_cer, exact_cer};
use crate::rng::{Role, StreamKey};
use crate::scalar::Scalar;
use crate::tasks::TaskSpec;

/// Enumeration identities are certified to this absolute tolerance.
pub const IDENTITY_TOLERANCE: f64 = 1e-12;

/// One certified (in)equality. Serialized as a JSON record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremReport {
    pub name: String,
    pub instance: String,
    pub lhs: f64,
    pub rhs: f64,
    pub gap: f64,
    pub tol: f64,
    pub pass: bool,
}

impl TheoremReport {
    /// Equality: passes iff `|lhs − rhs| ≤ tol`.
    fn equality(name: &str, instance: String, lhs: f64, rhs: f64, tol: f64) -> Self {
        let gap = (lhs - rhs).abs();
        Self {
            name: name.into(),
            instance,
            lhs,
            rhs,
            gap,
            tol,
            pass: gap <= tol,
        }
    }

    /// Inequality `lhs ≥ rhs`: passes iff `lhs − rhs ≥ −tol`.
    fn at_least(name: &str, instance: String, lhs: f64, rhs: f64, tol: f64) -> Self {
        let gap = lhs - rhs;
        Self {
            name: name.into(),
            instance,
            lhs,
            rhs,
            gap,
            tol,
            pass: gap >= -tol,
        }
    }
}

/// Source of CER values for the checks. The default is [`exact_cer`]; tests
/// substitute broken implementations to see the checks catch them.
pub trait CerOracle<T: Scalar>: Sync {
    fn cer(
        &self,
        params: &PolicyParams<T>,
        q: QuestionId,
        a: AnswerId,
        a_ref: AnswerId,
    ) -> Result<T>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ExactCer;

impl<T: Scalar> CerOracle<T> for ExactCer {
    fn cer(
        &self,
        params: &PolicyParams<T>,
        q: QuestionId,
        a: AnswerId,
        a_ref: AnswerId,
    ) -> Result<T> {
        exact_cer(params, q, a, a_ref)
    }
}

/// `π(s|q)` and `π(·|s,q)` for every solution, as plain probabilities.
struct Enumerated<T> {
    solution_probs: Vec<T>,
    answer_probs: Vec<Vec<T>>,
}

fn enumerate<T: Scalar>(params: &PolicyParams<T>, q: QuestionId) -> Result<Enumerated<T>> {
    let shape = params.shape();
    let sols = enumerate_solutions(shape.vocab, shape.length, DEFAULT_ENUMERATION_CAP)?;
    let mut solution_probs = Vec::with_capacity(sols.len());
    let mut answer_probs = Vec::with_capacity(sols.len());
    for s in &sols {
        solution_probs.push(params.solution_logprob(q, s)?.exp());
        answer_probs.push(params.answer_distribution(q, s)?);
    }
    Ok(Enumerated {
        solution_probs,
        answer_probs,
    })
}

fn check_answer(params_answers: usize, a: AnswerId) -> Result<()> {
    if a.0 >= params_answers {
        return Err(Error::InputDomain(format!("answer {} out of range", a.0)));
    }
    Ok(())
}

/// `P(a | q) = Σ_s π(s|q) π(a|s,q)`.
pub fn marginal_answer_prob<T: Scalar>(
    params: &PolicyParams<T>,
    q: QuestionId,
    a: AnswerId,
) -> Result<T> {
    check_answer(params.shape().answers, a)?;
    let e = enumerate(params, q)?;
    Ok(e.solution_probs
        .iter()
        .zip(&e.answer_probs)
        .fold(T::zero(), |acc, (&ps, pa)| acc + ps * pa[a.0]))
}

/// The full marginal answer distribution `P(· | q)`.
pub fn marginal_answer_distribution<T: Scalar>(
    params: &PolicyParams<T>,
    q: QuestionId,
) -> Result<Vec<T>> {
    let e = enumerate(params, q)?;
    let mut out = vec![T::zero(); params.shape().answers];
    for (&ps, pa) in e.solution_probs.iter().zip(&e.answer_probs) {
        for (o, &p) in out.iter_mut().zip(pa) {
            *o = *o + ps * p;
        }
    }
    Ok(out)
}

fn instance(label: &str, q: QuestionId, a_ref: AnswerId) -> String {
    format!("{label} q={} a*={}", q.0, a_ref.0)
}

/// Exact-match case: `ρ(a*, a*) = E[π(a*|s)²] / E[π(a*|s)] ≥ E[π(a*|s)]`.
///
/// Returns two reports: `theorem1_identity` (the closed form agrees with the
/// CER under test) and `theorem1_inequality` (gap `ρ − E[π]`, signed).
pub fn check_theorem1<T: Scalar>(
    params: &PolicyParams<T>,
    q: QuestionId,
    a_ref: AnswerId,
    label: &str,
) -> Result<Vec<TheoremReport>> {
    check_theorem1_with(&ExactCer, params, q, a_ref, label)
}

pub fn check_theorem1_with<T: Scalar>(
    oracle: &dyn CerOracle<T>,
    params: &PolicyParams<T>,
    q: QuestionId,
    a_ref: AnswerId,
    label: &str,
) -> Result<Vec<TheoremReport>> {
    check_answer(params.shape().answers, a_ref)?;
    let e = enumerate(params, q)?;
    let mut first = 0.0f64;
    let mut second = 0.0f64;
    for (&ps, pa) in e.solution_probs.iter().zip(&e.answer_probs) {
        let x = pa[a_ref.0].as_f64();
        first += ps.as_f64() * x;
        second += ps.as_f64() * x * x;
    }
    let rho = oracle.cer(params, q, a_ref, a_ref)?.as_f64();
    let closed_form = if first > 0.0 { second / first } else { rho };
    let inst = instance(label, q, a_ref);
    Ok(vec![
        TheoremReport::equality(
            "theorem1_identity",
            inst.clone(),
            rho,
            closed_form,
            IDENTITY_TOLERANCE,
        ),
        TheoremReport::at_least("theorem1_inequality", inst, rho, first, IDENTITY_TOLERANCE),
    ])
}

/// Value equivalence for one question: `Σ_a P(a|q) ρ(a, a*) = P(a*|q)`.
pub fn check_theorem2<T: Scalar>(
    params: &PolicyParams<T>,
    q: QuestionId,
    a_ref: AnswerId,
    label: &str,
) -> Result<TheoremReport> {
    check_theorem2_with(&ExactCer, params, q, a_ref, label)
}

pub fn check_theorem2_with<T: Scalar>(
    oracle: &dyn CerOracle<T>,
    params: &PolicyParams<T>,
    q: QuestionId,
    a_ref: AnswerId,
    label: &str,
) -> Result<TheoremReport> {
    check_answer(params.shape().answers, a_ref)?;
    let marginal = marginal_answer_distribution(params, q)?;
    let mut lhs = 0.0f64;
    for (a, &pa) in marginal.iter().enumerate() {
        lhs += pa.as_f64() * oracle.cer(params, q, AnswerId(a), a_ref)?.as_f64();
    }
    Ok(TheoremReport::equality(
        "theorem2",
        instance(label, q, a_ref),
        lhs,
        marginal[a_ref.0].as_f64(),
        IDENTITY_TOLERANCE,
    ))
}

/// Value equivalence over the task distribution:
/// `Σ_q D(q) Σ_a P(a|q) ρ(a, a*(q)) = Σ_q D(q) P(a*(q)|q)`.
pub fn check_theorem2_mixture<T: Scalar>(
    params: &PolicyParams<T>,
    task: &TaskSpec,
    label: &str,
) -> Result<TheoremReport> {
    let mut lhs = 0.0;
    let mut rhs = 0.0;
    for q in 0..task.questions {
        let r = check_theorem2(params, QuestionId(q), task.reference[q], label)?;
        lhs += task.distribution[q] * r.lhs;
        rhs += task.distribution[q] * r.rhs;
    }
    Ok(TheoremReport::equality(
        "theorem2_mixture",
        format!("{label} Q={}", task.questions),
        lhs,
        rhs,
        IDENTITY_TOLERANCE,
    ))
}

/// Sweeps every `(q, a, a*)` and reports the smallest (`lhs`) and largest
/// (`rhs`) CER seen; `gap` is how far they stray outside `[0, 1]`.
pub fn check_bounds<T: Scalar>(
    params: &PolicyParams<T>,
    task: &TaskSpec,
    label: &str,
) -> Result<TheoremReport> {
    check_bounds_with(&ExactCer, params, task, label)
}

pub fn check_bounds_with<T: Scalar>(
    oracle: &dyn CerOracle<T>,
    params: &PolicyParams<T>,
    task: &TaskSpec,
    label: &str,
) -> Result<TheoremReport> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for q in 0..task.questions {
        for a in 0..task.answers {
            for a_ref in 0..task.answers {
                let v = oracle
                    .cer(params, QuestionId(q), AnswerId(a), AnswerId(a_ref))?
                    .as_f64();
                if v.is_nan() {
                    lo = f64::NAN;
                    hi = f64::NAN;
                } else {
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
        }
    }
    let gap = (-lo).max(hi - 1.0).max(0.0);
    Ok(TheoremReport {
        name: "bounds".into(),
        instance: format!("{label} Q={} A={}", task.questions, task.answers),
        lhs: lo,
        rhs: hi,
        gap,
        tol: 0.0,
        pass: gap == 0.0 && !lo.is_nan(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McRow {
    pub m: usize,
    pub mean_abs_error: f64,
    pub std_error: f64,
}

/// For each `M`, draws `trials` independent `M`-solution sets from `π(·|q)`,
/// computes the empirical CER and reports the mean absolute deviation from the
/// exact value together with its standard error.
///
/// Trial `t` at size `M` uses stream `(seed, step = M, index = t)`, so the
/// table does not depend on thread count.
pub fn mc_error_study<T: Scalar>(
    params: &PolicyParams<T>,
    q: QuestionId,
    a: AnswerId,
    a_ref: AnswerId,
    m_values: &[usize],
    trials: usize,
    seed: u64,
) -> Result<Vec<McRow>> {
    if trials < 100 {
        return Err(Error::InputDomain(format!(
            "the error study needs at least 100 trials, got {trials}"
        )));
    }
    if m_values.contains(&0) {
        return Err(Error::InputDomain("M must be positive".into()));
    }
    let exact = exact_cer(params, q, a, a_ref)?.as_f64();
    let mut rows = Vec::with_capacity(m_values.len());
    for &m in m_values {
        let errors: Vec<f64> = (0..trials)
            .into_par_iter()
            .map(|t| -> Result<f64> {
                let mut rng = StreamKey::new(seed, Role::McTrial)
                    .question(q.0 as u64)
                    .step(m as u64)
                    .index(t as u64)
                    .rng();
                let sols: Vec<Solution> = (0..m)
                    .map(|_| params.sample_solution(q, &mut rng))
                    .collect::<Result<_>>()?;
                let est = empirical_cer(params, q, a, a_ref, &sols)?;
                Ok((est.value.as_f64() - exact).abs())
            })
            .collect::<Result<_>>()?;
        let n = trials as f64;
        let mean = errors.iter().sum::<f64>() / n;
        let var = errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0);
        rows.push(McRow {
            m,
            mean_abs_error: mean,
            std_error: (var / n).sqrt(),
        });
    }
    Ok(rows)
}

/// Checks that the error column does not increase along the `M` ladder by
/// more than two combined standard errors. Returns the offending index pair
/// on failure.
pub fn errors_non_increasing(rows: &[McRow]) -> std::result::Result<(), (usize, usize)> {
    for (i, w) in rows.windows(2).enumerate() {
        let band = 2.0 * (w[0].std_error.powi(2) + w[1].std_error.powi(2)).sqrt();
        if w[1].mean_abs_error > w[0].mean_abs_error + band {
            return Err((i, i + 1));
        }
    }
    Ok(())
}
