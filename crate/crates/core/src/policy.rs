//! Tabular autoregressive policy.
//!
//! A question `q` is answered by a fixed-length solution `s` of `L` tokens drawn
//! one at a time from a prefix-conditioned softmax, followed by one answer token
//! drawn from a softmax conditioned on the full solution:
//!
//! `π(a, s | q) = π(s | q) · π(a | s, q)`.
//!
//! Each proper prefix and each complete solution owns its own logit row, so
//! the log-probability gradient of a rollout touches exactly `L + 1` rows.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{log_softmax_at, softmax, Scalar};

/// Default upper bound on `V^L` for anything that enumerates solutions.
pub const DEFAULT_ENUMERATION_CAP: usize = 4096;

/// Upper bound on `V^L` for allocating parameter tables at all.
pub const MAX_TABLE_SOLUTIONS: usize = 1 << 22;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct QuestionId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AnswerId(pub usize);

/// A complete solution: exactly `L` tokens over the solution alphabet.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Solution(Vec<TokenId>);

impl Solution {
    pub fn new(tokens: Vec<TokenId>) -> Self {
        Solution(tokens)
    }

    pub fn from_indices(tokens: &[usize]) -> Self {
        Solution(tokens.iter().map(|&t| TokenId(t)).collect())
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Table dimensions: question count, solution alphabet, solution length, answer alphabet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyShape {
    pub questions: usize,
    pub vocab: usize,
    pub length: usize,
    pub answers: usize,
}

impl PolicyShape {
    pub fn new(questions: usize, vocab: usize, length: usize, answers: usize) -> Result<Self> {
        if questions == 0 || vocab == 0 || length == 0 || answers == 0 {
            return Err(Error::InputDomain(format!(
                "all sizes must be >= 1 (Q={questions}, V={vocab}, L={length}, A={answers})"
            )));
        }
        let shape = PolicyShape {
            questions,
            vocab,
            length,
            answers,
        };
        let count = shape.solution_count_wide();
        if count > MAX_TABLE_SOLUTIONS as u128 {
            return Err(Error::EnumerationTooLarge {
                size: count,
                cap: MAX_TABLE_SOLUTIONS,
            });
        }
        Ok(shape)
    }

    fn solution_count_wide(&self) -> u128 {
        let mut n: u128 = 1;
        for _ in 0..self.length {
            n = n.saturating_mul(self.vocab as u128);
        }
        n
    }

    /// `V^L`.
    pub fn solution_count(&self) -> usize {
        self.vocab.pow(self.length as u32)
    }

    /// Number of proper prefixes, empty prefix included: `Σ_{k<L} V^k`.
    pub fn prefix_count(&self) -> usize {
        (0..self.length).map(|k| self.vocab.pow(k as u32)).sum()
    }

    pub fn check_enumerable(&self, cap: usize) -> Result<()> {
        let size = self.solution_count_wide();
        if size > cap as u128 {
            return Err(Error::EnumerationTooLarge { size, cap });
        }
        Ok(())
    }

    fn check_question(&self, q: QuestionId) -> Result<()> {
        if q.0 >= self.questions {
            return Err(Error::InputDomain(format!(
                "question {} out of range (Q={})",
                q.0, self.questions
            )));
        }
        Ok(())
    }

    fn check_answer(&self, a: AnswerId) -> Result<()> {
        if a.0 >= self.answers {
            return Err(Error::InputDomain(format!(
                "answer {} out of range (A={})",
                a.0, self.answers
            )));
        }
        Ok(())
    }

    fn check_solution(&self, s: &Solution) -> Result<()> {
        if s.len() != self.length {
            return Err(Error::InputDomain(format!(
                "solution has length {}, expected {}",
                s.len(),
                self.length
            )));
        }
        if let Some(t) = s.tokens().iter().find(|t| t.0 >= self.vocab) {
            return Err(Error::InputDomain(format!(
                "token {} out of range (V={})",
                t.0, self.vocab
            )));
        }
        Ok(())
    }
}

/// Row index of a proper prefix: the empty prefix maps to 0, and a length-`k`
/// prefix `p` maps to `Σ_{i<k} V^i + Σ_i p_i · V^(k-1-i)`.
pub fn prefix_index(prefix: &[TokenId], vocab: usize) -> Result<usize> {
    let offset: usize = (0..prefix.len()).map(|k| vocab.pow(k as u32)).sum();
    let mut positional = 0usize;
    for t in prefix {
        if t.0 >= vocab {
            return Err(Error::InputDomain(format!(
                "token {} out of range (V={vocab})",
                t.0
            )));
        }
        positional = positional * vocab + t.0;
    }
    Ok(offset + positional)
}

/// Base-`V` positional index of a complete solution, in `[0, V^L)`.
pub fn solution_index(s: &Solution, vocab: usize) -> usize {
    s.tokens().iter().fold(0, |acc, t| acc * vocab + t.0)
}

/// Inverse of [`solution_index`].
pub fn solution_from_index(mut index: usize, vocab: usize, length: usize) -> Solution {
    let mut tokens = vec![TokenId(0); length];
    for slot in tokens.iter_mut().rev() {
        *slot = TokenId(index % vocab);
        index /= vocab;
    }
    Solution(tokens)
}

/// All `V^L` solutions in [`solution_index`] order.
pub fn enumerate_solutions(vocab: usize, length: usize, cap: usize) -> Result<Vec<Solution>> {
    let mut size: u128 = 1;
    for _ in 0..length {
        size = size.saturating_mul(vocab as u128);
    }
    if size > cap as u128 {
        return Err(Error::EnumerationTooLarge { size, cap });
    }
    Ok((0..size as usize)
        .map(|i| solution_from_index(i, vocab, length))
        .collect())
}

/// Which logit table a gradient row belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Table {
    /// `solution_logits[q][prefix]`, row number `q · P + prefix_index`.
    Solution,
    /// `answer_logits[q][s]`, row number `q · V^L + solution_index`.
    Answer,
}

/// Sparse gradient over whole softmax rows, keyed by `(table, row)`.
///
/// Iteration is ordered by key, so accumulation and updates are deterministic.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LogProbGradient<T> {
    rows: BTreeMap<(Table, usize), Vec<T>>,
}

impl<T: Scalar> LogProbGradient<T> {
    pub fn new() -> Self {
        Self {
            rows: BTreeMap::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row_count(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, table: Table, row: usize) -> Option<&[T]> {
        self.rows.get(&(table, row)).map(Vec::as_slice)
    }

    pub fn rows(&self) -> impl Iterator<Item = (Table, usize, &[T])> {
        self.rows.iter().map(|(&(t, r), v)| (t, r, v.as_slice()))
    }

    /// `(table, flat index into that table, partial derivative)` triples.
    pub fn entries(&self) -> impl Iterator<Item = (Table, usize, T)> + '_ {
        self.rows.iter().flat_map(|(&(t, r), v)| {
            let width = v.len();
            v.iter()
                .enumerate()
                .map(move |(c, &g)| (t, r * width + c, g))
        })
    }

    /// Adds `(table, row)` values, summing into an existing row if present.
    pub fn add_row(&mut self, table: Table, row: usize, values: Vec<T>) {
        match self.rows.get_mut(&(table, row)) {
            Some(existing) => {
                for (e, v) in existing.iter_mut().zip(values) {
                    *e = *e + v;
                }
            }
            None => {
                self.rows.insert((table, row), values);
            }
        }
    }

    /// `self += scale · other`.
    pub fn add_scaled(&mut self, other: &Self, scale: T) {
        for (&(t, r), v) in &other.rows {
            self.add_row(t, r, v.iter().map(|&g| g * scale).collect());
        }
    }

    pub fn is_finite(&self) -> bool {
        self.rows.values().flatten().all(|g| g.is_finite())
    }
}

/// Logit tables and sampling temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams<T> {
    shape: PolicyShape,
    solution_logits: Vec<T>,
    answer_logits: Vec<T>,
    temperature: T,
}

impl<T: Scalar> PolicyParams<T> {
    /// All-zero logits at temperature 1: the uniform policy.
    pub fn zeros(shape: PolicyShape) -> Self {
        Self {
            shape,
            solution_logits: vec![T::zero(); shape.questions * shape.prefix_count() * shape.vocab],
            answer_logits: vec![
                T::zero();
                shape.questions * shape.solution_count() * shape.answers
            ],
            temperature: T::one(),
        }
    }

    /// Builds parameters from flat row-major tables (`[Q][P][V]` and `[Q][V^L][A]`).
    pub fn from_tables(
        shape: PolicyShape,
        solution_logits: Vec<T>,
        answer_logits: Vec<T>,
        temperature: T,
    ) -> Result<Self> {
        let want_sol = shape.questions * shape.prefix_count() * shape.vocab;
        let want_ans = shape.questions * shape.solution_count() * shape.answers;
        if solution_logits.len() != want_sol || answer_logits.len() != want_ans {
            return Err(Error::InputDomain(format!(
                "table sizes ({}, {}) do not match shape ({want_sol}, {want_ans})",
                solution_logits.len(),
                answer_logits.len()
            )));
        }
        if !(temperature > T::zero() && temperature.is_finite()) {
            return Err(Error::InputDomain(format!(
                "temperature must be positive and finite, got {temperature}"
            )));
        }
        if solution_logits
            .iter()
            .chain(answer_logits.iter())
            .any(|z| !z.is_finite())
        {
            return Err(Error::InputDomain("non-finite logit".into()));
        }
        Ok(Self {
            shape,
            solution_logits,
            answer_logits,
            temperature,
        })
    }

    pub fn with_temperature(mut self, temperature: T) -> Result<Self> {
        if !(temperature > T::zero() && temperature.is_finite()) {
            return Err(Error::InputDomain(format!(
                "temperature must be positive and finite, got {temperature}"
            )));
        }
        self.temperature = temperature;
        Ok(self)
    }

    pub fn shape(&self) -> PolicyShape {
        self.shape
    }

    pub fn temperature(&self) -> T {
        self.temperature
    }

    pub fn solution_logits(&self) -> &[T] {
        &self.solution_logits
    }

    pub fn answer_logits(&self) -> &[T] {
        &self.answer_logits
    }

    pub fn solution_logits_mut(&mut self) -> &mut [T] {
        &mut self.solution_logits
    }

    pub fn answer_logits_mut(&mut self) -> &mut [T] {
        &mut self.answer_logits
    }

    fn solution_row_number(&self, q: QuestionId, prefix: usize) -> usize {
        q.0 * self.shape.prefix_count() + prefix
    }

    fn answer_row_number(&self, q: QuestionId, solution: usize) -> usize {
        q.0 * self.shape.solution_count() + solution
    }

    /// Logit row for the next solution token after `prefix` (a [`prefix_index`]).
    pub fn solution_row(&self, q: QuestionId, prefix: usize) -> &[T] {
        let v = self.shape.vocab;
        let start = self.solution_row_number(q, prefix) * v;
        &self.solution_logits[start..start + v]
    }

    /// Answer logit row for the solution with index `solution`.
    pub fn answer_row(&self, q: QuestionId, solution: usize) -> &[T] {
        let a = self.shape.answers;
        let start = self.answer_row_number(q, solution) * a;
        &self.answer_logits[start..start + a]
    }

    pub fn answer_row_mut(&mut self, q: QuestionId, solution: usize) -> &mut [T] {
        let a = self.shape.answers;
        let start = self.answer_row_number(q, solution) * a;
        &mut self.answer_logits[start..start + a]
    }

    pub fn solution_row_mut(&mut self, q: QuestionId, prefix: usize) -> &mut [T] {
        let v = self.shape.vocab;
        let start = self.solution_row_number(q, prefix) * v;
        &mut self.solution_logits[start..start + v]
    }

    /// Next-token distribution after `prefix`.
    pub fn next_token_distribution(&self, q: QuestionId, prefix: &[TokenId]) -> Result<Vec<T>> {
        self.shape.check_question(q)?;
        if prefix.len() >= self.shape.length {
            return Err(Error::InputDomain(format!(
                "prefix length {} is not a proper prefix (L={})",
                prefix.len(),
                self.shape.length
            )));
        }
        let row = prefix_index(prefix, self.shape.vocab)?;
        Ok(softmax(self.solution_row(q, row), self.temperature))
    }

    /// `ln π(s | q)`, accumulated per token in log space.
    pub fn solution_logprob(&self, q: QuestionId, s: &Solution) -> Result<T> {
        self.shape.check_question(q)?;
        self.shape.check_solution(s)?;
        Ok(self.solution_logprob_unchecked(q, s))
    }

    pub(crate) fn solution_logprob_unchecked(&self, q: QuestionId, s: &Solution) -> T {
        let v = self.shape.vocab;
        let mut total = T::zero();
        let mut prefix = 0usize;
        for (k, t) in s.tokens().iter().enumerate() {
            let row = if k == 0 {
                0
            } else {
                // offset of length-k prefixes plus their positional value
                let offset: usize = (0..k).map(|i| v.pow(i as u32)).sum();
                offset + prefix
            };
            total = total + log_softmax_at(self.solution_row(q, row), self.temperature, t.0);
            prefix = prefix * v + t.0;
        }
        total
    }

    /// `π(a | s, q)`.
    pub fn answer_prob(&self, q: QuestionId, s: &Solution, a: AnswerId) -> Result<T> {
        Ok(self.answer_logprob(q, s, a)?.exp())
    }

    /// `ln π(a | s, q)`.
    pub fn answer_logprob(&self, q: QuestionId, s: &Solution, a: AnswerId) -> Result<T> {
        self.shape.check_question(q)?;
        self.shape.check_solution(s)?;
        self.shape.check_answer(a)?;
        Ok(self.answer_logprob_at(q, solution_index(s, self.shape.vocab), a))
    }

    pub(crate) fn answer_logprob_at(&self, q: QuestionId, solution: usize, a: AnswerId) -> T {
        log_softmax_at(self.answer_row(q, solution), self.temperature, a.0)
    }

    /// Full answer distribution for `(q, s)`.
    pub fn answer_distribution(&self, q: QuestionId, s: &Solution) -> Result<Vec<T>> {
        self.shape.check_question(q)?;
        self.shape.check_solution(s)?;
        Ok(softmax(
            self.answer_row(q, solution_index(s, self.shape.vocab)),
            self.temperature,
        ))
    }

    /// Draws a solution token by token from `π(· | q)`.
    pub fn sample_solution<R: Rng + ?Sized>(&self, q: QuestionId, rng: &mut R) -> Result<Solution> {
        self.shape.check_question(q)?;
        let v = self.shape.vocab;
        let mut tokens = Vec::with_capacity(self.shape.length);
        let mut offset = 0usize;
        let mut positional = 0usize;
        for k in 0..self.shape.length {
            let probs = softmax(self.solution_row(q, offset + positional), self.temperature);
            let t = sample_categorical(&probs, rng);
            tokens.push(TokenId(t));
            offset += v.pow(k as u32);
            positional = positional * v + t;
        }
        Ok(Solution(tokens))
    }

    /// Draws `(s, a)` from `π(s | q) · π(a | s, q)`.
    pub fn sample_rollout<R: Rng + ?Sized>(
        &self,
        q: QuestionId,
        rng: &mut R,
    ) -> Result<(Solution, AnswerId)> {
        let s = self.sample_solution(q, rng)?;
        let probs = softmax(
            self.answer_row(q, solution_index(&s, self.shape.vocab)),
            self.temperature,
        );
        let a = AnswerId(sample_categorical(&probs, rng));
        Ok((s, a))
    }

    /// `∇ ln π(a, s | q)` with respect to the raw logits.
    ///
    /// For a visited row with logits `z` and realized token `t` the entry for
    /// column `c` is `(1[c = t] − softmax(z / τ)_c) / τ`.
    pub fn grad_logprob_rollout(
        &self,
        q: QuestionId,
        s: &Solution,
        a: AnswerId,
    ) -> Result<LogProbGradient<T>> {
        self.shape.check_question(q)?;
        self.shape.check_solution(s)?;
        self.shape.check_answer(a)?;
        let v = self.shape.vocab;
        let tau = self.temperature;
        let row_grad = |logits: &[T], realized: usize| -> Vec<T> {
            softmax(logits, tau)
                .into_iter()
                .enumerate()
                .map(|(c, p)| {
                    let hit = if c == realized { T::one() } else { T::zero() };
                    (hit - p) / tau
                })
                .collect()
        };

        let mut grad = LogProbGradient::new();
        let mut offset = 0usize;
        let mut positional = 0usize;
        for (k, t) in s.tokens().iter().enumerate() {
            let prefix = offset + positional;
            grad.add_row(
                Table::Solution,
                self.solution_row_number(q, prefix),
                row_grad(self.solution_row(q, prefix), t.0),
            );
            offset += v.pow(k as u32);
            positional = positional * v + t.0;
        }
        let sol = solution_index(s, v);
        grad.add_row(
            Table::Answer,
            self.answer_row_number(q, sol),
            row_grad(self.answer_row(q, sol), a.0),
        );
        Ok(grad)
    }

    /// `logits += scale · grad`. Leaves `self` untouched when rejected.
    pub fn apply_update(&mut self, grad: &LogProbGradient<T>, scale: T) -> Result<()> {
        if !scale.is_finite() {
            return Err(Error::UpdateRejected(format!("non-finite scale {scale}")));
        }
        if !grad.is_finite() {
            return Err(Error::UpdateRejected("non-finite gradient entry".into()));
        }
        let sol_rows = self.shape.questions * self.shape.prefix_count();
        let ans_rows = self.shape.questions * self.shape.solution_count();
        for (table, row, values) in grad.rows() {
            let (rows, width) = match table {
                Table::Solution => (sol_rows, self.shape.vocab),
                Table::Answer => (ans_rows, self.shape.answers),
            };
            if row >= rows || values.len() != width {
                return Err(Error::UpdateRejected(format!(
                    "gradient row {table:?}/{row} (width {}) does not fit the parameter table",
                    values.len()
                )));
            }
        }
        for (table, row, values) in grad.rows() {
            let (table_data, width) = match table {
                Table::Solution => (&mut self.solution_logits, self.shape.vocab),
                Table::Answer => (&mut self.answer_logits, self.shape.answers),
            };
            for (z, &g) in table_data[row * width..(row + 1) * width]
                .iter_mut()
                .zip(values)
            {
                *z = *z + scale * g;
            }
        }
        Ok(())
    }

    /// Greedy decode: argmax token at each position, then argmax answer.
    /// Ties go to the lowest index.
    pub fn greedy_rollout(&self, q: QuestionId) -> Result<(Solution, AnswerId)> {
        self.shape.check_question(q)?;
        let v = self.shape.vocab;
        let mut tokens = Vec::with_capacity(self.shape.length);
        let mut offset = 0usize;
        let mut positional = 0usize;
        for k in 0..self.shape.length {
            let t = argmax_lowest(self.solution_row(q, offset + positional));
            tokens.push(TokenId(t));
            offset += v.pow(k as u32);
            positional = positional * v + t;
        }
        let s = Solution(tokens);
        let a = AnswerId(argmax_lowest(self.answer_row(q, solution_index(&s, v))));
        Ok((s, a))
    }

    pub fn to_checkpoint(&self) -> PolicyCheckpoint {
        PolicyCheckpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            shape: self.shape,
            temperature: self.temperature.as_f64(),
            solution_logits: self.solution_logits.iter().map(|z| z.as_f64()).collect(),
            answer_logits: self.answer_logits.iter().map(|z| z.as_f64()).collect(),
        }
    }

    pub fn from_checkpoint(ckpt: &PolicyCheckpoint) -> Result<Self> {
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Format {
                what: "checkpoint",
                detail: format!(
                    "unsupported format {:?} version {}",
                    ckpt.format, ckpt.version
                ),
            });
        }
        let shape = PolicyShape::new(
            ckpt.shape.questions,
            ckpt.shape.vocab,
            ckpt.shape.length,
            ckpt.shape.answers,
        )?;
        Self::from_tables(
            shape,
            ckpt.solution_logits.iter().map(|&z| T::of(z)).collect(),
            ckpt.answer_logits.iter().map(|&z| T::of(z)).collect(),
            T::of(ckpt.temperature),
        )
    }
}

pub const CHECKPOINT_FORMAT: &str = "cerlab-policy";
pub const CHECKPOINT_VERSION: u32 = 1;

/// On-disk policy checkpoint. Logits are stored as `f64` in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyCheckpoint {
    pub format: String,
    pub version: u32,
    pub shape: PolicyShape,
    pub temperature: f64,
    pub solution_logits: Vec<f64>,
    pub answer_logits: Vec<f64>,
}

fn argmax_lowest<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &z) in row.iter().enumerate().skip(1) {
        if z > row[best] {
            best = i;
        }
    }
    best
}

/// Inverse-CDF draw from a probability vector; falls back to the last index on
/// round-off.
pub(crate) fn sample_categorical<T: Scalar, R: Rng + ?Sized>(probs: &[T], rng: &mut R) -> usize {
    let u = T::of(rng.random::<f64>());
    let mut cum = T::zero();
    for (i, &p) in probs.iter().enumerate() {
        cum = cum + p;
        if u < cum {
            return i;
        }
    }
    probs.len() - 1
}
