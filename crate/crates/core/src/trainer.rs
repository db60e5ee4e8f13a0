//! RLOO policy-gradient training.
//!
//! Each step draws `batch_size` questions, samples `N` rollouts per question,
//! scores them with the configured reward, and ascends
//!
//! `Σ_groups Σ_i A_i ∇ ln π(a_i, s_i | q) / (batch_size · N)`
//!
//! where `A_i` is the leave-one-out advantage. Rewards enter only as scalars.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::DEFAULT_ENUMERATION_CAP;
use crate::policy::{AnswerId, LogProbGradient, PolicyParams, QuestionId, Solution};
use crate::reward::{
    batch_cer, batch_cer_with_pool, combined_from_batch, exact_cer_with_table, exact_match_reward,
    solution_logprob_table, RewardBatch, RewardKind,
};
use crate::rng::{Role, StreamKey};
use crate::scalar::{fmt17, Scalar};
use crate::tasks::TaskSpec;

/// Which solutions the empirical CER is estimated from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceSamples {
    /// The `N` rollouts being scored.
    #[default]
    Reuse,
    /// `N` extra solutions drawn independently for scoring.
    Fresh,
}

/// How questions are drawn for each batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum QuestionOrder {
    /// Independent draws from the task distribution.
    #[default]
    Sampled,
    /// Consecutive passes over a fresh permutation of all questions.
    Epochs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum EvalMode {
    Greedy,
    Sampled { k: usize },
}

impl Default for EvalMode {
    fn default() -> Self {
        EvalMode::Sampled { k: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// `N`, rollouts per question.
    pub rollouts: usize,
    /// `M`, solutions used to estimate each CER reward.
    pub subset: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub reward: RewardKind,
    pub seed: u64,
    /// Evaluate pass@1 every this many steps; 0 disables evaluation.
    pub eval_every: usize,
    pub eval_mode: EvalMode,
    pub reference_samples: ReferenceSamples,
    pub dedup: bool,
    pub question_order: QuestionOrder,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            rollouts: 16,
            subset: 16,
            learning_rate: 0.5,
            steps: 500,
            reward: RewardKind::ExactMatch,
            seed: 0,
            eval_every: 50,
            eval_mode: EvalMode::default(),
            reference_samples: ReferenceSamples::Reuse,
            dedup: true,
            question_order: QuestionOrder::Sampled,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rollouts < 2 {
            return Err(Error::Config(format!(
                "leave-one-out needs N >= 2 rollouts, got {}",
                self.rollouts
            )));
        }
        if self.subset == 0 || self.subset > self.rollouts {
            return Err(Error::Config(format!(
                "subset size M={} must satisfy 1 <= M <= N={}",
                self.subset, self.rollouts
            )));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if let EvalMode::Sampled { k: 0 } = self.eval_mode {
            return Err(Error::Config("sampled evaluation needs k >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub mean_reward: f64,
    pub mean_abs_advantage: f64,
    pub pass1: Option<f64>,
    pub degenerate_rows: usize,
    pub millis: f64,
}

/// Leave-one-out advantages `A_i = R_i − mean_{k≠i} R_k`.
///
/// Evaluated as `Σ_{k≠i} (R_i − R_k) / (N − 1)`, so any shift of the rewards
/// that is exact in floating point leaves the result bit-identical.
pub fn rloo_advantages<T: Scalar>(rewards: &[T]) -> Result<Vec<T>> {
    let n = rewards.len();
    if n < 2 {
        return Err(Error::Config(format!(
            "leave-one-out needs at least 2 rewards, got {n}"
        )));
    }
    let peers = T::of_usize(n - 1);
    Ok(rewards
        .iter()
        .enumerate()
        .map(|(i, &ri)| {
            let total = rewards
                .iter()
                .enumerate()
                .filter(|&(k, _)| k != i)
                .fold(T::zero(), |acc, (_, &rk)| acc + (ri - rk));
            total / peers
        })
        .collect())
}

/// Rewards for one group of rollouts.
#[derive(Debug, Clone)]
pub struct GroupRewards<T> {
    pub rewards: Vec<T>,
    pub batch: Option<RewardBatch<T>>,
}

impl<T> GroupRewards<T> {
    pub fn degenerate_rows(&self) -> usize {
        self.batch.as_ref().map_or(0, |b| b.degenerate_rows.len())
    }
}

/// Scores a group of rollouts for question `q` with the configured reward.
/// `stream` keys the subset draw and any fresh solutions.
pub fn score_group<T: Scalar>(
    params: &PolicyParams<T>,
    q: QuestionId,
    a_ref: AnswerId,
    rollouts: &[(Solution, AnswerId)],
    config: &TrainConfig,
    stream: StreamKey,
) -> Result<GroupRewards<T>> {
    let empirical = |params: &PolicyParams<T>| -> Result<RewardBatch<T>> {
        let mut subset_rng = StreamKey {
            role: Role::RewardSubset,
            ..stream
        }
        .rng();
        match config.reference_samples {
            ReferenceSamples::Reuse => batch_cer(
                params,
                q,
                rollouts,
                a_ref,
                config.subset,
                config.dedup,
                &mut subset_rng,
            ),
            ReferenceSamples::Fresh => {
                let mut fresh_rng = StreamKey {
                    role: Role::FreshSolutions,
                    ..stream
                }
                .rng();
                let pool: Vec<Solution> = (0..rollouts.len())
                    .map(|_| params.sample_solution(q, &mut fresh_rng))
                    .collect::<Result<_>>()?;
                let answers: Vec<AnswerId> = rollouts.iter().map(|(_, a)| *a).collect();
                batch_cer_with_pool(
                    params,
                    q,
                    &answers,
                    &pool,
                    a_ref,
                    config.subset,
                    config.dedup,
                    &mut subset_rng,
                )
            }
        }
    };
    match config.reward {
        RewardKind::ExactMatch => Ok(GroupRewards {
            rewards: rollouts
                .iter()
                .map(|(_, a)| exact_match_reward(*a, a_ref))
                .collect(),
            batch: None,
        }),
        RewardKind::CerExact => {
            let table = solution_logprob_table(params, q, DEFAULT_ENUMERATION_CAP)?;
            let mut cache = BTreeMap::new();
            let mut rewards = Vec::with_capacity(rollouts.len());
            for (_, a) in rollouts {
                let r = match cache.get(a) {
                    Some(&r) => r,
                    None => {
                        let r = exact_cer_with_table(params, q, *a, a_ref, &table)?;
                        cache.insert(*a, r);
                        r
                    }
                };
                rewards.push(r);
            }
            Ok(GroupRewards {
                rewards,
                batch: None,
            })
        }
        RewardKind::CerEmpirical => {
            let batch = empirical(params)?;
            Ok(GroupRewards {
                rewards: batch.r.clone(),
                batch: Some(batch),
            })
        }
        RewardKind::Combined => {
            let batch = empirical(params)?;
            Ok(GroupRewards {
                rewards: combined_from_batch(&batch),
                batch: Some(batch),
            })
        }
    }
}

/// `Σ_i A_i ∇ ln π(a_i, s_i | q)` for one group, with RLOO advantages of
/// `rewards`. Rewards are plain numbers here; nothing differentiates them.
pub fn group_gradient<T: Scalar>(
    params: &PolicyParams<T>,
    q: QuestionId,
    rollouts: &[(Solution, AnswerId)],
    rewards: &[T],
) -> Result<LogProbGradient<T>> {
    let advantages = rloo_advantages(rewards)?;
    advantage_gradient(params, q, rollouts, &advantages)
}

fn advantage_gradient<T: Scalar>(
    params: &PolicyParams<T>,
    q: QuestionId,
    rollouts: &[(Solution, AnswerId)],
    advantages: &[T],
) -> Result<LogProbGradient<T>> {
    let mut gradient = LogProbGradient::new();
    for ((s, a), &adv) in rollouts.iter().zip(advantages) {
        gradient.add_scaled(&params.grad_logprob_rollout(q, s, *a)?, adv);
    }
    Ok(gradient)
}

/// Questions for each batch slot of `step`.
pub fn draw_questions(task: &TaskSpec, config: &TrainConfig, step: usize) -> Vec<QuestionId> {
    match config.question_order {
        QuestionOrder::Sampled => {
            let mut rng = StreamKey::new(config.seed, Role::QuestionDraw)
                .step(step as u64)
                .rng();
            (0..config.batch_size)
                .map(|_| task.sample_question(&mut rng))
                .collect()
        }
        QuestionOrder::Epochs => (0..config.batch_size)
            .map(|slot| {
                let position = step * config.batch_size + slot;
                let epoch = position / task.questions;
                let mut order: Vec<usize> = (0..task.questions).collect();
                order.shuffle(
                    &mut StreamKey::new(config.seed, Role::QuestionDraw)
                        .index(epoch as u64 + 1)
                        .rng(),
                );
                QuestionId(order[position % task.questions])
            })
            .collect(),
    }
}

struct SlotOutcome<T> {
    rewards: Vec<T>,
    advantages: Vec<T>,
    gradient: LogProbGradient<T>,
    degenerate: usize,
}

fn run_slot<T: Scalar>(
    params: &PolicyParams<T>,
    task: &TaskSpec,
    config: &TrainConfig,
    step: usize,
    slot: usize,
    q: QuestionId,
) -> Result<SlotOutcome<T>> {
    let stream = StreamKey::new(config.seed, Role::Rollouts)
        .step(step as u64)
        .question(q.0 as u64)
        .index(slot as u64);
    let mut rng = stream.rng();
    let rollouts: Vec<(Solution, AnswerId)> = (0..config.rollouts)
        .map(|_| params.sample_rollout(q, &mut rng))
        .collect::<Result<_>>()?;
    let scored = score_group(params, q, task.reference(q), &rollouts, config, stream)?;
    let advantages = rloo_advantages(&scored.rewards)?;
    let gradient = advantage_gradient(params, q, &rollouts, &advantages)?;
    Ok(SlotOutcome {
        degenerate: scored.degenerate_rows(),
        rewards: scored.rewards,
        advantages,
        gradient,
    })
}

/// One RLOO step. Groups are computed in parallel over the shared snapshot;
/// their gradients are summed in slot order, then applied in one update.
pub fn train_step<T: Scalar>(
    params: &PolicyParams<T>,
    task: &TaskSpec,
    config: &TrainConfig,
    step: usize,
) -> Result<(PolicyParams<T>, StepMetrics)> {
    config.validate()?;
    if params.shape() != task.shape() {
        return Err(Error::Config("policy shape does not match the task".into()));
    }
    let start = Instant::now();
    let questions = draw_questions(task, config, step);
    let outcomes: Vec<SlotOutcome<T>> = questions
        .par_iter()
        .enumerate()
        .map(|(slot, &q)| run_slot(params, task, config, step, slot, q))
        .collect::<Result<_>>()?;

    let norm = T::one() / T::of_usize(config.batch_size * config.rollouts);
    let mut total = LogProbGradient::new();
    let mut reward_sum = 0.0;
    let mut adv_sum = 0.0;
    let mut degenerate = 0;
    for o in &outcomes {
        total.add_scaled(&o.gradient, norm);
        reward_sum += o.rewards.iter().map(|r| r.as_f64()).sum::<f64>();
        adv_sum += o.advantages.iter().map(|a| a.as_f64().abs()).sum::<f64>();
        degenerate += o.degenerate;
    }
    if !total.is_finite() {
        return Err(Error::TrainingAborted(format!(
            "non-finite gradient at step {step}"
        )));
    }
    let mut updated = params.clone();
    updated.apply_update(&total, T::of(config.learning_rate))?;

    let count = (config.batch_size * config.rollouts) as f64;
    Ok((
        updated,
        StepMetrics {
            step,
            mean_reward: reward_sum / count,
            mean_abs_advantage: adv_sum / count,
            pass1: None,
            degenerate_rows: degenerate,
            millis: start.elapsed().as_secs_f64() * 1e3,
        },
    ))
}

/// pass@1 by exact match against the reference answer, averaged over questions.
///
/// Greedy decoding breaks ties toward the lowest index. Sampled mode averages
/// `k` rollouts per question drawn from stream `(seed, Evaluation, step)`.
pub fn evaluate_pass1<T: Scalar>(
    params: &PolicyParams<T>,
    task: &TaskSpec,
    mode: EvalMode,
    seed: u64,
    step: usize,
) -> Result<f64> {
    let per_question: Vec<f64> = (0..task.questions)
        .into_par_iter()
        .map(|q| -> Result<f64> {
            let q = QuestionId(q);
            let a_ref = task.reference(q);
            match mode {
                EvalMode::Greedy => {
                    let (_, a) = params.greedy_rollout(q)?;
                    Ok(if a == a_ref { 1.0 } else { 0.0 })
                }
                EvalMode::Sampled { k } => {
                    let mut rng = StreamKey::new(seed, Role::Evaluation)
                        .step(step as u64)
                        .question(q.0 as u64)
                        .rng();
                    let mut hits = 0usize;
                    for _ in 0..k {
                        if params.sample_rollout(q, &mut rng)?.1 == a_ref {
                            hits += 1;
                        }
                    }
                    Ok(hits as f64 / k as f64)
                }
            }
        })
        .collect::<Result<_>>()?;
    Ok(per_question.iter().sum::<f64>() / task.questions as f64)
}

#[derive(Debug, Clone)]
pub struct TrainingRun<T> {
    pub metrics: Vec<StepMetrics>,
    pub params: PolicyParams<T>,
}

/// Runs `config.steps` steps from `initial`, evaluating every `eval_every`.
pub fn run_training<T: Scalar>(
    task: &TaskSpec,
    config: &TrainConfig,
    initial: PolicyParams<T>,
) -> Result<TrainingRun<T>> {
    run_training_with(task, config, initial, |_| {})
}

/// [`run_training`] with a per-step observer (for streaming metrics or traces).
pub fn run_training_with<T: Scalar, F: FnMut(&StepMetrics)>(
    task: &TaskSpec,
    config: &TrainConfig,
    initial: PolicyParams<T>,
    mut observe: F,
) -> Result<TrainingRun<T>> {
    config.validate()?;
    task.validate()?;
    let mut params = initial;
    let mut metrics = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let (next, mut m) = train_step(&params, task, config, step)?;
        params = next;
        if config.eval_every > 0 && (step + 1) % config.eval_every == 0 {
            m.pass1 = Some(evaluate_pass1(
                &params,
                task,
                config.eval_mode,
                config.seed,
                step,
            )?);
        }
        observe(&m);
        metrics.push(m);
    }
    Ok(TrainingRun { metrics, params })
}

pub const METRICS_HEADER: &str = "step,mean_reward,mean_abs_advantage,pass1,degenerate_rows,millis";

/// Metrics as CSV. Every column except `millis` is deterministic.
pub fn metrics_csv(metrics: &[StepMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for m in metrics {
        let pass1 = m.pass1.map(fmt17).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{:.3}",
            m.step,
            fmt17(m.mean_reward),
            fmt17(m.mean_abs_advantage),
            pass1,
            m.degenerate_rows,
            m.millis
        );
    }
    out
}
