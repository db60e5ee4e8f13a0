//! Synthetic tasks and policy initializers.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{AnswerId, PolicyParams, PolicyShape, QuestionId, DEFAULT_ENUMERATION_CAP};
use crate::rng::{Role, StreamKey};
use crate::scalar::Scalar;

/// Question universe, alphabets, reference answers and question distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub questions: usize,
    pub vocab: usize,
    pub length: usize,
    pub answers: usize,
    /// `reference[q]` is the ground-truth answer of question `q`.
    pub reference: Vec<AnswerId>,
    /// Probability of drawing each question; sums to 1.
    pub distribution: Vec<f64>,
    /// Optional partition of the answer alphabet into interchangeable groups.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alias_groups: Option<Vec<Vec<AnswerId>>>,
}

impl TaskSpec {
    pub fn shape(&self) -> PolicyShape {
        PolicyShape {
            questions: self.questions,
            vocab: self.vocab,
            length: self.length,
            answers: self.answers,
        }
    }

    pub fn reference(&self, q: QuestionId) -> AnswerId {
        self.reference[q.0]
    }

    pub fn validate(&self) -> Result<()> {
        PolicyShape::new(self.questions, self.vocab, self.length, self.answers)?;
        if self.reference.len() != self.questions {
            return Err(Error::Config(format!(
                "task has {} reference answers for {} questions",
                self.reference.len(),
                self.questions
            )));
        }
        if let Some(a) = self.reference.iter().find(|a| a.0 >= self.answers) {
            return Err(Error::Config(format!(
                "reference answer {} out of range (A={})",
                a.0, self.answers
            )));
        }
        if self.distribution.len() != self.questions
            || self
                .distribution
                .iter()
                .any(|&p| !(p >= 0.0 && p.is_finite()))
        {
            return Err(Error::Config(
                "question distribution must have one non-negative weight per question".into(),
            ));
        }
        let total: f64 = self.distribution.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "question distribution sums to {total}, not 1"
            )));
        }
        if let Some(groups) = &self.alias_groups {
            let mut seen = vec![false; self.answers];
            for a in groups.iter().flatten() {
                if a.0 >= self.answers || seen[a.0] {
                    return Err(Error::Config(format!(
                        "alias groups do not partition the answers (at {})",
                        a.0
                    )));
                }
                seen[a.0] = true;
            }
            if groups.iter().any(Vec::is_empty) || !seen.iter().all(|&b| b) {
                return Err(Error::Config(
                    "alias groups must be non-empty and cover every answer".into(),
                ));
            }
        }
        Ok(())
    }

    /// Group containing `a`, if alias groups are present.
    pub fn alias_group_of(&self, a: AnswerId) -> Option<usize> {
        self.alias_groups
            .as_ref()?
            .iter()
            .position(|g| g.contains(&a))
    }

    /// Draws a question from the task distribution.
    pub fn sample_question<R: Rng + ?Sized>(&self, rng: &mut R) -> QuestionId {
        let u: f64 = rng.random();
        let mut cum = 0.0;
        for (q, &p) in self.distribution.iter().enumerate() {
            cum += p;
            if u < cum {
                return QuestionId(q);
            }
        }
        QuestionId(self.questions - 1)
    }

    /// Partitions the answer alphabet into `groups` near-equal random groups.
    pub fn with_alias_groups(mut self, groups: usize, seed: u64) -> Result<Self> {
        if groups == 0 || groups > self.answers {
            return Err(Error::Config(format!(
                "cannot split {} answers into {groups} groups",
                self.answers
            )));
        }
        let mut order: Vec<AnswerId> = (0..self.answers).map(AnswerId).collect();
        order.shuffle(&mut StreamKey::new(seed, Role::TaskAliases).rng());
        let mut parts = vec![Vec::new(); groups];
        for (i, a) in order.into_iter().enumerate() {
            parts[i % groups].push(a);
        }
        for g in &mut parts {
            g.sort();
        }
        self.alias_groups = Some(parts);
        Ok(self)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format {
            what: "task",
            detail: e.to_string(),
        })
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let task: TaskSpec = toml::from_str(text).map_err(|e| Error::Format {
            what: "task",
            detail: e.to_string(),
        })?;
        task.validate()?;
        Ok(task)
    }
}

/// Draws a task with uniformly random reference answers and a uniform
/// question distribution. The solution space must stay enumerable.
pub fn generate_task(
    seed: u64,
    questions: usize,
    vocab: usize,
    length: usize,
    answers: usize,
) -> Result<TaskSpec> {
    let shape = PolicyShape::new(questions, vocab, length, answers)?;
    shape.check_enumerable(DEFAULT_ENUMERATION_CAP)?;
    let mut rng = StreamKey::new(seed, Role::TaskReference).rng();
    let reference = (0..questions)
        .map(|_| AnswerId(rng.random_range(0..answers)))
        .collect();
    Ok(TaskSpec {
        questions,
        vocab,
        length,
        answers,
        reference,
        distribution: vec![1.0 / questions as f64; questions],
        alias_groups: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitKind {
    Zero,
    Gaussian { sigma: f64 },
}

pub fn init_policy<T: Scalar>(
    task: &TaskSpec,
    kind: InitKind,
    seed: u64,
) -> Result<PolicyParams<T>> {
    let mut params = PolicyParams::zeros(task.shape());
    match kind {
        InitKind::Zero => {}
        InitKind::Gaussian { sigma } => {
            if !(sigma >= 0.0 && sigma.is_finite()) {
                return Err(Error::InputDomain(format!(
                    "sigma must be >= 0, got {sigma}"
                )));
            }
            if sigma > 0.0 {
                let mut rng = StreamKey::new(seed, Role::PolicyInit).rng();
                let mut noise = || T::of(sigma * rng.sample::<f64, _>(StandardNormal));
                for z in params.solution_logits_mut() {
                    *z = noise();
                }
                for z in params.answer_logits_mut() {
                    *z = noise();
                }
            }
        }
    }
    Ok(params)
}

/// Gaussian init whose answer logits are pulled toward their alias-group mean:
/// `z ← (1 − t)·z + t·mean(group)`, applied per `(q, s)` row.
pub fn init_policy_aliased<T: Scalar>(
    task: &TaskSpec,
    sigma: f64,
    tie_strength: f64,
    seed: u64,
) -> Result<PolicyParams<T>> {
    let groups = task
        .alias_groups
        .as_ref()
        .ok_or_else(|| Error::Config("aliased init needs a task with alias groups".into()))?;
    if !(0.0..=1.0).contains(&tie_strength) {
        return Err(Error::InputDomain(format!(
            "tie_strength must lie in [0, 1], got {tie_strength}"
        )));
    }
    let mut params = init_policy::<T>(task, InitKind::Gaussian { sigma }, seed)?;
    if tie_strength == 0.0 {
        return Ok(params);
    }
    let t = T::of(tie_strength);
    let keep = T::one() - t;
    let shape = task.shape();
    for q in 0..shape.questions {
        for s in 0..shape.solution_count() {
            let row = params.answer_row_mut(QuestionId(q), s);
            for group in groups {
                let mean = group.iter().map(|a| row[a.0]).sum::<T>() / T::of_usize(group.len());
                for a in group {
                    row[a.0] = if tie_strength == 1.0 {
                        mean
                    } else {
                        keep * row[a.0] + t * mean
                    };
                }
            }
        }
    }
    Ok(params)
}
