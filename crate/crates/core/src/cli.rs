//! `cerlab` subcommands: `verify`, `train`, `mc-study`, `explain`.
//!
//! Configuration is one TOML file (every field defaulted); command-line flags
//! override file values and `CERLAB_SEED` overrides the seed. Exit codes: 0 on
//! success, 1 when a check or run fails, 2 for configuration and domain errors.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::{
    check_bounds_with, check_theorem1_with, check_theorem2_mixture, check_theorem2_with,
    mc_error_study, CerOracle, ExactCer, TheoremReport,
};
use crate::policy::{AnswerId, PolicyCheckpoint, PolicyParams, QuestionId, Solution};
use crate::reward::{batch_cer, explain_batch, RewardKind};
use crate::rng::{Role, StreamKey};
use crate::scalar::fmt17;
use crate::tasks::{generate_task, init_policy, init_policy_aliased, InitKind, TaskSpec};
use crate::trainer::{metrics_csv, run_training, TrainConfig};

pub const SEED_ENV: &str = "CERLAB_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSection {
    pub questions: usize,
    pub vocab: usize,
    pub length: usize,
    pub answers: usize,
    /// Number of alias groups to split the answers into; 0 for none.
    pub alias_groups: usize,
}

impl Default for TaskSection {
    fn default() -> Self {
        Self {
            questions: 8,
            vocab: 4,
            length: 2,
            answers: 8,
            alias_groups: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitName {
    Zero,
    Gaussian,
    Aliased,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySection {
    pub init: InitName,
    pub sigma: f64,
    pub tie_strength: f64,
    pub temperature: f64,
}

impl Default for PolicySection {
    fn default() -> Self {
        Self {
            init: InitName::Gaussian,
            sigma: 1.0,
            tie_strength: 0.9,
            temperature: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySection {
    /// Random policies in the sweep.
    pub policies: usize,
    pub sigma: f64,
}

impl Default for VerifySection {
    fn default() -> Self {
        Self {
            policies: 100,
            sigma: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McStudySection {
    pub m_values: Vec<usize>,
    pub trials: usize,
    pub question: usize,
    /// Answer being scored; defaults to the question's reference answer.
    pub answer: Option<usize>,
    /// `batch_cer` calls per timing block.
    pub timing_reps: usize,
    pub timing_blocks: usize,
}

impl Default for McStudySection {
    fn default() -> Self {
        Self {
            m_values: vec![1, 2, 4, 8, 16],
            trials: 1000,
            question: 0,
            answer: None,
            timing_reps: 200,
            timing_blocks: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainSection {
    pub checkpoint: Option<PathBuf>,
    pub question: usize,
    pub rollouts: usize,
    pub subset: usize,
}

impl Default for ExplainSection {
    fn default() -> Self {
        Self {
            checkpoint: None,
            question: 0,
            rollouts: 16,
            subset: 16,
        }
    }
}

/// Everything a subcommand needs. The top-level `seed` is the only seed; it is
/// copied into `train.seed` on resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Worker threads; 0 lets the runtime decide.
    pub jobs: usize,
    /// Task document to load instead of generating one from `[task]`.
    pub task_file: Option<PathBuf>,
    pub task: TaskSection,
    pub policy: PolicySection,
    pub train: TrainConfig,
    pub verify: VerifySection,
    pub mc_study: McStudySection,
    pub explain: ExplainSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            jobs: 0,
            task_file: None,
            task: TaskSection::default(),
            policy: PolicySection::default(),
            train: TrainConfig::default(),
            verify: VerifySection::default(),
            mc_study: McStudySection::default(),
            explain: ExplainSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format {
            what: "config",
            detail: e.to_string(),
        })
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
                Self::from_toml(&text)
            }
        }
    }

    /// Flag and environment overrides, then cross-field checks.
    pub fn resolve(mut self, common: &CommonArgs) -> Result<Self> {
        if let Some(seed) = common.seed {
            self.seed = seed;
        }
        if let Some(out) = &common.out {
            self.out_dir = out.clone();
        }
        if let Some(jobs) = common.jobs {
            self.jobs = jobs;
        }
        self.train.seed = self.seed;
        if let Some(p) = &self.task_file {
            if !p.exists() {
                return Err(Error::Config(format!(
                    "task file {} not found",
                    p.display()
                )));
            }
        }
        self.train.validate()?;
        Ok(self)
    }

    pub fn build_task(&self) -> Result<TaskSpec> {
        if let Some(p) = &self.task_file {
            let text = fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
            return TaskSpec::from_toml(&text);
        }
        let t = &self.task;
        let task = generate_task(self.seed, t.questions, t.vocab, t.length, t.answers)?;
        if t.alias_groups > 0 {
            task.with_alias_groups(t.alias_groups, self.seed)
        } else {
            Ok(task)
        }
    }

    pub fn build_policy(&self, task: &TaskSpec, seed: u64) -> Result<PolicyParams<f64>> {
        let p = &self.policy;
        let params = match p.init {
            InitName::Zero => init_policy(task, InitKind::Zero, seed)?,
            InitName::Gaussian => init_policy(task, InitKind::Gaussian { sigma: p.sigma }, seed)?,
            InitName::Aliased => init_policy_aliased(task, p.sigma, p.tie_strength, seed)?,
        };
        params.with_temperature(p.temperature)
    }

    fn thread_pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.jobs)
            .build()
            .map_err(|e| Error::Config(format!("cannot start {} workers: {e}", self.jobs)))
    }

    fn out_path(&self, name: &str) -> Result<PathBuf> {
        fs::create_dir_all(&self.out_dir)?;
        Ok(self.out_dir.join(name))
    }
}

/// What a subcommand produced.
#[derive(Debug, Clone, PartialEq)]
pub struct CommandOutcome {
    /// 0 on success, 1 when a check failed.
    pub exit_code: i32,
    pub files: Vec<PathBuf>,
    pub summary: String,
}

/// Exit code for an error: 1 for run failures, 2 for configuration/domain errors.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::TrainingAborted(_) | Error::UpdateRejected(_) => 1,
        _ => 2,
    }
}

fn policy_seed(seed: u64, index: usize) -> u64 {
    StreamKey::new(seed, Role::Sweep)
        .index(index as u64)
        .rng()
        .random()
}

/// Bounds and both theorems over a sweep of random policies.
pub fn cmd_verify(config: &RunConfig) -> Result<CommandOutcome> {
    cmd_verify_with(config, &ExactCer)
}

/// [`cmd_verify`] with a substitute CER implementation.
pub fn cmd_verify_with(config: &RunConfig, oracle: &dyn CerOracle<f64>) -> Result<CommandOutcome> {
    use rayon::prelude::*;

    let task = config.build_task()?;
    task.shape()
        .check_enumerable(crate::policy::DEFAULT_ENUMERATION_CAP)?;
    let sigma = config.verify.sigma;
    let reports: Vec<Vec<TheoremReport>> = config.thread_pool()?.install(|| {
        (0..config.verify.policies)
            .into_par_iter()
            .map(|i| -> Result<Vec<TheoremReport>> {
                let params: PolicyParams<f64> = init_policy(
                    &task,
                    InitKind::Gaussian { sigma },
                    policy_seed(config.seed, i),
                )?;
                let label = format!("policy={i}");
                let mut out = vec![check_bounds_with(oracle, &params, &task, &label)?];
                for q in 0..task.questions {
                    let q = QuestionId(q);
                    let a_ref = task.reference(q);
                    out.extend(check_theorem1_with(oracle, &params, q, a_ref, &label)?);
                    out.push(check_theorem2_with(oracle, &params, q, a_ref, &label)?);
                }
                out.push(check_theorem2_mixture(&params, &task, &label)?);
                Ok(out)
            })
            .collect::<Result<_>>()
    })?;
    let reports: Vec<TheoremReport> = reports.into_iter().flatten().collect();

    let path = config.out_path("verify_reports.jsonl")?;
    let mut text = String::new();
    for r in &reports {
        text.push_str(&serde_json::to_string(r).expect("reports serialize"));
        text.push('\n');
    }
    fs::write(&path, text)?;

    let failed = reports.iter().filter(|r| !r.pass).count();
    let mut summary = format!("{} reports, {failed} failed", reports.len());
    if reports.is_empty() {
        summary.push_str(" (warning: empty sweep, nothing was checked)");
    }
    Ok(CommandOutcome {
        exit_code: if failed == 0 { 0 } else { 1 },
        files: vec![path],
        summary,
    })
}

/// Trains from the configured init, writing `metrics.csv`, `checkpoint.json`
/// and the task as `task.toml`.
pub fn cmd_train(config: &RunConfig) -> Result<CommandOutcome> {
    let task = config.build_task()?;
    let initial = config.build_policy(&task, config.seed)?;
    let run = config
        .thread_pool()?
        .install(|| run_training(&task, &config.train, initial))?;

    let metrics_path = config.out_path("metrics.csv")?;
    fs::write(&metrics_path, metrics_csv(&run.metrics))?;
    let ckpt_path = config.out_path("checkpoint.json")?;
    write_checkpoint(&ckpt_path, &run.params)?;
    let task_path = config.out_path("task.toml")?;
    fs::write(&task_path, task.to_toml()?)?;

    let last = run.metrics.last();
    let summary = match last {
        Some(m) => format!(
            "{} steps, final mean reward {:.4}",
            run.metrics.len(),
            m.mean_reward
        ),
        None => "0 steps".to_string(),
    };
    Ok(CommandOutcome {
        exit_code: 0,
        files: vec![metrics_path, ckpt_path, task_path],
        summary,
    })
}

pub fn write_checkpoint(path: &Path, params: &PolicyParams<f64>) -> Result<()> {
    let text =
        serde_json::to_string_pretty(&params.to_checkpoint()).expect("checkpoint serializes");
    let mut f = fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    f.write_all(b"\n")?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<PolicyParams<f64>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let ckpt: PolicyCheckpoint = serde_json::from_str(&text).map_err(|e| Error::Format {
        what: "checkpoint",
        detail: e.to_string(),
    })?;
    PolicyParams::from_checkpoint(&ckpt)
}

pub const MC_HEADER: &str = "M,mean_abs_error,std_error,millis";

/// One row of the `mc-study` table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McStudyRow {
    pub m: usize,
    pub mean_abs_error: f64,
    pub std_error: f64,
    /// Milliseconds per `batch_cer` call at this `M`.
    pub millis: f64,
}

/// Error study plus `batch_cer` timing over the configured `M` ladder.
pub fn mc_study_rows(config: &RunConfig) -> Result<Vec<McStudyRow>> {
    let task = config.build_task()?;
    let study = &config.mc_study;
    let q = QuestionId(study.question);
    if study.question >= task.questions {
        return Err(Error::InputDomain(format!(
            "question {} out of range (Q={})",
            study.question, task.questions
        )));
    }
    let a_ref = task.reference(q);
    let a = AnswerId(study.answer.unwrap_or(a_ref.0));
    if study.m_values.is_empty() {
        return Err(Error::Config("mc_study.m_values is empty".into()));
    }
    let params = config.build_policy(&task, config.seed)?;
    let rows = config.thread_pool()?.install(|| {
        mc_error_study(
            &params,
            q,
            a,
            a_ref,
            &study.m_values,
            study.trials,
            config.seed,
        )
    })?;

    let n = *study.m_values.iter().max().expect("non-empty");
    let mut rng = StreamKey::new(config.seed, Role::Timing).rng();
    let rollouts: Vec<(Solution, AnswerId)> = (0..n)
        .map(|_| params.sample_rollout(q, &mut rng))
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(rows.len());
    for row in rows {
        let mut best = f64::INFINITY;
        for block in 0..study.timing_blocks.max(1) {
            let mut subset_rng = StreamKey::new(config.seed, Role::Timing)
                .step(row.m as u64)
                .index(block as u64)
                .rng();
            let start = Instant::now();
            for _ in 0..study.timing_reps.max(1) {
                let b = batch_cer(&params, q, &rollouts, a_ref, row.m, true, &mut subset_rng)?;
                std::hint::black_box(b);
            }
            best = best.min(start.elapsed().as_secs_f64() * 1e3 / study.timing_reps.max(1) as f64);
        }
        out.push(McStudyRow {
            m: row.m,
            mean_abs_error: row.mean_abs_error,
            std_error: row.std_error,
            millis: best,
        });
    }
    Ok(out)
}

pub fn mc_study_csv(rows: &[McStudyRow]) -> String {
    let mut out = String::from(MC_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.m,
            fmt17(r.mean_abs_error),
            fmt17(r.std_error),
            fmt17(r.millis)
        ));
    }
    out
}

/// Writes `mc_study.csv`.
pub fn cmd_mc_study(config: &RunConfig) -> Result<CommandOutcome> {
    let rows = mc_study_rows(config)?;
    let path = config.out_path("mc_study.csv")?;
    fs::write(&path, mc_study_csv(&rows))?;
    Ok(CommandOutcome {
        exit_code: 0,
        files: vec![path],
        summary: format!("{} rows", rows.len()),
    })
}

/// Samples `N` rollouts for one question from a checkpoint and writes the
/// reward-matrix view as `explain_q<q>.csv`.
pub fn cmd_explain(
    config: &RunConfig,
    checkpoint: &Path,
    question: usize,
) -> Result<CommandOutcome> {
    let task = config.build_task()?;
    let params = read_checkpoint(checkpoint)?;
    if params.shape() != task.shape() {
        return Err(Error::Config(format!(
            "checkpoint shape {:?} does not match the task {:?}",
            params.shape(),
            task.shape()
        )));
    }
    if question >= task.questions {
        return Err(Error::InputDomain(format!(
            "question {question} out of range (Q={})",
            task.questions
        )));
    }
    let q = QuestionId(question);
    let ex = &config.explain;
    let stream = StreamKey::new(config.seed, Role::Explain).question(question as u64);
    let mut rng = stream.rng();
    let rollouts: Vec<(Solution, AnswerId)> = (0..ex.rollouts)
        .map(|_| params.sample_rollout(q, &mut rng))
        .collect::<Result<_>>()?;
    let mut subset_rng = stream.index(1).rng();
    let batch = batch_cer(
        &params,
        q,
        &rollouts,
        task.reference(q),
        ex.subset,
        true,
        &mut subset_rng,
    )?;
    let path = config.out_path(&format!("explain_q{question}.csv"))?;
    fs::write(&path, explain_batch(&batch))?;
    Ok(CommandOutcome {
        exit_code: 0,
        files: vec![path],
        summary: format!("{} rows, reference a{}", batch.r.len(), task.reference(q).0),
    })
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// TOML configuration file.
    #[arg(long, short = 'c', global = true)]
    pub config: Option<PathBuf>,
    /// Seed override (also read from CERLAB_SEED).
    #[arg(long, global = true, env = SEED_ENV)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, short = 'o', global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long, short = 'j', global = true)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Parser)]
#[command(
    name = "cerlab",
    version,
    about = "Conditional expectation reward laboratory"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check reward bounds and both theorems over a sweep of random policies.
    Verify {
        /// Number of random policies.
        #[arg(long)]
        policies: Option<usize>,
    },
    /// Train with RLOO and write metrics and a checkpoint.
    Train {
        #[arg(long)]
        reward: Option<RewardKind>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Monte-Carlo error and timing of the empirical reward across M.
    McStudy {
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Reward matrices for one sampled group, as CSV.
    Explain {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        question: Option<usize>,
    },
}

impl clap::ValueEnum for RewardKind {
    fn value_variants<'a>() -> &'a [Self] {
        &[
            RewardKind::ExactMatch,
            RewardKind::CerExact,
            RewardKind::CerEmpirical,
            RewardKind::Combined,
        ]
    }

    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(match self {
            RewardKind::ExactMatch => "exact_match",
            RewardKind::CerExact => "cer_exact",
            RewardKind::CerEmpirical => "cer_empirical",
            RewardKind::Combined => "combined",
        }))
    }
}

/// Parses, runs, and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    match dispatch(cli) {
        Ok(outcome) => {
            for f in &outcome.files {
                eprintln!("wrote {}", f.display());
            }
            eprintln!("{}", outcome.summary);
            outcome.exit_code
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cli: Cli) -> Result<CommandOutcome> {
    let mut config = RunConfig::load(cli.common.config.as_deref())?;
    match &cli.command {
        Command::Verify { policies } => {
            if let Some(n) = policies {
                config.verify.policies = *n;
            }
        }
        Command::Train { reward, steps } => {
            if let Some(r) = reward {
                config.train.reward = *r;
            }
            if let Some(s) = steps {
                config.train.steps = *s;
            }
        }
        Command::McStudy { trials } => {
            if let Some(t) = trials {
                config.mc_study.trials = *t;
            }
        }
        Command::Explain {
            checkpoint,
            question,
        } => {
            if let Some(c) = checkpoint {
                config.explain.checkpoint = Some(c.clone());
            }
            if let Some(q) = question {
                config.explain.question = *q;
            }
        }
    }
    let config = config.resolve(&cli.common)?;
    match cli.command {
        Command::Verify { .. } => cmd_verify(&config),
        Command::Train { .. } => cmd_train(&config),
        Command::McStudy { .. } => cmd_mc_study(&config),
        Command::Explain { .. } => {
            let ckpt = config
                .explain
                .checkpoint
                .clone()
                .unwrap_or_else(|| config.out_dir.join("checkpoint.json"));
            cmd_explain(&config, &ckpt, config.explain.question)
        }
    }
}
