use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use cerlab::cli::{cmd_verify_with, exit_code, CommonArgs, RunConfig};
use cerlab::oracle::CerOracle;
use cerlab::policy::{AnswerId, PolicyParams, QuestionId};
use cerlab::reward::exact_cer;
use cerlab::trainer::METRICS_HEADER;
use cerlab::Result;

fn cerlab(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cerlab"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .env_remove("CERLAB_SEED")
        .output()
        .unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("config.toml");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

const SMALL: &str = "
[train]
steps = 30
eval_every = 10
reward = \"cer_empirical\"

[verify]
policies = 5
";

#[test]
fn verify_passes_and_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = cerlab(&["verify", "--config", &cfg], dir.path());
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = fs::read_to_string(dir.path().join("verify_reports.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(first["name"], "bounds");
    assert!(text.lines().all(|l| l.contains("\"pass\":true")));
}

#[test]
fn empty_sweep_warns_but_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let out = cerlab(&["verify", "--policies", "0"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
}

#[test]
fn configuration_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad_subset = write_config(dir.path(), "[train]\nrollouts = 4\nsubset = 8\n");
    assert_eq!(
        cerlab(&["train", "--config", &bad_subset], dir.path())
            .status
            .code(),
        Some(2)
    );

    let too_large = write_config(dir.path(), "[task]\nvocab = 10\nlength = 4\n");
    let out = cerlab(&["verify", "--config", &too_large], dir.path());
    assert_eq!(out.status.code(), Some(2));

    let unknown = write_config(dir.path(), "[train]\nlearning_rat = 0.1\n");
    assert_eq!(
        cerlab(&["train", "--config", &unknown], dir.path())
            .status
            .code(),
        Some(2)
    );

    let missing = dir.path().join("nope.json");
    let out = cerlab(
        &["explain", "--checkpoint", missing.to_str().unwrap()],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
}

/// Scores against the wrong reference answer.
struct ShiftedReference;

impl CerOracle<f64> for ShiftedReference {
    fn cer(
        &self,
        params: &PolicyParams<f64>,
        q: QuestionId,
        a: AnswerId,
        a_ref: AnswerId,
    ) -> Result<f64> {
        let wrong = AnswerId((a_ref.0 + 1) % params.shape().answers);
        exact_cer(params, q, a, wrong)
    }
}

#[test]
fn corrupted_reward_fails_verification() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = RunConfig::from_toml(SMALL).unwrap();
    config.out_dir = dir.path().to_path_buf();
    let config = config.resolve(&CommonArgs::default()).unwrap();
    let outcome = cmd_verify_with(&config, &ShiftedReference).unwrap();
    assert_eq!(outcome.exit_code, 1);
    let text = fs::read_to_string(dir.path().join("verify_reports.jsonl")).unwrap();
    assert!(text.contains("\"name\":\"theorem2\"") && text.contains("\"pass\":false"));
}

#[test]
fn zero_steps_writes_header_only_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let out = cerlab(&["train", "--steps", "0"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(csv, format!("{METRICS_HEADER}\n"));
}

fn without_millis(csv: &str) -> Vec<String> {
    csv.lines()
        .map(|l| l.rsplit_once(',').unwrap().0.to_string())
        .collect()
}

#[test]
fn train_output_is_independent_of_thread_count() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = write_config(a.path(), SMALL);
    for (dir, jobs) in [(a.path(), "1"), (b.path(), "8")] {
        let out = cerlab(
            &["train", "--config", &cfg, "--jobs", jobs, "--seed", "5"],
            dir,
        );
        assert_eq!(out.status.code(), Some(0));
    }
    let read = |d: &Path, f: &str| fs::read_to_string(d.join(f)).unwrap();
    assert_eq!(
        without_millis(&read(a.path(), "metrics.csv")),
        without_millis(&read(b.path(), "metrics.csv"))
    );
    assert_eq!(
        read(a.path(), "checkpoint.json"),
        read(b.path(), "checkpoint.json")
    );
    assert_eq!(read(a.path(), "task.toml"), read(b.path(), "task.toml"));
}

#[test]
fn seed_precedence_is_file_then_env_then_flag() {
    let run = |env: Option<&str>, flag: Option<&str>| {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_config(dir.path(), "seed = 1\n[train]\nsteps = 5\n");
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_cerlab"));
        cmd.args(["train", "--config", &cfg, "--out"])
            .arg(dir.path());
        cmd.env_remove("CERLAB_SEED");
        if let Some(e) = env {
            cmd.env("CERLAB_SEED", e);
        }
        if let Some(f) = flag {
            cmd.args(["--seed", f]);
        }
        assert!(cmd.output().unwrap().status.success());
        fs::read_to_string(dir.path().join("checkpoint.json")).unwrap()
    };
    let file = run(None, None);
    let env = run(Some("2"), None);
    let flag = run(Some("2"), Some("1"));
    assert_ne!(file, env);
    assert_eq!(file, flag);
}

#[test]
fn explain_reads_the_trained_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    assert!(cerlab(&["train", "--steps", "10"], dir.path())
        .status
        .success());
    let task = dir.path().join("task.toml");
    let cfg = write_config(
        dir.path(),
        &format!(
            "task_file = {:?}\n[explain]\nrollouts = 6\nsubset = 4\n",
            task.to_str().unwrap()
        ),
    );
    let out = cerlab(
        &["explain", "--config", &cfg, "--question", "3"],
        dir.path(),
    );
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = fs::read_to_string(dir.path().join("explain_q3.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "answer_label,R,w_1,w_2,w_3,w_4,P_row");
    assert_eq!(lines.len(), 1 + 6 + 1);
    assert!(lines[7].starts_with("P,,"));

    let out = cerlab(
        &["explain", "--config", &cfg, "--question", "99"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn mc_study_writes_one_row_per_m() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[mc_study]\ntrials = 200\ntiming_reps = 5\n");
    let out = cerlab(&["mc-study", "--config", &cfg], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let csv = fs::read_to_string(dir.path().join("mc_study.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "M,mean_abs_error,std_error,millis");
    assert_eq!(lines.len(), 6);
    for l in &lines[1..] {
        let millis: f64 = l.rsplit(',').next().unwrap().parse().unwrap();
        assert!(millis > 0.0);
    }
    assert_eq!(exit_code(&cerlab::Error::TrainingAborted("x".into())), 1);
}

#[test]
fn every_reward_kind_improves_on_the_smoke_task() {
    for kind in ["exact_match", "cer_exact", "cer_empirical", "combined"] {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_config(
            dir.path(),
            &format!("[train]\nreward = \"{kind}\"\neval_every = 0\n"),
        );
        assert!(cerlab(&["train", "--config", &cfg], dir.path())
            .status
            .success());
        let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        let rewards: Vec<f64> = csv
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
            .collect();
        assert_eq!(rewards.len(), 500);
        let mean = |w: &[f64]| w.iter().sum::<f64>() / w.len() as f64;
        let (first, last) = (mean(&rewards[..50]), mean(&rewards[450..]));
        assert!(last >= first, "{kind}: {first} -> {last}");
    }
}
