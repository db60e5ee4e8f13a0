//! Acceptance checks, one line per criterion. Runs as a plain binary so every
//! line is printed even when an earlier criterion fails; exits non-zero if any
//! criterion fails.

use std::fs;
use std::path::Path;
use std::time::Instant;

use cerlab::cli::{cmd_train, cmd_verify, mc_study_rows, CommonArgs, RunConfig};
use cerlab::oracle::{
    check_bounds, check_theorem1, check_theorem2, errors_non_increasing, McRow, IDENTITY_TOLERANCE,
};
use cerlab::policy::{AnswerId, PolicyParams, PolicyShape, QuestionId, Solution};
use cerlab::reward::{batch_cer, empirical_cer, exact_cer, RewardKind};
use cerlab::rng::{Role, StreamKey};
use cerlab::tasks::{generate_task, init_policy, init_policy_aliased, InitKind, TaskSpec};
use cerlab::trainer::{evaluate_pass1, rloo_advantages, run_training, EvalMode, TrainConfig};
use rand::Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn sweep_task(seed: u64) -> TaskSpec {
    generate_task(seed, 4, 3, 2, 4).unwrap()
}

fn sweep_policy(task: &TaskSpec, i: u64) -> PolicyParams<f64> {
    init_policy(task, InitKind::Gaussian { sigma: 1.5 }, 1000 + i).unwrap()
}

fn criterion1() -> Verdict {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut failures = 0;
    for i in 0..100 {
        let task = sweep_task(i);
        let params = sweep_policy(&task, i);
        for q in 0..task.questions {
            let q = QuestionId(q);
            let r = check_theorem2(&params, q, task.reference(q), "sweep").unwrap();
            worst = worst.max(r.gap);
            failures += usize::from(r.gap > 1e-12);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        failures == 0 && secs < 5.0,
        format!("max |Σ P(a|q)ρ(a,a*) − P(a*|q)| = {worst:.3e} over 400 cases, {secs:.2}s"),
    )
}

/// Answer rows identical across solutions, so `π(a*|s,q)` does not depend on `s`.
fn constant_likelihood_policy(seed: u64) -> (TaskSpec, PolicyParams<f64>) {
    let task = sweep_task(seed);
    let mut params = sweep_policy(&task, 500 + seed);
    let shape = params.shape();
    for q in 0..shape.questions {
        let first = params.answer_row(QuestionId(q), 0).to_vec();
        for s in 1..shape.solution_count() {
            params
                .answer_row_mut(QuestionId(q), s)
                .copy_from_slice(&first);
        }
    }
    (task, params)
}

fn criterion2() -> Verdict {
    let start = Instant::now();
    let mut min_slack = f64::INFINITY;
    for i in 0..100 {
        let task = sweep_task(i);
        let params = sweep_policy(&task, i);
        for q in 0..task.questions {
            let q = QuestionId(q);
            for r in check_theorem1(&params, q, task.reference(q), "sweep").unwrap() {
                if r.name == "theorem1_inequality" {
                    min_slack = min_slack.min(r.lhs - r.rhs);
                }
            }
        }
    }
    let mut max_equality_gap = 0.0f64;
    for seed in 0..10 {
        let (task, params) = constant_likelihood_policy(seed);
        for q in 0..task.questions {
            let q = QuestionId(q);
            for r in check_theorem1(&params, q, task.reference(q), "constant").unwrap() {
                if r.name == "theorem1_inequality" {
                    max_equality_gap = max_equality_gap.max((r.lhs - r.rhs).abs());
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        min_slack >= -IDENTITY_TOLERANCE && max_equality_gap <= 1e-12 && secs < 5.0,
        format!(
            "min ρ(a*,a*) − E[π(a*|s)] = {min_slack:.3e}, constant-likelihood |gap| ≤ {max_equality_gap:.3e}, {secs:.2}s"
        ),
    )
}

/// `a` and `a*` are produced by disjoint halves of the solution space.
fn min_policy() -> (PolicyParams<f64>, AnswerId, AnswerId) {
    let shape = PolicyShape::new(1, 3, 2, 4).unwrap();
    let mut params = PolicyParams::zeros(shape);
    let (a, a_ref) = (AnswerId(1), AnswerId(2));
    for s in 0..shape.solution_count() {
        let row = params.answer_row_mut(QuestionId(0), s);
        row[if s % 2 == 0 { a.0 } else { a_ref.0 }] = 40.0;
    }
    (params, a, a_ref)
}

/// Every solution emits `a*` almost surely.
fn max_policy() -> (PolicyParams<f64>, AnswerId) {
    let task = generate_task(7, 1, 3, 2, 4).unwrap();
    let mut params = sweep_policy(&task, 7);
    let a_ref = task.reference(QuestionId(0));
    for s in 0..params.shape().solution_count() {
        params.answer_row_mut(QuestionId(0), s)[a_ref.0] = 40.0;
    }
    (params, a_ref)
}

fn criterion3() -> Verdict {
    let mut exact_ok = true;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..100 {
        let task = sweep_task(i);
        let params = sweep_policy(&task, i);
        let r = check_bounds(&params, &task, "sweep").unwrap();
        exact_ok &= r.pass;
        let mut rng = StreamKey::new(i, Role::Sweep).rng();
        for q in 0..task.questions {
            let q = QuestionId(q);
            let rollouts: Vec<_> = (0..16)
                .map(|_| params.sample_rollout(q, &mut rng).unwrap())
                .collect();
            for a_ref in 0..task.answers {
                let b =
                    batch_cer(&params, q, &rollouts, AnswerId(a_ref), 8, true, &mut rng).unwrap();
                for &x in &b.r {
                    lo = lo.min(x);
                    hi = hi.max(x);
                }
            }
        }
    }
    let empirical_ok = lo >= 0.0 && hi <= 1.0;
    let (pmin, a, a_ref) = min_policy();
    let rho_min = exact_cer(&pmin, QuestionId(0), a, a_ref).unwrap();
    let (pmax, a_star) = max_policy();
    let rho_max = exact_cer(&pmax, QuestionId(0), a_star, a_star).unwrap();
    verdict(
        exact_ok && empirical_ok && rho_min <= 1e-6 && rho_max >= 1.0 - 1e-6,
        format!(
            "exact in [0,1]: {exact_ok}, empirical range [{lo:.3e}, {hi:.6}], min policy ρ = {rho_min:.3e}, max policy ρ = {rho_max:.9}"
        ),
    )
}

fn criterion4() -> Verdict {
    let start = Instant::now();
    let mut config = RunConfig::default();
    config.mc_study.m_values = vec![1, 2, 4, 8, 16, 32, 64];
    config.mc_study.trials = 10_000;
    let config = config.resolve(&CommonArgs::default()).unwrap();
    let rows = mc_study_rows(&config).unwrap();
    let errors: Vec<McRow> = rows
        .iter()
        .map(|r| McRow {
            m: r.m,
            mean_abs_error: r.mean_abs_error,
            std_error: r.std_error,
        })
        .collect();
    let monotone = errors_non_increasing(&errors).is_ok();
    let ratio = rows.last().unwrap().mean_abs_error / rows[0].mean_abs_error;
    let timing_ok = rows.windows(2).all(|w| w[1].millis >= 0.8 * w[0].millis);
    let secs = start.elapsed().as_secs_f64();
    let errs: Vec<String> = rows
        .iter()
        .map(|r| format!("{:.4}", r.mean_abs_error))
        .collect();
    let times: Vec<String> = rows.iter().map(|r| format!("{:.4}", r.millis)).collect();
    verdict(
        monotone && ratio <= 1.0 / 3.0 && timing_ok && secs < 60.0,
        format!(
            "errors [{}], M=64/M=1 = {ratio:.3}, ms/call [{}], {secs:.1}s",
            errs.join(" "),
            times.join(" ")
        ),
    )
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn criterion5() -> Verdict {
    let mut dup_ok = true;
    let mut dedup_ok = true;
    let mut full_ok = true;
    for seed in 0..20u64 {
        let task = generate_task(seed, 2, 4, 2, 8).unwrap();
        let params: PolicyParams<f64> =
            init_policy(&task, InitKind::Gaussian { sigma: 1.0 }, seed).unwrap();
        let q = QuestionId(seed as usize % 2);
        let a_ref = task.reference(q);
        let mut rng = StreamKey::new(seed, Role::Rollouts).rng();
        let mut rollouts: Vec<(Solution, AnswerId)> = (0..12)
            .map(|_| params.sample_rollout(q, &mut rng).unwrap())
            .collect();
        // Forced duplicates: same answer, different solutions.
        for k in 0..4 {
            let (s, _) = params.sample_rollout(q, &mut rng).unwrap();
            rollouts.push((s, rollouts[k].1));
        }
        for m in [5, 16] {
            let key = StreamKey::new(seed, Role::RewardSubset).step(m as u64);
            let on = batch_cer(&params, q, &rollouts, a_ref, m, true, &mut key.rng()).unwrap();
            let off = batch_cer(&params, q, &rollouts, a_ref, m, false, &mut key.rng()).unwrap();
            dedup_ok &= bits(&on.r) == bits(&off.r);
            for i in 0..rollouts.len() {
                for j in 0..rollouts.len() {
                    if rollouts[i].1 == rollouts[j].1 {
                        dup_ok &= on.r[i].to_bits() == on.r[j].to_bits();
                    }
                }
            }
            if m == rollouts.len() {
                let sols: Vec<Solution> = rollouts.iter().map(|(s, _)| s.clone()).collect();
                for (i, (_, a)) in rollouts.iter().enumerate() {
                    let e = empirical_cer(&params, q, *a, a_ref, &sols).unwrap();
                    full_ok &= e.value.to_bits() == on.r[i].to_bits();
                }
            }
        }
    }
    verdict(
        dup_ok && dedup_ok && full_ok,
        format!(
            "duplicates bit-equal: {dup_ok}, dedup on/off bit-equal: {dedup_ok}, M=N matches empirical_cer: {full_ok}"
        ),
    )
}

fn joint_logprob(params: &PolicyParams<f64>, q: QuestionId, s: &Solution, a: AnswerId) -> f64 {
    params.solution_logprob(q, s).unwrap() + params.answer_logprob(q, s, a).unwrap()
}

fn criterion6() -> Verdict {
    let h = 1e-5;
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let mut rng = StreamKey::new(seed, Role::Sweep).index(6).rng();
        let v = rng.random_range(2..=4);
        let l = rng.random_range(1..=3);
        let a_n = rng.random_range(2..=5);
        let shape = PolicyShape::new(2, v, l, a_n).unwrap();
        let task = generate_task(seed, 2, v, l, a_n).unwrap();
        let tau = [1.0, 0.7, 1.5][seed as usize % 3];
        let params: PolicyParams<f64> = init_policy(&task, InitKind::Gaussian { sigma: 1.0 }, seed)
            .unwrap()
            .with_temperature(tau)
            .unwrap();
        let q = QuestionId(rng.random_range(0..2));
        let (s, a) = params.sample_rollout(q, &mut rng).unwrap();
        let grad = params.grad_logprob_rollout(q, &s, a).unwrap();

        let n_sol = params.solution_logits().len();
        let n_ans = params.answer_logits().len();
        let mut analytic = vec![0.0; n_sol + n_ans];
        for (table, row, values) in grad.rows() {
            let (base, width) = match table {
                cerlab::policy::Table::Solution => (0, shape.vocab),
                cerlab::policy::Table::Answer => (n_sol, shape.answers),
            };
            for (c, g) in values.iter().enumerate() {
                analytic[base + row * width + c] = *g;
            }
        }
        let mut numeric = vec![0.0; n_sol + n_ans];
        for (k, slot) in numeric.iter_mut().enumerate() {
            let eval = |delta: f64| {
                let mut p = params.clone();
                if k < n_sol {
                    p.solution_logits_mut()[k] += delta;
                } else {
                    p.answer_logits_mut()[k - n_sol] += delta;
                }
                joint_logprob(&p, q, &s, a)
            };
            *slot = (eval(h) - eval(-h)) / (2.0 * h);
        }
        let diff: f64 = analytic
            .iter()
            .zip(&numeric)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        let norm: f64 = numeric.iter().map(|y| y * y).sum::<f64>().sqrt();
        worst = worst.max(diff / norm);
    }
    verdict(
        worst <= 1e-6,
        format!("max relative error ‖analytic − central FD‖/‖FD‖ = {worst:.3e} over 20 instances"),
    )
}

fn smoke_config(reward: RewardKind, seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        rollouts: 16,
        subset: 16,
        learning_rate: 0.5,
        steps: 500,
        reward,
        seed,
        eval_every: 50,
        ..TrainConfig::default()
    }
}

fn criterion7() -> Verdict {
    let start = Instant::now();
    let kinds = [
        RewardKind::ExactMatch,
        RewardKind::CerEmpirical,
        RewardKind::Combined,
    ];
    let mut best_exact = Vec::new();
    let mut finals = vec![Vec::new(); 3];
    for seed in 0..3u64 {
        let task = generate_task(seed, 8, 4, 2, 8).unwrap();
        let initial: PolicyParams<f64> =
            init_policy(&task, InitKind::Gaussian { sigma: 1.0 }, seed).unwrap();
        for (k, kind) in kinds.iter().enumerate() {
            let run = run_training(&task, &smoke_config(*kind, seed), initial.clone()).unwrap();
            let last = evaluate_pass1(&run.params, &task, EvalMode::Sampled { k: 1000 }, seed, 500)
                .unwrap();
            if k == 0 {
                let best = run
                    .metrics
                    .iter()
                    .filter_map(|m| m.pass1)
                    .fold(last, f64::max);
                best_exact.push(best);
            }
            finals[k].push(last);
        }
    }
    let reached = best_exact.iter().all(|&p| p >= 0.9);
    let parity = (0..3).all(|i| (finals[1][i] - finals[0][i]).abs() <= 0.05);
    let combined = (0..3).all(|i| finals[2][i] >= finals[0][i].min(finals[1][i]) - 0.05);
    let secs = start.elapsed().as_secs_f64();
    let fmt = |v: &[f64]| {
        v.iter()
            .map(|x| format!("{x:.3}"))
            .collect::<Vec<_>>()
            .join(" ")
    };
    verdict(
        reached && parity && combined && secs < 120.0,
        format!(
            "exact-match best [{}] final [{}], cer-empirical final [{}], combined final [{}]; reached 0.9: {reached}, parity: {parity}, combined: {combined}, {secs:.1}s",
            fmt(&best_exact),
            fmt(&finals[0]),
            fmt(&finals[1]),
            fmt(&finals[2])
        ),
    )
}

fn criterion8() -> Verdict {
    let mut rng = StreamKey::new(8, Role::Sweep).rng();
    let mut max_sum = 0.0f64;
    let mut shift_ok = true;
    for _ in 0..1000 {
        let n = rng.random_range(2..=32);
        // Rewards on a 2^-20 grid and shifts on a 2^-8 grid add exactly.
        let r: Vec<f64> = (0..n)
            .map(|_| rng.random_range(0..=(1u32 << 20)) as f64 / (1u32 << 20) as f64)
            .collect();
        let c = rng.random_range(-2048i32..=2048) as f64 / 256.0;
        let a = rloo_advantages(&r).unwrap();
        max_sum = max_sum.max(a.iter().sum::<f64>().abs());
        let shifted: Vec<f64> = r.iter().map(|x| x + c).collect();
        shift_ok &= bits(&a) == bits(&rloo_advantages(&shifted).unwrap());
    }
    verdict(
        max_sum <= 1e-12 && shift_ok,
        format!("max |Σ A| = {max_sum:.3e}, shift invariance bit-exact: {shift_ok}"),
    )
}

fn criterion9() -> Verdict {
    let mut in_sum = 0.0;
    let mut in_n = 0usize;
    let mut out_sum = 0.0;
    let mut out_n = 0usize;
    for seed in 0..50u64 {
        let task = generate_task(seed, 4, 3, 2, 8)
            .unwrap()
            .with_alias_groups(4, seed)
            .unwrap();
        let params: PolicyParams<f64> = init_policy_aliased(&task, 2.0, 0.9, seed).unwrap();
        for q in 0..task.questions {
            let q = QuestionId(q);
            let a_ref = task.reference(q);
            let group = task.alias_group_of(a_ref);
            for a in (0..task.answers).map(AnswerId).filter(|&a| a != a_ref) {
                let rho = exact_cer(&params, q, a, a_ref).unwrap();
                if task.alias_group_of(a) == group {
                    in_sum += rho;
                    in_n += 1;
                } else {
                    out_sum += rho;
                    out_n += 1;
                }
            }
        }
    }
    let (in_mean, out_mean) = (in_sum / in_n as f64, out_sum / out_n as f64);
    verdict(
        in_mean > out_mean,
        format!("mean CER in-group wrong = {in_mean:.4} ({in_n}), out-group wrong = {out_mean:.4} ({out_n})"),
    )
}

fn strip_millis(csv: &str) -> String {
    csv.lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head))
        .collect::<Vec<_>>()
        .join("\n")
}

fn run_outputs(jobs: usize, dir: &Path) -> (String, Vec<u8>, Vec<u8>) {
    let mut config = RunConfig {
        seed: 17,
        jobs,
        out_dir: dir.to_path_buf(),
        ..RunConfig::default()
    };
    config.train.steps = 60;
    config.train.eval_every = 20;
    config.train.reward = RewardKind::Combined;
    config.verify.policies = 20;
    let config = config.resolve(&CommonArgs::default()).unwrap();
    cmd_train(&config).unwrap();
    cmd_verify(&config).unwrap();
    (
        strip_millis(&fs::read_to_string(dir.join("metrics.csv")).unwrap()),
        fs::read(dir.join("checkpoint.json")).unwrap(),
        fs::read(dir.join("verify_reports.jsonl")).unwrap(),
    )
}

fn criterion10() -> Verdict {
    let dirs: Vec<_> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    let a = run_outputs(1, dirs[0].path());
    let b = run_outputs(8, dirs[1].path());
    let c = run_outputs(8, dirs[2].path());
    let metrics = a.0 == b.0 && b.0 == c.0;
    let ckpt = a.1 == b.1 && b.1 == c.1;
    let verify = a.2 == b.2 && b.2 == c.2;
    verdict(
        metrics && ckpt && verify,
        format!(
            "metrics (timing excluded): {metrics}, checkpoint: {ckpt}, verify reports: {verify}"
        ),
    )
}

fn main() {
    type Check = fn() -> Verdict;
    let criteria: [(&str, Check); 10] = [
        ("marginal identity", criterion1),
        ("self-reward inequality", criterion2),
        ("boundedness and attainment", criterion3),
        ("estimator consistency", criterion4),
        ("dedup and reuse identities", criterion5),
        ("gradient correctness", criterion6),
        ("training parity", criterion7),
        ("RLOO identities", criterion8),
        ("graded reward", criterion9),
        ("determinism", criterion10),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let v = check();
        println!(
            "criterion {:>2} {}: {} ({})",
            i + 1,
            if v.pass { "PASS" } else { "FAIL" },
            name,
            v.detail
        );
        if !v.pass {
            failed.push(i + 1);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all 10 criteria pass");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
