//! Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any
//! fails. Tolerances and time limits are the constants below.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use kernrl::context::{
    feedback_block, PromptBudget, PromptTemplate, TokenCounter, TurnRecord, WordCounter,
};
use kernrl::credit::{aggregate, normalize_group, AggregationMode, AggregationSpec, GroupRewards};
use kernrl::grpo::{grad_check, ClipRegime, GradCheckCase, GrpoConfig};
use kernrl::guardrails::{check_candidate, default_rules};
use kernrl::metrics::{
    best_at_k, best_at_k_exact, pass_at_k, pass_at_k_exact, scaling_report, TaskEvals,
};
use kernrl::rollout::{
    run_training_step, Policy, PolicyError, PolicyRequest, RawResponse, RolloutConfig, RolloutEnv,
    StepOutput, OKAY_PREFIX,
};
use kernrl::scoring::{EvalResult, EvalStatus};
use kernrl::simenv::{
    gen_tasks, synth_rules, Difficulty, ScriptedKind, ScriptedPolicy, SimExecutor, SynthTask,
};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const AGG_TOL: f64 = 1e-12;
const AGG_LIMIT: Duration = Duration::from_secs(5);
const MEAN_TOL: f64 = 1e-9;
const NORM_LIMIT: Duration = Duration::from_secs(1);
const GRAD_H: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;
const GRAD_LIMIT: Duration = Duration::from_secs(60);
const SPLIT_LIMIT: Duration = Duration::from_secs(30);

type Check = Result<String, String>;
type CheckFn = fn() -> Check;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

fn within(start: Instant, limit: Duration, what: &str) -> Result<f64, String> {
    let s = start.elapsed().as_secs_f64();
    ensure!(
        s < limit.as_secs_f64(),
        "{what} took {s:.2} s, limit {} s",
        limit.as_secs()
    );
    Ok(s)
}

fn core_file(rel: &str) -> String {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../core/tests")
        .join(rel);
    std::fs::read_to_string(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn brute_aggregate(scores: &[f64], mode: AggregationMode, gamma: f64) -> Vec<f64> {
    (0..scores.len())
        .map(|t| {
            let mut acc = match mode {
                AggregationMode::Sum => 0.0,
                _ => f64::NEG_INFINITY,
            };
            for (i, &s) in scores.iter().enumerate() {
                match mode {
                    AggregationMode::Sum if i >= t => acc += gamma.powi((i - t) as i32) * s,
                    AggregationMode::Max if i >= t => acc = acc.max(gamma.powi((i - t) as i32) * s),
                    AggregationMode::Greedy if i == t => acc = s,
                    AggregationMode::Outcome => acc = acc.max(s),
                    _ => {}
                }
            }
            acc
        })
        .collect()
}

fn aggregation_oracle() -> Check {
    let start = Instant::now();
    let modes = [
        AggregationMode::Sum,
        AggregationMode::Max,
        AggregationMode::Greedy,
        AggregationMode::Outcome,
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for case in 0..1000 {
        let len = rng.random_range(1..=10);
        let scores: Vec<f64> = (0..len)
            .map(|_| {
                if rng.random_bool(0.3) {
                    0.0
                } else {
                    0.3 + rng.random_range(0.0..8.0)
                }
            })
            .collect();
        let gamma = rng.random_range(0.0..=1.0);
        let mode = modes[case % 4];
        let got = aggregate(
            &scores,
            &AggregationSpec::new(mode, gamma).map_err(|e| e.to_string())?,
        )
        .map_err(|e| e.to_string())?;
        for (g, w) in got.iter().zip(brute_aggregate(&scores, mode, gamma)) {
            worst = worst.max((g - w).abs());
        }
    }
    ensure!(worst <= AGG_TOL, "max error {worst:e} > {AGG_TOL:e}");
    let s = within(start, AGG_LIMIT, "aggregation")?;
    Ok(format!("1000 triples, max error {worst:.1e}, {s:.3} s"))
}

fn advantage_normalization() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut worst: f64 = 0.0;
    let mut zero_groups = 0;
    for case in 0..1000 {
        let len = rng.random_range(2..=64);
        let rewards: Vec<f64> = if case % 10 == 0 {
            zero_groups += 1;
            vec![rng.random_range(0.0..20.0); len]
        } else {
            (0..len).map(|_| rng.random_range(0.0..20.0)).collect()
        };
        let adv = normalize_group(&GroupRewards::new(rewards)).map_err(|e| e.to_string())?;
        if case % 10 == 0 {
            ensure!(
                adv.iter().all(|a| *a == 0.0),
                "zero-variance group {case} gave {adv:?}"
            );
        }
        worst = worst.max((adv.iter().sum::<f64>() / len as f64).abs());
    }
    ensure!(worst < MEAN_TOL, "max |mean| {worst:e}");
    let s = within(start, NORM_LIMIT, "normalization")?;
    Ok(format!(
        "1000 groups ({zero_groups} zero-variance), max |mean| {worst:.1e}, {s:.3} s"
    ))
}

fn grpo_gradient_check() -> Check {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut clipped_cases = 0;
    for i in 0..100u64 {
        let beta = if i % 2 == 0 { 0.0 } else { 0.01 };
        let regime = if (i / 2) % 2 == 0 {
            ClipRegime::Inactive
        } else {
            ClipRegime::Active
        };
        let cfg = GrpoConfig {
            beta,
            ..GrpoConfig::default()
        };
        let case = GradCheckCase::random(5000 + i, regime, &cfg);
        ensure!(
            case.policy.vocab_size() <= 8 && case.policy.seq_len() <= 6,
            "case {i} too large"
        );
        let r = grad_check(&case, &cfg, GRAD_H).map_err(|e| e.to_string())?;
        if r.clipped_tokens > 0 {
            clipped_cases += 1;
        }
        worst = worst.max(r.max_rel_error);
    }
    ensure!(worst < GRAD_TOL, "max relative error {worst:e}");
    ensure!(
        clipped_cases == 50,
        "{clipped_cases} cases with an active clip, want 50"
    );
    let s = within(start, GRAD_LIMIT, "gradient check")?;
    Ok(format!(
        "100 cases ({clipped_cases} clipped), h={GRAD_H:e}, max rel {worst:.1e}, {s:.2} s"
    ))
}

fn enumerate_best(values: &[BigRational], k: usize) -> BigRational {
    let n = values.len();
    let mut total = BigRational::zero();
    let mut count = 0u32;
    for mask in 0u32..1 << n {
        if mask.count_ones() as usize == k {
            total += (0..n)
                .filter(|i| mask >> i & 1 == 1)
                .map(|i| &values[i])
                .max()
                .unwrap()
                .clone();
            count += 1;
        }
    }
    total / BigRational::from_integer(BigInt::from(count))
}

fn estimator_exactness() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let mut pairs = 0;
    for n in 1..=8usize {
        for _ in 0..10 {
            let values: Vec<BigRational> = (0..n)
                .map(|_| {
                    BigRational::new(
                        BigInt::from(rng.random_range(0..9)),
                        BigInt::from(rng.random_range(1..4)),
                    )
                })
                .collect();
            for k in 1..=n {
                let exact = best_at_k_exact(&values, k).map_err(|e| e.to_string())?;
                ensure!(
                    exact == enumerate_best(&values, k),
                    "n={n} k={k} differs from enumeration"
                );
                let floats: Vec<f64> = values.iter().map(|v| v.to_f64().unwrap()).collect();
                let f = best_at_k(&floats, k).map_err(|e| e.to_string())?;
                ensure!(
                    (f - exact.to_f64().unwrap()).abs() < 1e-12,
                    "float estimate off at n={n} k={k}"
                );
                pairs += 1;
            }
        }
    }
    let five_sixths = BigRational::new(BigInt::from(5), BigInt::from(6));
    ensure!(
        pass_at_k_exact(4, 2, 2).map_err(|e| e.to_string())? == five_sixths,
        "pass@k(4,2,2) != 5/6"
    );
    ensure!(
        pass_at_k(4, 2, 2).map_err(|e| e.to_string())? == 5.0 / 6.0,
        "float pass@k(4,2,2) != 5/6"
    );
    let mut large = 0;
    for k in [1u64, 16, 100, 1000, 10_000] {
        for c in [0u64, 1, 2, 10, 100, 5000, 9999, 10_000] {
            let p = pass_at_k(10_000, c, k).map_err(|e| e.to_string())?;
            ensure!(
                p.is_finite() && (0.0..=1.0).contains(&p),
                "pass@k(10000,{c},{k}) = {p}"
            );
            large += 1;
        }
    }
    Ok(format!(
        "{pairs} (values, k) pairs exact, pass@k(4,2,2)=5/6, {large} n=10000 cases in [0,1]"
    ))
}

fn guardrail_corpus() -> Check {
    let rules = default_rules();
    for f in [
        "copy_reference.py",
        "try_except_fallback.py",
        "inherit_reference.py",
    ] {
        let v = check_candidate(&core_file(&format!("fixtures/hacks/{f}")), &rules);
        ensure!(!v.accepted, "hack {f} accepted");
    }
    let mut allowlisted = 0;
    for f in ["conv3d_turn1.py", "conv3d_turn7.py"] {
        let src = core_file(&format!("fixtures/kernels/{f}"));
        let v = check_candidate(&src, &rules);
        ensure!(v.accepted, "kernel {f} rejected: {}", v.summary());
        allowlisted += src.matches("torch.nn.").count();
    }
    ensure!(
        allowlisted > 0,
        "corpus has no torch.nn. uses to exercise the allowlist"
    );
    Ok(format!("3 hacks rejected, 2 kernels accepted, {allowlisted} allowlisted torch.nn uses, 0 false positives"))
}

fn credit_flow() -> Check {
    let spec = AggregationSpec::new(AggregationMode::Sum, 0.4).map_err(|e| e.to_string())?;
    let a = aggregate(&[0.0, 0.0, 0.0], &spec).map_err(|e| e.to_string())?;
    let b = aggregate(&[0.0, 1.3, 2.0], &spec).map_err(|e| e.to_string())?;
    let adv = normalize_group(&GroupRewards::new([a, b].concat())).map_err(|e| e.to_string())?;
    ensure!(adv[3] > 0.0, "B turn 1 advantage {}", adv[3]);
    ensure!(
        adv[..3].iter().all(|x| *x < 0.0),
        "A advantages {:?}",
        &adv[..3]
    );
    Ok(format!(
        "B turn 1 advantage {:+.4}, A advantages {:+.4}",
        adv[3], adv[0]
    ))
}

fn simenv_step(
    tasks: &[SynthTask],
    policy: &dyn Policy,
    m: u32,
    n: u32,
    seed: u64,
) -> Result<StepOutput, String> {
    let template = PromptTemplate::synthetic();
    let rules = synth_rules();
    let executor = SimExecutor::new(tasks);
    let env = RolloutEnv {
        template: &template,
        counter: &WordCounter,
        rules: &rules,
        policy,
        executor: &executor,
    };
    let mut cfg = RolloutConfig::new(
        m,
        n,
        AggregationSpec::new(AggregationMode::Sum, 0.4).map_err(|e| e.to_string())?,
        PromptBudget::words(32768),
    );
    cfg.max_response_tokens = 16384;
    let rt: Vec<_> = tasks.iter().map(SynthTask::rollout_task).collect();
    run_training_step(&rt, &env, &cfg, seed, 1).map_err(|e| e.to_string())
}

fn split_rows() -> Result<Vec<f64>, String> {
    let tasks = gen_tasks(1, 20, Difficulty::Mixed).map_err(|e| e.to_string())?;
    let policy = ScriptedPolicy::new(ScriptedKind::Greedy, &tasks);
    let mut perf = Vec::new();
    for (t, u) in [(4u32, 4u32), (8, 2), (16, 1)] {
        let out = simenv_step(&tasks, &policy, t, u, 0)?;
        let mut data = TaskEvals::new();
        for traj in &out.trajectories {
            data.entry(traj.task_id.clone())
                .or_default()
                .push(traj.turns.iter().map(|x| x.record.eval.clone()).collect());
        }
        let report =
            scaling_report(&data, &[(t as usize, u as usize)], 16).map_err(|e| e.to_string())?;
        perf.push(report.rows[0].performance);
    }
    Ok(perf)
}

fn split_shape() -> Check {
    let start = Instant::now();
    let perf = split_rows()?;
    ensure!(perf == split_rows()?, "repeat run differs");
    ensure!(
        perf[0] >= perf[2],
        "4x4 {:.4} < 16x1 {:.4}",
        perf[0],
        perf[2]
    );
    ensure!(
        perf[0] >= perf[1] && perf[1] >= perf[2],
        "ordering broken: {perf:?}"
    );
    let s = within(start, SPLIT_LIMIT, "budget splits")?;
    Ok(format!(
        "4x4 {:.4} >= 8x2 {:.4} >= 16x1 {:.4}, deterministic, {s:.2} s",
        perf[0], perf[1], perf[2]
    ))
}

fn random_history(rng: &mut ChaCha8Rng) -> Vec<TurnRecord> {
    let len = rng.random_range(0..=8);
    (1..=len)
        .map(|i| {
            let words = |rng: &mut ChaCha8Rng, max: usize| {
                (0..rng.random_range(0..=max))
                    .map(|w| format!("w{w}"))
                    .collect::<Vec<_>>()
                    .join(" ")
            };
            let eval = if rng.random_bool(0.4) {
                EvalResult::correct(10.0, rng.random_range(1.0..20.0))
            } else {
                EvalResult::failed(
                    EvalStatus::Incorrect,
                    Some(10.0),
                    words(rng, 20) + " mismatch",
                )
            };
            TurnRecord {
                turn_index: i,
                kernel_source: words(rng, 300),
                cot_summary: words(rng, 50),
                eval,
            }
        })
        .collect()
}

fn context_budget() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(108);
    let template = PromptTemplate::cuda();
    let task = core_file("golden/layernorm_task.py");
    let mut trimmed = 0;
    for case in 0..1000 {
        let history = random_history(&mut rng);
        let budget = PromptBudget::words(rng.random_range(900..3000));
        let example = rng.random_bool(0.5);
        let Ok(p) = template.build_context(&task, &history, &budget, &WordCounter, example) else {
            continue;
        };
        ensure!(
            WordCounter.count(&p.text) <= budget.max_tokens,
            "case {case} over budget"
        );
        let all: Vec<u32> = history.iter().map(|t| t.turn_index).collect();
        ensure!(
            all.ends_with(&p.included_turns),
            "case {case}: {:?} not a suffix",
            p.included_turns
        );
        if p.included_turns.len() < all.len() {
            trimmed += 1;
        }
    }
    let first = template
        .build_context(
            &task,
            &[],
            &PromptBudget::words(usize::MAX),
            &WordCounter,
            true,
        )
        .map_err(|e| e.to_string())?;
    ensure!(
        first.text == core_file("golden/prompt_first_turn_cuda.txt"),
        "first-turn prompt differs from golden"
    );
    let mut goldens = 1;
    for (name, eval) in [
        ("correct", EvalResult::correct(1.06, 1.0)),
        (
            "incorrect",
            EvalResult::failed(EvalStatus::Incorrect, Some(1.0), "max abs diff 0.5"),
        ),
        (
            "compile_error",
            EvalResult::failed(EvalStatus::CompileError, Some(1.0), "undefined symbol"),
        ),
        (
            "runtime_error",
            EvalResult::failed(EvalStatus::RuntimeError, Some(1.0), "illegal memory access"),
        ),
    ] {
        ensure!(
            feedback_block(&eval) == core_file(&format!("golden/feedback_{name}.txt")),
            "feedback {name} differs from golden"
        );
        goldens += 1;
    }
    Ok(format!("1000 histories ({trimmed} trimmed) within budget with suffix turns, {goldens} golden files equal"))
}

fn rollout_turns(root: &Path, config: &Path) -> Result<Vec<u8>, String> {
    let args = [
        "kernrl",
        "rollout",
        "--config",
        config.to_str().unwrap(),
        "--steps",
        "3",
        "--root",
        root.to_str().unwrap(),
    ];
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = kernrl_cli::run(args, &mut out, &mut err);
    ensure!(
        code == 0,
        "rollout exited {code}: {}",
        String::from_utf8_lossy(&err)
    );
    let stdout = String::from_utf8_lossy(&out);
    let id = stdout
        .split_whitespace()
        .nth(1)
        .ok_or_else(|| "no run id printed".to_owned())?
        .to_owned();
    std::fs::read(root.join("runs").join(id).join("turns.jsonl")).map_err(|e| e.to_string())
}

fn end_to_end_determinism() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = dir.path().join("config.json");
    std::fs::write(
        &config,
        r#"{"m": 4, "n": 3, "seed": 42,
            "policy": {"kind": "scripted", "scripted": "explorer"},
            "executor": {"kind": "simenv", "noise": 0.1},
            "tasks": {"kind": "synthetic", "seed": 5, "count": 6, "difficulty": "mixed"}}"#,
    )
    .map_err(|e| e.to_string())?;
    let a = rollout_turns(&dir.path().join("a"), &config)?;
    let b = rollout_turns(&dir.path().join("b"), &config)?;
    ensure!(!a.is_empty(), "no turns written");
    ensure!(a == b, "turns.jsonl differs between runs");
    let lines = a.iter().filter(|c| **c == b'\n').count();
    Ok(format!(
        "two 3-step runs, {lines} rows, {} bytes identical",
        a.len()
    ))
}

/// First four tasks answer with the "Okay, " opener, the rest without; the
/// last one is cut off at the length limit.
struct Crafted;

impl Policy for Crafted {
    fn id(&self) -> &str {
        "crafted"
    }
    fn generate(&self, req: &PolicyRequest<'_>) -> Result<RawResponse, PolicyError> {
        let i: usize = req.task_id[1..]
            .parse()
            .map_err(|_| PolicyError::BadResponse("id".into()))?;
        let opener = if i < 4 { OKAY_PREFIX } else { "Alright, " };
        Ok(RawResponse {
            text: format!("{opener}plan\n```\nopt: a\n```\nDone.\n"),
            response_tokens: if i == 7 { req.max_response_tokens } else { 8 },
            truncated: i == 7,
        })
    }
}

fn monitors() -> Check {
    let tasks: Vec<SynthTask> = (0..8)
        .map(|i| SynthTask {
            task_id: format!("c{i}"),
            baseline_ms: 4.0,
            opt_catalog: [("a".to_owned(), 2.0)].into(),
            required_opt: "a".into(),
            prereqs: Default::default(),
            forbidden_bait: None,
        })
        .collect();
    let out = simenv_step(&tasks, &Crafted, 1, 1, 0)?;
    ensure!(out.samples.len() == 8, "{} samples", out.samples.len());
    let st = &out.stats;
    ensure!(
        st.not_okay_ratio == 0.5,
        "not_okay_ratio {}",
        st.not_okay_ratio
    );
    ensure!(
        st.clipping_ratio == 0.125,
        "clipping_ratio {}",
        st.clipping_ratio
    );
    Ok(format!(
        "not_okay_ratio {}, clipping_ratio {}",
        st.not_okay_ratio, st.clipping_ratio
    ))
}

fn main() -> ExitCode {
    let checks: [(&str, CheckFn); 10] = [
        ("aggregation matches brute force", aggregation_oracle),
        ("advantage normalization", advantage_normalization),
        ("grpo gradient check", grpo_gradient_check),
        ("estimator exactness", estimator_exactness),
        ("guardrail corpus", guardrail_corpus),
        ("credit flow to early turns", credit_flow),
        ("turns beat trajectories at fixed budget", split_shape),
        ("context budget and goldens", context_budget),
        ("end-to-end determinism", end_to_end_determinism),
        ("step monitors", monitors),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        let start = Instant::now();
        let result = check();
        let ms = start.elapsed().as_millis();
        match result {
            Ok(detail) => println!("PASS {name}: {detail} [{ms} ms]"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why} [{ms} ms]");
            }
        }
    }
    println!(
        "{} of {} criteria passed",
        checks.len() - failed,
        checks.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
