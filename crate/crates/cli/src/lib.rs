//! Command-line driver: `rollout`, `eval`, `scaling`, `gradcheck`,
//! `guard-lint`. `run` is the whole program minus process exit so tests can
//! drive it in-process.

use std::ffi::OsString;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use kernrl::chat::ChatPolicy;
use kernrl::config::{ConfigError, ExecutorSpec, PolicySpec, RunConfig, TaskSource};
use kernrl::context::{PromptTemplate, WordCounter};
use kernrl::grpo::{grad_check, ClipRegime, GradCheckCase, GrpoConfig, REL_ERROR_FLOOR};
use kernrl::guardrails::{check_candidate, default_rules_for_entry, RuleSet, DEFAULT_ENTRY_CLASS};
use kernrl::metrics::{eval_report, scaling_report, MetricsError};
use kernrl::rollout::{run_training_step, Executor, Policy, RolloutEnv, RolloutTask, StepError};
use kernrl::simenv::{
    gen_tasks, synth_rules, tasks_from_json, ScriptedPolicy, SimExecutor, SynthTask,
};
use kernrl::store::{task_evals, CotRow, RunRecord, ScanFilter, Store, StoreError, TurnRow};
use kernrl::worker::{KernelTask, WorkerConfig, WorkerExecutor};

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_SHORTFALL: i32 = 3;
pub const EXIT_CHECK: i32 = 4;

/// Relative-error threshold for `gradcheck`.
pub const GRADCHECK_TOL: f64 = 1e-4;
pub const GRADCHECK_H: f64 = 1e-5;

#[derive(Parser, Debug)]
#[command(
    name = "kernrl",
    version,
    about = "Multi-turn RL rollouts, evaluation and checks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run training steps and store every turn.
    Rollout(RolloutArgs),
    /// Table of best@k / avg@k for correctness, performance and fast_p.
    Eval(EvalArgs),
    /// Compare trajectories-by-turns splits of a fixed sample budget.
    Scaling(ScalingArgs),
    /// Check the analytic GRPO gradient against finite differences.
    Gradcheck(GradcheckArgs),
    /// Run the guard rules on one candidate file.
    GuardLint(GuardLintArgs),
}

#[derive(Args, Debug)]
struct RolloutArgs {
    /// JSON run config.
    #[arg(long)]
    config: PathBuf,
    /// Total number of steps the run should have; completed steps are kept.
    #[arg(long)]
    steps: u64,
    /// Cap on concurrent trajectories (0 = no cap, 1 = sequential).
    #[arg(long, default_value_t = 0)]
    parallelism: usize,
    /// Overrides `run_id` from the config.
    #[arg(long)]
    run_id: Option<String>,
    /// Overrides `runs_dir` from the config.
    #[arg(long)]
    root: Option<PathBuf>,
    /// Also store full chains of thought under cot/.
    #[arg(long)]
    save_cot: bool,
}

#[derive(Args, Debug)]
struct DataArgs {
    #[arg(long)]
    run_id: String,
    /// Directory holding `runs/`.
    #[arg(long, default_value = ".")]
    root: PathBuf,
    /// Step to read; defaults to the last completed step.
    #[arg(long)]
    step: Option<u64>,
    /// Write .txt, .csv and .json reports here.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 16)]
    k: usize,
    #[arg(long, default_value_t = 8)]
    turns: usize,
    /// Comma-separated fast_p thresholds.
    #[arg(long, value_delimiter = ',', default_value = "1.0,1.5")]
    thresholds: Vec<f64>,
}

#[derive(Args, Debug)]
struct ScalingArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Samples per task, trajectories times turns.
    #[arg(long)]
    budget: usize,
    /// Comma-separated `TxU` pairs, e.g. `4x4,8x2,16x1`.
    #[arg(long, value_delimiter = ',', value_parser = parse_pair, required = true)]
    configs: Vec<(usize, usize)>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    trials: u64,
    /// Zero every advantage; the surrogate gradient must vanish.
    #[arg(long)]
    zero_advantage: bool,
}

#[derive(Args, Debug)]
struct GuardLintArgs {
    file: PathBuf,
    /// Class the candidate must define.
    #[arg(long, default_value = DEFAULT_ENTRY_CLASS)]
    entry_class: String,
    /// JSON rule set replacing the defaults.
    #[arg(long)]
    rules: Option<PathBuf>,
    /// Rules for synthetic `opt:` candidates.
    #[arg(long, conflicts_with = "rules")]
    synthetic: bool,
}

fn parse_pair(s: &str) -> Result<(usize, usize), String> {
    let (t, u) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected TxU, got {s:?}"))?;
    let num = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{s:?}: {e}"));
    Ok((num(t)?, num(u)?))
}

/// Error carrying its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        Self::new(EXIT_CONFIG, format!("config error: {e}"))
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        let code = match e {
            StoreError::NotFound(_) => EXIT_SHORTFALL,
            StoreError::BadRunId(_) | StoreError::AlreadyExists(_) => EXIT_CONFIG,
            _ => EXIT_OTHER,
        };
        Self::new(code, e.to_string())
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        let code = match e {
            MetricsError::Shortfall { .. } | MetricsError::NoData => EXIT_SHORTFALL,
            MetricsError::BadK { .. }
            | MetricsError::BadThreshold
            | MetricsError::BudgetMismatch { .. } => EXIT_CONFIG,
            _ => EXIT_OTHER,
        };
        Self::new(code, e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::new(EXIT_OTHER, e.to_string())
    }
}

type CliResult = Result<i32, CliError>;

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            let code = e.exit_code();
            let _ = if code == 0 {
                out.write_all(text.as_bytes())
            } else {
                err.write_all(text.as_bytes())
            };
            return code;
        }
    };
    let result = match cli.command {
        Command::Rollout(a) => cmd_rollout(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Scaling(a) => cmd_scaling(&a, out),
        Command::Gradcheck(a) => cmd_gradcheck(&a, out, err),
        Command::GuardLint(a) => cmd_guard_lint(&a, out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.code
        }
    }
}

fn read_file(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path)
        .map_err(|e| CliError::new(EXIT_CONFIG, format!("{}: {e}", path.display())))
}

enum Tasks {
    Synth(Vec<SynthTask>),
    Kernel(Vec<KernelTask>),
}

impl Tasks {
    fn load(source: &TaskSource, base: &Path) -> Result<Self, CliError> {
        let resolve = |p: &Path| {
            if p.is_absolute() {
                p.to_owned()
            } else {
                base.join(p)
            }
        };
        let config_err =
            |m: String| CliError::new(EXIT_CONFIG, format!("config error: tasks: {m}"));
        Ok(match source {
            TaskSource::Synthetic {
                seed,
                count,
                difficulty,
            } => Tasks::Synth(
                gen_tasks(*seed, *count, *difficulty).map_err(|e| config_err(e.to_string()))?,
            ),
            TaskSource::SynthFile { path } => Tasks::Synth(
                tasks_from_json(&read_file(&resolve(path))?)
                    .map_err(|e| config_err(e.to_string()))?,
            ),
            TaskSource::KernelFile { path } => {
                let tasks: Vec<KernelTask> = serde_json::from_str(&read_file(&resolve(path))?)
                    .map_err(|e| config_err(e.to_string()))?;
                if tasks.is_empty() {
                    return Err(config_err("kernel task file is empty".into()));
                }
                Tasks::Kernel(tasks)
            }
        })
    }

    fn rollout_tasks(&self) -> Vec<RolloutTask> {
        match self {
            Tasks::Synth(t) => t.iter().map(SynthTask::rollout_task).collect(),
            Tasks::Kernel(t) => t
                .iter()
                .map(|k| RolloutTask {
                    task_id: k.task_id.clone(),
                    task_text: k
                        .task_text
                        .clone()
                        .unwrap_or_else(|| k.reference_source.clone()),
                })
                .collect(),
        }
    }
}

fn build_policy(spec: &PolicySpec, tasks: &Tasks) -> Result<Box<dyn Policy>, CliError> {
    match (spec, tasks) {
        (PolicySpec::Scripted { scripted }, Tasks::Synth(t)) => {
            Ok(Box::new(ScriptedPolicy::new(*scripted, t)))
        }
        (PolicySpec::Scripted { .. }, Tasks::Kernel(_)) => Err(CliError::new(
            EXIT_CONFIG,
            "config error: policy: scripted policies only work on synthetic tasks",
        )),
        (PolicySpec::External { model }, _) => ChatPolicy::from_env(model.clone())
            .map(|p| Box::new(p) as Box<dyn Policy>)
            .map_err(|e| CliError::new(EXIT_CONFIG, format!("config error: policy: {e}"))),
    }
}

fn build_executor(spec: &ExecutorSpec, tasks: &Tasks) -> Result<Box<dyn Executor>, CliError> {
    match (spec, tasks) {
        (ExecutorSpec::Simenv { noise }, Tasks::Synth(t)) => {
            Ok(Box::new(SimExecutor::new(t).with_noise(*noise)))
        }
        (
            ExecutorSpec::Worker {
                command,
                workers,
                trials,
                timing_iters,
                timeout_s,
                rtol,
                atol,
            },
            Tasks::Kernel(t),
        ) => {
            let mut cfg = WorkerConfig::new(command.clone());
            cfg.workers = *workers;
            cfg.trials = *trials;
            cfg.timing_iters = *timing_iters;
            cfg.timeout_s = *timeout_s;
            cfg.rtol = *rtol;
            cfg.atol = *atol;
            Ok(Box::new(WorkerExecutor::new(cfg, t)))
        }
        _ => Err(CliError::new(
            EXIT_CONFIG,
            "config error: executor and task source do not match",
        )),
    }
}

fn cmd_rollout(a: &RolloutArgs, out: &mut dyn Write) -> CliResult {
    let mut cfg = RunConfig::from_json(&read_file(&a.config)?)?;
    if let Some(id) = &a.run_id {
        cfg.run_id = Some(id.clone());
    }
    if let Some(root) = &a.root {
        cfg.runs_dir = root.clone();
    }
    cfg.validate()?;
    let base = a.config.parent().unwrap_or(Path::new("."));
    let tasks = Tasks::load(&cfg.tasks, base)?;
    let policy = build_policy(&cfg.policy, &tasks)?;
    let executor = build_executor(&cfg.executor, &tasks)?;
    let (template, rules) = match tasks {
        Tasks::Synth(_) => (PromptTemplate::synthetic(), synth_rules()),
        Tasks::Kernel(_) => (
            PromptTemplate::cuda(),
            default_rules_for_entry(DEFAULT_ENTRY_CLASS),
        ),
    };
    let rollout_tasks = tasks.rollout_tasks();

    let store = Store::new(&cfg.runs_dir);
    let run_id = cfg.run_id();
    let identity = serde_json::to_value(cfg.identity()).expect("config serializes");
    let (mut writer, done) = if store.run_exists(&run_id) {
        let rec = store.load_run(&run_id)?;
        if rec.config != identity {
            return Err(CliError::new(
                EXIT_CONFIG,
                format!("run {run_id:?} already exists with a different config"),
            ));
        }
        let w = store.resume_run(&run_id)?;
        let done = store
            .read_stats(&run_id)?
            .iter()
            .map(|s| s.step)
            .max()
            .unwrap_or(0);
        (w, done)
    } else {
        let created_at = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_secs());
        let rec = RunRecord {
            run_id: run_id.clone(),
            created_at,
            seed: cfg.seed,
            config: identity,
        };
        (store.create_run(&rec)?, 0)
    };
    writeln!(out, "run {run_id} at {}", store.run_dir(&run_id).display())?;
    if done >= a.steps {
        writeln!(out, "{done} steps already stored; nothing to do")?;
        return Ok(EXIT_OK);
    }
    let env = RolloutEnv {
        template: &template,
        counter: &WordCounter,
        rules: &rules,
        policy: policy.as_ref(),
        executor: executor.as_ref(),
    };
    for step in done + 1..=a.steps {
        let rcfg = cfg.rollout_config(step, a.parallelism);
        let output =
            run_training_step(&rollout_tasks, &env, &rcfg, cfg.seed, step).map_err(|e| {
                let code = match e {
                    StepError::Config(_) => EXIT_CONFIG,
                    _ => EXIT_OTHER,
                };
                CliError::new(code, format!("step {step} aborted: {e}"))
            })?;
        for s in &output.samples {
            writer.append_turn(&TurnRow::from_sample(&run_id, step, s))?;
        }
        if a.save_cot {
            let rows: Vec<CotRow> = output
                .samples
                .iter()
                .map(|s| CotRow {
                    task_id: s.task_id.clone(),
                    trajectory_index: s.trajectory_index,
                    turn_index: s.turn_index,
                    cot_full: s.response.cot_full.clone().unwrap_or_default(),
                })
                .collect();
            writer.append_cot(step, &rows)?;
        }
        writer.sync()?;
        writer.append_stats(&output.stats)?;
        writer.sync()?;
        let st = &output.stats;
        writeln!(
            out,
            "step {step}: samples={} mean_reward={:.4} correct_rate={:.4} not_okay_ratio={:.4} clipping_ratio={:.4}",
            st.samples, st.mean_reward, st.correct_rate, st.not_okay_ratio, st.clipping_ratio
        )?;
    }
    Ok(EXIT_OK)
}

fn load_rows(d: &DataArgs) -> Result<(u64, Vec<TurnRow>), CliError> {
    let store = Store::new(&d.root);
    let step = match d.step {
        Some(s) => s,
        None => store
            .read_stats(&d.run_id)?
            .iter()
            .map(|s| s.step)
            .max()
            .ok_or_else(|| {
                CliError::new(
                    EXIT_SHORTFALL,
                    format!("run {:?} has no completed step", d.run_id),
                )
            })?,
    };
    let rows = store.scan(
        &d.run_id,
        &ScanFilter {
            step: Some(step),
            task_id: None,
        },
    )?;
    if rows.is_empty() {
        return Err(CliError::new(
            EXIT_SHORTFALL,
            format!("run {:?} has no turns for step {step}", d.run_id),
        ));
    }
    Ok((step, rows))
}

fn write_reports(
    dir: &Path,
    stem: &str,
    text: &str,
    csv: &str,
    json: &str,
) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(format!("{stem}.txt")), text)?;
    std::fs::write(dir.join(format!("{stem}.csv")), csv)?;
    std::fs::write(dir.join(format!("{stem}.json")), json.to_owned() + "\n")?;
    Ok(())
}

fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> CliResult {
    let (step, rows) = load_rows(&a.data)?;
    let report = eval_report(&task_evals(&rows), a.k, a.turns, &a.thresholds)?;
    writeln!(
        out,
        "run {} step {step}, {} turns per trajectory",
        a.data.run_id, a.turns
    )?;
    let text = report.to_text();
    out.write_all(text.as_bytes())?;
    if let Some(dir) = &a.data.out_dir {
        let stem = format!("eval-step{step}-k{}-turns{}", a.k, a.turns);
        write_reports(dir, &stem, &text, &report.to_csv(), &report.to_json())?;
    }
    Ok(EXIT_OK)
}

fn cmd_scaling(a: &ScalingArgs, out: &mut dyn Write) -> CliResult {
    let (step, rows) = load_rows(&a.data)?;
    let report = scaling_report(&task_evals(&rows), &a.configs, a.budget)?;
    writeln!(
        out,
        "run {} step {step}, budget {}",
        a.data.run_id, a.budget
    )?;
    let text = report.to_text();
    out.write_all(text.as_bytes())?;
    if let Some(dir) = &a.data.out_dir {
        let stem = format!("scaling-step{step}-budget{}", a.budget);
        write_reports(dir, &stem, &text, &report.to_csv(), &report.to_json())?;
    }
    Ok(EXIT_OK)
}

/// Trial `i` of a gradcheck run: beta and clip regime cycle so every
/// combination is covered.
pub fn gradcheck_trial(seed: u64, i: u64) -> (GradCheckCase, GrpoConfig, ClipRegime) {
    let beta = if i.is_multiple_of(2) { 0.0 } else { 0.01 };
    let regime = if (i / 2).is_multiple_of(2) {
        ClipRegime::Inactive
    } else {
        ClipRegime::Active
    };
    let cfg = GrpoConfig {
        beta,
        ..GrpoConfig::default()
    };
    let case_seed =
        kernrl::seed::hash_parts(&[b"gradcheck", &seed.to_le_bytes(), &i.to_le_bytes()]);
    (GradCheckCase::random(case_seed, regime, &cfg), cfg, regime)
}

fn cmd_gradcheck(a: &GradcheckArgs, out: &mut dyn Write, err: &mut dyn Write) -> CliResult {
    if a.trials == 0 {
        writeln!(err, "warning: --trials 0 runs no checks; passing vacuously")?;
        writeln!(out, "gradcheck: 0 trials, PASS")?;
        return Ok(EXIT_OK);
    }
    let mut worst: f64 = 0.0;
    let mut failures = 0;
    for i in 0..a.trials {
        let (mut case, cfg, regime) = gradcheck_trial(a.seed, i);
        if a.zero_advantage {
            case.batch.iter_mut().for_each(|s| s.advantage = 0.0);
        }
        let r = grad_check(&case, &cfg, GRADCHECK_H)
            .map_err(|e| CliError::new(EXIT_OTHER, e.to_string()))?;
        let zero_ok = !a.zero_advantage || cfg.beta > 0.0 || r.analytic_norm == 0.0;
        let ok = r.max_rel_error < GRADCHECK_TOL && zero_ok;
        if !ok {
            failures += 1;
        }
        worst = worst.max(r.max_rel_error);
        writeln!(
            out,
            "trial {i:>3} beta={:<4} {:<8} params={:>3} clipped={:>2} |g|={:.3e} max_rel={:.3e} {}",
            cfg.beta,
            format!("{regime:?}").to_lowercase(),
            r.params,
            r.clipped_tokens,
            r.analytic_norm,
            r.max_rel_error,
            if ok { "ok" } else { "FAIL" }
        )?;
    }
    let verdict = if failures == 0 { "PASS" } else { "FAIL" };
    writeln!(
        out,
        "gradcheck: {} trials, h={GRADCHECK_H:e}, rel floor {REL_ERROR_FLOOR:e}, worst max_rel_error={worst:.3e} (< {GRADCHECK_TOL:e}), {failures} failed, {verdict}",
        a.trials
    )?;
    Ok(if failures == 0 { EXIT_OK } else { EXIT_CHECK })
}

fn cmd_guard_lint(a: &GuardLintArgs, out: &mut dyn Write) -> CliResult {
    let source = std::fs::read_to_string(&a.file)
        .map_err(|e| CliError::new(EXIT_SHORTFALL, format!("{}: {e}", a.file.display())))?;
    let rules = match (&a.rules, a.synthetic) {
        (Some(p), _) => RuleSet::from_json(&read_file(p)?)
            .map_err(|e| CliError::new(EXIT_CONFIG, format!("{}: {e}", p.display())))?,
        (None, true) => synth_rules(),
        (None, false) => default_rules_for_entry(&a.entry_class),
    };
    let verdict = check_candidate(&source, &rules);
    writeln!(out, "{}: {}", a.file.display(), verdict.summary())?;
    for v in &verdict.violations {
        if v.span == (0, 0) {
            writeln!(out, "  {}: required marker missing", v.rule_id)?;
            continue;
        }
        let line = source[..v.span.0].matches('\n').count() + 1;
        writeln!(
            out,
            "  line {line}: {}: {:?}",
            v.rule_id,
            &source[v.span.0..v.span.1]
        )?;
    }
    Ok(if verdict.accepted {
        EXIT_OK
    } else {
        EXIT_CHECK
    })
}
