//! Deterministic synthetic optimization environment.
//!
//! A candidate is a set of named optimizations, one `opt: <name>` line each.
//! The oracle knows which optimizations exist, which one is required for
//! correctness, which depend on others, and how much each speeds things up.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::{TokenCounter, TurnRecord, WordCounter};
use crate::guardrails::{default_rules, RuleKind, RuleSet};
use crate::rollout::{
    Executor, ExecutorError, Policy, PolicyError, PolicyRequest, RawResponse, RolloutTask,
};
use crate::scoring::{EvalResult, EvalStatus};
use crate::seed::hash_parts;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthTask {
    pub task_id: String,
    pub baseline_ms: f64,
    /// Optimization name to multiplicative speedup factor (> 1).
    pub opt_catalog: BTreeMap<String, f64>,
    pub required_opt: String,
    /// `x -> y`: `x` is incorrect unless `y` is also present.
    #[serde(default)]
    pub prereqs: BTreeMap<String, String>,
    #[serde(default)]
    pub forbidden_bait: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SynthError {
    #[error("task {task}: {reason}")]
    InvalidTask { task: String, reason: String },
    #[error("task count must be positive")]
    ZeroCount,
    #[error("catalog size {0} exceeds the name pool")]
    CatalogTooLarge(usize),
    #[error("task set json: {0}")]
    Json(String),
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

impl SynthTask {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |reason: String| {
            Err(SynthError::InvalidTask {
                task: self.task_id.clone(),
                reason,
            })
        };
        if self.task_id.is_empty() {
            return bad("empty task id".into());
        }
        if !(self.baseline_ms.is_finite() && self.baseline_ms > 0.0) {
            return bad(format!(
                "baseline_ms must be positive, got {}",
                self.baseline_ms
            ));
        }
        if self.opt_catalog.is_empty() {
            return bad("empty catalog".into());
        }
        for (name, f) in &self.opt_catalog {
            if !is_ident(name) {
                return bad(format!("optimization name {name:?} is not an identifier"));
            }
            if !(f.is_finite() && *f > 1.0) {
                return bad(format!("factor of {name} must exceed 1, got {f}"));
            }
        }
        if !self.opt_catalog.contains_key(&self.required_opt) {
            return bad(format!(
                "required optimization {} not in catalog",
                self.required_opt
            ));
        }
        for (x, y) in &self.prereqs {
            if !self.opt_catalog.contains_key(x) || !self.opt_catalog.contains_key(y) {
                return bad(format!(
                    "prerequisite {x} -> {y} names an unknown optimization"
                ));
            }
        }
        for start in self.prereqs.keys() {
            let mut cur = start;
            for _ in 0..=self.prereqs.len() {
                match self.prereqs.get(cur) {
                    Some(next) if next == start => {
                        return bad(format!("prerequisite cycle through {start}"))
                    }
                    Some(next) => cur = next,
                    None => break,
                }
            }
        }
        Ok(())
    }

    /// Length of the longest prerequisite chain, in edges.
    pub fn chain_depth(&self) -> usize {
        self.prereqs
            .keys()
            .map(|start| {
                let mut depth = 0;
                let mut cur = start;
                while let Some(next) = self.prereqs.get(cur) {
                    depth += 1;
                    cur = next;
                    if depth > self.prereqs.len() {
                        break;
                    }
                }
                depth
            })
            .max()
            .unwrap_or(0)
    }

    /// Prompt text describing the task.
    pub fn task_text(&self) -> String {
        let names: Vec<&str> = self.opt_catalog.keys().map(String::as_str).collect();
        format!(
            "task {}: baseline {} ms\navailable optimizations: {}",
            self.task_id,
            self.baseline_ms,
            names.join(", ")
        )
    }

    pub fn rollout_task(&self) -> RolloutTask {
        RolloutTask {
            task_id: self.task_id.clone(),
            task_text: self.task_text(),
        }
    }

    /// Product of factors in name order.
    pub fn speedup_of(&self, opts: &BTreeSet<String>) -> f64 {
        opts.iter().map(|o| self.opt_catalog[o]).product()
    }
}

pub fn tasks_to_json(tasks: &[SynthTask]) -> String {
    serde_json::to_string_pretty(tasks).expect("tasks serialize")
}

pub fn tasks_from_json(text: &str) -> Result<Vec<SynthTask>, SynthError> {
    let tasks: Vec<SynthTask> =
        serde_json::from_str(text).map_err(|e| SynthError::Json(e.to_string()))?;
    for t in &tasks {
        t.validate()?;
    }
    Ok(tasks)
}

/// Parses a candidate into its optimization set.
pub fn parse_candidate(source: &str) -> Result<BTreeSet<String>, String> {
    let mut opts = BTreeSet::new();
    for (i, line) in source.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let name = line
            .strip_prefix("opt:")
            .map(str::trim)
            .filter(|n| is_ident(n));
        match name {
            Some(n) => {
                opts.insert(n.to_owned());
            }
            None => {
                return Err(format!(
                    "line {}: expected `opt: <name>`, got `{line}`",
                    i + 1
                ))
            }
        }
    }
    Ok(opts)
}

pub fn render_candidate(opts: &BTreeSet<String>) -> String {
    opts.iter().map(|o| format!("opt: {o}\n")).collect()
}

/// Evaluates `source` against `task`. Pure.
pub fn evaluate_synth(task: &SynthTask, source: &str) -> EvalResult {
    let base = Some(task.baseline_ms);
    let opts = match parse_candidate(source) {
        Ok(o) => o,
        Err(msg) => return EvalResult::failed(EvalStatus::CompileError, base, msg),
    };
    if let Some(unknown) = opts.iter().find(|o| !task.opt_catalog.contains_key(*o)) {
        return EvalResult::failed(
            EvalStatus::RuntimeError,
            base,
            format!("unknown optimization `{unknown}`"),
        );
    }
    if !opts.contains(&task.required_opt) {
        return EvalResult::failed(
            EvalStatus::Incorrect,
            base,
            format!("required optimization `{}` missing", task.required_opt),
        );
    }
    for o in &opts {
        if let Some(p) = task.prereqs.get(o) {
            if !opts.contains(p) {
                return EvalResult::failed(
                    EvalStatus::Incorrect,
                    base,
                    format!("missing prerequisite: `{o}` requires `{p}`"),
                );
            }
        }
    }
    EvalResult::correct(task.baseline_ms, task.baseline_ms / task.speedup_of(&opts))
}

/// Executor over a fixed task set, optionally with seeded multiplicative
/// runtime jitter of up to `noise` (relative).
#[derive(Debug, Clone)]
pub struct SimExecutor {
    tasks: Arc<BTreeMap<String, SynthTask>>,
    noise: f64,
}

impl SimExecutor {
    pub fn new(tasks: &[SynthTask]) -> Self {
        Self {
            tasks: Arc::new(
                tasks
                    .iter()
                    .map(|t| (t.task_id.clone(), t.clone()))
                    .collect(),
            ),
            noise: 0.0,
        }
    }

    pub fn with_noise(mut self, noise: f64) -> Self {
        assert!((0.0..1.0).contains(&noise), "noise must lie in [0, 1)");
        self.noise = noise;
        self
    }
}

impl Executor for SimExecutor {
    fn evaluate(
        &self,
        task_id: &str,
        kernel_source: &str,
        seed: u64,
    ) -> Result<EvalResult, ExecutorError> {
        let task = self
            .tasks
            .get(task_id)
            .ok_or_else(|| ExecutorError::UnknownTask(task_id.to_owned()))?;
        let mut r = evaluate_synth(task, kernel_source);
        if self.noise > 0.0 {
            if let Some(rt) = r.runtime_ms.as_mut() {
                let mut rng = ChaCha8Rng::seed_from_u64(hash_parts(&[
                    task_id.as_bytes(),
                    kernel_source.as_bytes(),
                    &seed.to_le_bytes(),
                ]));
                *rt *= 1.0 + rng.random_range(-self.noise..=self.noise);
            }
        }
        Ok(r)
    }
}

/// Guard rules for synthetic candidates: the defaults minus the entry-class
/// marker, which synthetic programs do not have.
pub fn synth_rules() -> RuleSet {
    default_rules().without_kind(RuleKind::RequiredMarker)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Easy,
    Mixed,
    Hard,
}

const NAME_POOL: [&str; 16] = [
    "tile",
    "vectorize",
    "unroll",
    "fuse",
    "coalesce",
    "shared_mem",
    "warp_reduce",
    "prefetch",
    "double_buffer",
    "tensor_core",
    "async_copy",
    "bank_pad",
    "interchange",
    "register_block",
    "launch_tune",
    "half_precision",
];

const BAITS: [&str; 4] = [
    "try: fallback()",
    "except: fallback()",
    "torch.nn.functional.relu(x)",
    "torch.nn.Linear(4, 4)",
];

fn build_task<R: Rng>(rng: &mut R, index: usize, size: usize, depth: usize) -> SynthTask {
    let mut names: Vec<&str> = NAME_POOL.to_vec();
    names.shuffle(rng);
    names.truncate(size);
    let opt_catalog = names
        .iter()
        .map(|n| {
            (
                (*n).to_owned(),
                f64::from(rng.random_range(105u32..=200)) / 100.0,
            )
        })
        .collect();
    // Chain over the last depth+1 names; it reaches the required opt only
    // when the catalog is too small to avoid it.
    let chain = &names[size - 1 - depth..];
    let prereqs = chain
        .windows(2)
        .map(|w| (w[1].to_owned(), w[0].to_owned()))
        .collect();
    SynthTask {
        task_id: format!("synth-{index:03}"),
        baseline_ms: f64::from(rng.random_range(100u32..=5000)) / 100.0,
        opt_catalog,
        required_opt: names[0].to_owned(),
        prereqs,
        forbidden_bait: Some(BAITS[index % BAITS.len()].to_owned()),
    }
}

/// Deterministic task set. `Mixed` cycles catalog sizes 2..=8 and chain
/// depths 0..=3 so every batch spans difficulties.
pub fn gen_tasks(
    seed: u64,
    count: usize,
    difficulty: Difficulty,
) -> Result<Vec<SynthTask>, SynthError> {
    if count == 0 {
        return Err(SynthError::ZeroCount);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tasks: Vec<SynthTask> = (0..count)
        .map(|i| {
            let (size, depth) = match difficulty {
                Difficulty::Easy => (rng.random_range(2..=4), 0),
                Difficulty::Hard => (rng.random_range(6..=8), rng.random_range(2..=3)),
                Difficulty::Mixed => (2 + i % 7, i % 4),
            };
            build_task(&mut rng, i, size, depth.min(size - 1))
        })
        .collect();
    for t in &tasks {
        t.validate()?;
    }
    Ok(tasks)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptedKind {
    /// Adds the most valuable untried optimization each turn.
    Greedy,
    /// Random subsets; learns required and prerequisite opts from feedback.
    Explorer,
    /// Emits the task's forbidden snippet.
    Hacker,
    /// Repeats its first answer.
    Stagnant,
}

impl ScriptedKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScriptedKind::Greedy => "greedy",
            ScriptedKind::Explorer => "explorer",
            ScriptedKind::Hacker => "hacker",
            ScriptedKind::Stagnant => "stagnant",
        }
    }
}

/// Test-double policy that reads the task definition and prior turns.
#[derive(Debug, Clone)]
pub struct ScriptedPolicy {
    kind: ScriptedKind,
    id: String,
    tasks: Arc<BTreeMap<String, SynthTask>>,
}

/// Facts recoverable from feedback messages.
#[derive(Default)]
struct Learned {
    best: Option<(f64, BTreeSet<String>)>,
    failed: BTreeMap<String, Option<String>>,
    required: Option<String>,
    prereqs: BTreeMap<String, String>,
}

fn between_ticks(msg: &str) -> Vec<&str> {
    msg.split('`').skip(1).step_by(2).collect()
}

fn learn(turns: &[TurnRecord]) -> Learned {
    let mut l = Learned::default();
    let mut prev: Option<BTreeSet<String>> = None;
    for t in turns {
        let opts = parse_candidate(&t.kernel_source).ok();
        let msg = &t.eval.error_message;
        match t.eval.status {
            EvalStatus::Correct => {
                let s = t.eval.speedup().unwrap_or(0.0);
                if let Some(o) = &opts {
                    if l.best.as_ref().is_none_or(|(b, _)| s > *b) {
                        l.best = Some((s, o.clone()));
                    }
                }
            }
            EvalStatus::Incorrect if msg.starts_with("missing prerequisite") => {
                if let [x, y] = between_ticks(msg)[..] {
                    l.prereqs.insert(x.to_owned(), y.to_owned());
                    l.failed.insert(x.to_owned(), Some(y.to_owned()));
                }
            }
            EvalStatus::Incorrect if msg.starts_with("required optimization") => {
                l.required = between_ticks(msg).first().map(|s| (*s).to_owned());
            }
            EvalStatus::RuntimeError | EvalStatus::Incorrect => {
                // Blame whatever was added since the previous attempt.
                if let (Some(o), Some(p)) = (&opts, &prev) {
                    for added in o.difference(p) {
                        l.failed.entry(added.clone()).or_insert(None);
                    }
                }
            }
            _ => {}
        }
        if opts.is_some() {
            prev = opts;
        }
    }
    l
}

impl ScriptedPolicy {
    pub fn new(kind: ScriptedKind, tasks: &[SynthTask]) -> Self {
        Self {
            kind,
            id: format!("scripted:{}", kind.as_str()),
            tasks: Arc::new(
                tasks
                    .iter()
                    .map(|t| (t.task_id.clone(), t.clone()))
                    .collect(),
            ),
        }
    }

    pub fn kind(&self) -> ScriptedKind {
        self.kind
    }

    fn greedy(task: &SynthTask, turns: &[TurnRecord]) -> (BTreeSet<String>, String) {
        let l = learn(turns);
        let mut base: BTreeSet<String> = match &l.best {
            Some((_, o)) => o.clone(),
            None => BTreeSet::from([task.required_opt.clone()]),
        };
        if turns.is_empty() {
            return (base, "Started from the required optimization.".into());
        }
        let mut ranked: Vec<(&String, f64)> =
            task.opt_catalog.iter().map(|(k, v)| (k, *v)).collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let next = ranked.into_iter().map(|(k, _)| k).find(|k| {
            !base.contains(*k)
                && match l.failed.get(*k) {
                    None => true,
                    Some(Some(prereq)) => base.contains(prereq),
                    Some(None) => false,
                }
        });
        match next {
            Some(k) => {
                base.insert(k.clone());
                (
                    base,
                    format!("Added {k} on top of the best correct version."),
                )
            }
            None => (base, "Kept the best correct version.".into()),
        }
    }

    fn explorer(task: &SynthTask, turns: &[TurnRecord], seed: u64) -> (BTreeSet<String>, String) {
        let l = learn(turns);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut opts: BTreeSet<String> = task
            .opt_catalog
            .keys()
            .filter(|_| rng.random_bool(0.5))
            .cloned()
            .collect();
        if let Some(r) = &l.required {
            opts.insert(r.clone());
        }
        if let Some((_, best)) = &l.best {
            opts.extend(best.iter().cloned());
        }
        loop {
            let missing: Vec<String> = opts
                .iter()
                .filter_map(|o| l.prereqs.get(o))
                .filter(|p| !opts.contains(*p))
                .cloned()
                .collect();
            if missing.is_empty() {
                break;
            }
            opts.extend(missing);
        }
        (
            opts,
            "Tried a different combination of optimizations.".into(),
        )
    }

    fn response_text(&self, kernel: &str, summary: &str) -> String {
        format!(
            "Okay, let me look at the {} approach for this task.\n```\n{}```\n{}\n",
            self.kind.as_str(),
            kernel,
            summary
        )
    }
}

impl Policy for ScriptedPolicy {
    fn id(&self) -> &str {
        &self.id
    }

    fn generate(&self, req: &PolicyRequest<'_>) -> Result<RawResponse, PolicyError> {
        let task = self
            .tasks
            .get(req.task_id)
            .ok_or_else(|| PolicyError::BadResponse(format!("unknown task {:?}", req.task_id)))?;
        let (kernel, summary) = match self.kind {
            ScriptedKind::Greedy => {
                let (o, s) = Self::greedy(task, req.visible_turns);
                (render_candidate(&o), s)
            }
            ScriptedKind::Explorer => {
                let (o, s) = Self::explorer(task, req.visible_turns, req.seed);
                (render_candidate(&o), s)
            }
            ScriptedKind::Hacker => {
                let bait = task.forbidden_bait.as_deref().unwrap_or("try: fallback()");
                (
                    format!("opt: {}\n{bait}\n", task.required_opt),
                    "Wrapped everything in a fallback.".to_owned(),
                )
            }
            ScriptedKind::Stagnant => match req.visible_turns.first() {
                Some(t) if !t.kernel_source.is_empty() => (
                    format!("{}\n", t.kernel_source.trim_end_matches('\n')),
                    t.cot_summary.clone(),
                ),
                _ => {
                    let (o, s) = Self::greedy(task, &[]);
                    (render_candidate(&o), s)
                }
            },
        };
        let text = self.response_text(&kernel, &summary);
        let tokens = WordCounter.count(&text);
        if tokens >= req.max_response_tokens {
            let cut: Vec<&str> = text
                .split_whitespace()
                .take(req.max_response_tokens)
                .collect();
            return Ok(RawResponse {
                text: cut.join(" "),
                response_tokens: req.max_response_tokens,
                truncated: true,
            });
        }
        Ok(RawResponse {
            text,
            response_tokens: tokens,
            truncated: false,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example_task() -> SynthTask {
        SynthTask {
            task_id: "ex".into(),
            baseline_ms: 10.0,
            opt_catalog: BTreeMap::from([("tile".into(), 2.0), ("vec".into(), 1.5)]),
            required_opt: "tile".into(),
            prereqs: BTreeMap::new(),
            forbidden_bait: None,
        }
    }

    #[test]
    fn evaluate_examples() {
        let t = example_task();
        let r = evaluate_synth(&t, "opt: tile");
        assert_eq!(r.status, EvalStatus::Correct);
        assert_eq!(r.runtime_ms, Some(5.0));
        assert_eq!(r.speedup(), Some(2.0));
        assert_eq!(evaluate_synth(&t, "opt: vec").status, EvalStatus::Incorrect);

        let mut p = t.clone();
        p.prereqs.insert("vec".into(), "tile".into());
        let r = evaluate_synth(&p, "opt: tile\nopt: vec");
        assert_eq!(r.status, EvalStatus::Correct);
        assert!((r.runtime_ms.unwrap() - 10.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn evaluate_failure_kinds() {
        let mut t = example_task();
        t.opt_catalog.insert("fuse".into(), 1.2);
        t.prereqs.insert("fuse".into(), "vec".into());
        let r = evaluate_synth(&t, "opt: tile\nfrobnicate");
        assert_eq!(r.status, EvalStatus::CompileError);
        assert!(r.error_message.starts_with("line 2:"));
        assert_eq!(
            evaluate_synth(&t, "opt: tile\nopt: warp").status,
            EvalStatus::RuntimeError
        );
        let r = evaluate_synth(&t, "opt: tile\nopt: fuse");
        assert_eq!(
            r.error_message,
            "missing prerequisite: `fuse` requires `vec`"
        );
        let r = evaluate_synth(&t, "# comment\n\nopt:tile\nopt: tile\n");
        assert_eq!(r.speedup(), Some(2.0));
        assert!(r.validate().is_ok());
    }

    #[test]
    fn validation() {
        let mut t = example_task();
        assert!(t.validate().is_ok());
        t.prereqs.insert("tile".into(), "vec".into());
        t.prereqs.insert("vec".into(), "tile".into());
        assert!(t.validate().is_err());
        let mut t = example_task();
        t.opt_catalog.insert("slow".into(), 0.9);
        assert!(t.validate().is_err());
        let mut t = example_task();
        t.required_opt = "nope".into();
        assert!(t.validate().is_err());
    }

    #[test]
    fn generator_properties() {
        let easy = gen_tasks(1, 4, Difficulty::Easy).unwrap();
        assert_eq!(easy.len(), 4);
        assert!(easy.iter().all(|t| t.prereqs.is_empty()));
        assert_eq!(easy, gen_tasks(1, 4, Difficulty::Easy).unwrap());
        let mixed = gen_tasks(3, 100, Difficulty::Mixed).unwrap();
        assert!(mixed.iter().filter(|t| t.chain_depth() >= 2).count() >= 20);
        let sizes: BTreeSet<usize> = mixed.iter().map(|t| t.opt_catalog.len()).collect();
        assert_eq!(sizes, (2..=8).collect());
        assert!(gen_tasks(1, 0, Difficulty::Easy).is_err());
    }

    #[test]
    fn json_round_trip() {
        let tasks = gen_tasks(9, 5, Difficulty::Hard).unwrap();
        assert_eq!(tasks_from_json(&tasks_to_json(&tasks)).unwrap(), tasks);
        assert!(tasks_from_json("[{\"task_id\": \"x\"}]").is_err());
    }
}
