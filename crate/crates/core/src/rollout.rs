//! One training step: `m` parallel trajectories of `n` refinement turns per
//! task, per-turn training samples with aggregated rewards and group
//! advantages, and the instability monitors.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::{
    ContextError, Prompt, PromptBudget, PromptTemplate, TokenCounter, TurnRecord,
};
use crate::credit::{
    aggregate, normalize_group, AggregationSpec, CreditError, GroupRewards, DEFAULT_STD_EPSILON,
};
use crate::guardrails::{check_candidate, RuleSet};
use crate::scoring::{score_kernel, EvalResult, EvalStatus, ScoreError, ScoreWeights};
use crate::seed;

/// Default prefix checked by [`not_okay_ratio`].
pub const OKAY_PREFIX: &str = "Okay, ";

/// Everything a policy sees when producing one turn.
#[derive(Debug, Clone, Copy)]
pub struct PolicyRequest<'a> {
    pub task_id: &'a str,
    pub prompt: &'a Prompt,
    /// History entries included in `prompt`, for scripted policies that
    /// read structure instead of text.
    pub visible_turns: &'a [TurnRecord],
    pub seed: u64,
    pub temperature: f64,
    pub max_response_tokens: usize,
}

/// Unparsed policy output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawResponse {
    pub text: String,
    pub response_tokens: usize,
    /// Set iff generation stopped at `max_response_tokens`.
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PolicyError {
    #[error("policy transport error: {0}")]
    Transport(String),
    #[error("policy returned an unusable response: {0}")]
    BadResponse(String),
}

/// Deterministic for a fixed request.
pub trait Policy: Send + Sync {
    fn id(&self) -> &str;
    fn generate(&self, req: &PolicyRequest<'_>) -> Result<RawResponse, PolicyError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExecutorError {
    #[error("executor unavailable: {0}")]
    Unavailable(String),
    #[error("unknown task {0:?}")]
    UnknownTask(String),
}

/// Evaluates a guard-approved candidate.
pub trait Executor: Send + Sync {
    fn evaluate(
        &self,
        task_id: &str,
        kernel_source: &str,
        seed: u64,
    ) -> Result<EvalResult, ExecutorError>;
}

/// A response split into reasoning, kernel and summary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedResponse {
    pub cot: String,
    pub kernel_source: String,
    pub cot_summary: String,
}

/// Takes the last fenced code block as the kernel, prose after it as the
/// summary and prose before it as the chain of thought.
pub fn parse_response(text: &str) -> Result<ParsedResponse, String> {
    let lines: Vec<&str> = text.split('\n').collect();
    let mut open: Option<usize> = None;
    let mut last: Option<(usize, usize)> = None;
    for (i, line) in lines.iter().enumerate() {
        if line.trim_start().starts_with("```") {
            match open {
                None => open = Some(i),
                Some(start) => {
                    last = Some((start, i));
                    open = None;
                }
            }
        }
    }
    if let Some(start) = open {
        return Err(format!(
            "unterminated code block opened on line {}",
            start + 1
        ));
    }
    let (start, end) = last.ok_or_else(|| "no fenced code block found".to_owned())?;
    let kernel = lines[start + 1..end].join("\n");
    if kernel.trim().is_empty() {
        return Err("code block is empty".into());
    }
    Ok(ParsedResponse {
        cot: lines[..start].join("\n").trim().to_owned(),
        kernel_source: kernel,
        cot_summary: lines[end + 1..].join("\n").trim().to_owned(),
    })
}

/// One completed turn with everything needed for training and storage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub record: TurnRecord,
    pub context: Prompt,
    /// Reasoning before the kernel; kept for monitors, never fed back.
    pub cot_full: String,
    pub response_tokens: usize,
    pub truncated: bool,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task_id: String,
    pub trajectory_index: u32,
    pub policy_id: String,
    pub seed: u64,
    pub turns: Vec<Turn>,
}

impl Trajectory {
    pub fn scores(&self) -> Vec<f64> {
        self.turns.iter().map(|t| t.score).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleResponse {
    pub kernel_source: String,
    pub cot_summary: String,
    pub cot_full: Option<String>,
    pub response_tokens: usize,
}

/// One refinement turn as a GRPO training sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub task_id: String,
    pub trajectory_index: u32,
    pub turn_index: u32,
    pub context: Prompt,
    pub response: SampleResponse,
    pub truncated: bool,
    pub eval: EvalResult,
    pub score: f64,
    pub aggregated_reward: f64,
    pub advantage: f64,
}

/// Samples for every turn of `traj`, with aggregated rewards and zero
/// advantages.
pub fn split_trajectory(
    traj: &Trajectory,
    spec: &AggregationSpec,
) -> Result<Vec<TrainingSample>, CreditError> {
    let rewards = aggregate(&traj.scores(), spec)?;
    Ok(traj
        .turns
        .iter()
        .zip(rewards)
        .map(|(t, r)| TrainingSample {
            task_id: traj.task_id.clone(),
            trajectory_index: traj.trajectory_index,
            turn_index: t.record.turn_index,
            context: t.context.clone(),
            response: SampleResponse {
                kernel_source: t.record.kernel_source.clone(),
                cot_summary: t.record.cot_summary.clone(),
                cot_full: Some(t.cot_full.clone()),
                response_tokens: t.response_tokens,
            },
            truncated: t.truncated,
            eval: t.record.eval.clone(),
            score: t.score,
            aggregated_reward: r,
            advantage: 0.0,
        })
        .collect())
}

/// Fraction of chains of thought not starting with `prefix` (byte
/// comparison). Empty input gives 0.
pub fn not_okay_ratio<S: AsRef<str>>(cots: &[S], prefix: &str) -> f64 {
    if cots.is_empty() {
        return 0.0;
    }
    let bad = cots
        .iter()
        .filter(|c| !c.as_ref().as_bytes().starts_with(prefix.as_bytes()))
        .count();
    bad as f64 / cots.len() as f64
}

/// Fraction of samples whose response hit the length limit.
pub fn clipping_ratio(samples: &[TrainingSample]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples.iter().filter(|s| s.truncated).count() as f64 / samples.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: u64,
    pub samples: usize,
    /// Mean per-turn kernel score.
    pub mean_reward: f64,
    pub correct_rate: f64,
    pub not_okay_ratio: f64,
    pub clipping_ratio: f64,
}

impl StepStats {
    pub fn from_samples(step: u64, samples: &[TrainingSample]) -> Self {
        let n = samples.len().max(1) as f64;
        let cots: Vec<&str> = samples
            .iter()
            .map(|s| s.response.cot_full.as_deref().unwrap_or(""))
            .collect();
        Self {
            step,
            samples: samples.len(),
            mean_reward: samples.iter().map(|s| s.score).sum::<f64>() / n,
            correct_rate: samples
                .iter()
                .filter(|s| s.eval.status.is_correct())
                .count() as f64
                / n,
            not_okay_ratio: not_okay_ratio(&cots, OKAY_PREFIX),
            clipping_ratio: clipping_ratio(samples),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub m: u32,
    pub n: u32,
    pub aggregation: AggregationSpec,
    pub score_weights: ScoreWeights,
    pub temperature: f64,
    pub max_response_tokens: usize,
    pub budget: PromptBudget,
    pub first_turn_example: bool,
    /// Upper bound on concurrently running trajectories; 0 means no cap.
    pub parallelism: usize,
    pub std_epsilon: f64,
}

impl RolloutConfig {
    pub fn new(m: u32, n: u32, aggregation: AggregationSpec, budget: PromptBudget) -> Self {
        Self {
            m,
            n,
            aggregation,
            score_weights: ScoreWeights::default(),
            temperature: 0.9,
            max_response_tokens: 16384,
            budget,
            first_turn_example: true,
            parallelism: 0,
            std_epsilon: DEFAULT_STD_EPSILON,
        }
    }
}

/// A task as seen by the rollout engine.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RolloutTask {
    pub task_id: String,
    pub task_text: String,
}

/// Collaborators shared by every trajectory of a step.
#[derive(Clone, Copy)]
pub struct RolloutEnv<'a> {
    pub template: &'a PromptTemplate,
    pub counter: &'a dyn TokenCounter,
    pub rules: &'a RuleSet,
    pub policy: &'a dyn Policy,
    pub executor: &'a dyn Executor,
}

#[derive(Debug, Error)]
pub enum StepError {
    #[error("invalid rollout config: {0}")]
    Config(String),
    #[error(transparent)]
    Context(#[from] ContextError),
    #[error(transparent)]
    Credit(#[from] CreditError),
    #[error(
        "{source} (task {task_id:?}, trajectory {trajectory_index}, turn {turn_index}; {completed_turns} turns completed)"
    )]
    Executor {
        task_id: String,
        trajectory_index: u32,
        turn_index: u32,
        completed_turns: usize,
        source: ExecutorError,
    },
    #[error("executor broke the result contract on task {task_id:?}: {source}")]
    BadEval { task_id: String, source: ScoreError },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutput {
    pub trajectories: Vec<Trajectory>,
    /// Sorted by (task_id, trajectory_index, turn_index).
    pub samples: Vec<TrainingSample>,
    pub stats: StepStats,
}

fn validate(tasks: &[RolloutTask], cfg: &RolloutConfig) -> Result<(), StepError> {
    let bad = |m: &str| Err(StepError::Config(m.to_owned()));
    if cfg.m == 0 || cfg.n == 0 {
        return bad("m and n must be positive");
    }
    if tasks.is_empty() {
        return bad("task list is empty");
    }
    let mut ids: Vec<&str> = tasks.iter().map(|t| t.task_id.as_str()).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return bad("task ids must be unique");
    }
    if cfg.max_response_tokens == 0 {
        return bad("max_response_tokens must be positive");
    }
    if !(cfg.temperature.is_finite() && cfg.temperature > 0.0) {
        return bad("temperature must be positive");
    }
    cfg.aggregation.validate()?;
    Ok(())
}

fn turn_from_response(
    env: &RolloutEnv<'_>,
    task_id: &str,
    turn_index: u32,
    seed: u64,
    outcome: Result<RawResponse, PolicyError>,
) -> Result<(TurnRecord, String, usize, bool), ExecutorError> {
    let failed = |msg: String| EvalResult::failed(EvalStatus::ParseError, None, msg);
    let raw = match outcome {
        Ok(raw) => raw,
        Err(e) => {
            let rec = TurnRecord {
                turn_index,
                kernel_source: String::new(),
                cot_summary: String::new(),
                eval: failed(e.to_string()),
            };
            return Ok((rec, String::new(), 0, false));
        }
    };
    let parsed = if raw.truncated {
        Err(format!(
            "response truncated at {} tokens",
            raw.response_tokens
        ))
    } else {
        parse_response(&raw.text)
    };
    let (rec, cot) = match parsed {
        Err(msg) => (
            TurnRecord {
                turn_index,
                kernel_source: String::new(),
                cot_summary: String::new(),
                eval: failed(msg),
            },
            raw.text.clone(),
        ),
        Ok(p) => {
            let verdict = check_candidate(&p.kernel_source, env.rules);
            let eval = if verdict.accepted {
                env.executor.evaluate(task_id, &p.kernel_source, seed)?
            } else {
                EvalResult::failed(EvalStatus::GuardRejected, None, verdict.summary())
            };
            (
                TurnRecord {
                    turn_index,
                    kernel_source: p.kernel_source,
                    cot_summary: p.cot_summary,
                    eval,
                },
                p.cot,
            )
        }
    };
    Ok((rec, cot, raw.response_tokens, raw.truncated))
}

/// Rolls out one trajectory of `cfg.n` sequential turns.
pub fn run_trajectory(
    env: &RolloutEnv<'_>,
    task: &RolloutTask,
    trajectory_index: u32,
    trajectory_seed: u64,
    cfg: &RolloutConfig,
) -> Result<Trajectory, StepError> {
    let mut turns: Vec<Turn> = Vec::with_capacity(cfg.n as usize);
    let mut history: Vec<TurnRecord> = Vec::with_capacity(cfg.n as usize);
    for turn_index in 1..=cfg.n {
        let prompt = env.template.build_context(
            &task.task_text,
            &history,
            &cfg.budget,
            env.counter,
            cfg.first_turn_example,
        )?;
        let visible = &history[history.len() - prompt.included_turns.len()..];
        let seed = seed::turn_seed(trajectory_seed, turn_index);
        let req = PolicyRequest {
            task_id: &task.task_id,
            prompt: &prompt,
            visible_turns: visible,
            seed,
            temperature: cfg.temperature,
            max_response_tokens: cfg.max_response_tokens,
        };
        let outcome = env.policy.generate(&req);
        let (record, cot_full, response_tokens, truncated) =
            turn_from_response(env, &task.task_id, turn_index, seed, outcome).map_err(
                |source| StepError::Executor {
                    task_id: task.task_id.clone(),
                    trajectory_index,
                    turn_index,
                    completed_turns: turns.len(),
                    source,
                },
            )?;
        let score = score_kernel(&record.eval, &cfg.score_weights).map_err(|source| {
            StepError::BadEval {
                task_id: task.task_id.clone(),
                source,
            }
        })?;
        history.push(record.clone());
        turns.push(Turn {
            record,
            context: prompt,
            cot_full,
            response_tokens,
            truncated,
            score,
        });
    }
    Ok(Trajectory {
        task_id: task.task_id.clone(),
        trajectory_index,
        policy_id: env.policy.id().to_owned(),
        seed: trajectory_seed,
        turns,
    })
}

/// Group-normalized advantages over all samples of one task. A group of a
/// single sample has nothing to compare against and gets advantage 0.
fn fill_advantages(samples: &mut [TrainingSample], epsilon: f64) -> Result<(), CreditError> {
    if samples.len() < 2 {
        samples.iter_mut().for_each(|s| s.advantage = 0.0);
        return Ok(());
    }
    let adv = normalize_group(&GroupRewards {
        rewards: samples.iter().map(|s| s.aggregated_reward).collect(),
        epsilon,
    })?;
    for (s, a) in samples.iter_mut().zip(adv) {
        s.advantage = a;
    }
    Ok(())
}

/// Runs one training step over every task.
pub fn run_training_step(
    tasks: &[RolloutTask],
    env: &RolloutEnv<'_>,
    cfg: &RolloutConfig,
    run_seed: u64,
    step: u64,
) -> Result<StepOutput, StepError> {
    validate(tasks, cfg)?;
    let jobs: Vec<(&RolloutTask, u32)> = tasks
        .iter()
        .flat_map(|t| (0..cfg.m).map(move |i| (t, i)))
        .collect();
    let run = |&(task, i): &(&RolloutTask, u32)| {
        run_trajectory(
            env,
            task,
            i,
            seed::trajectory_seed(run_seed, step, &task.task_id, i),
            cfg,
        )
    };
    let results: Vec<Result<Trajectory, StepError>> = if cfg.parallelism == 1 {
        jobs.iter().map(run).collect()
    } else if cfg.parallelism == 0 {
        jobs.par_iter().map(run).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.parallelism)
            .build()
            .map_err(|e| StepError::Config(e.to_string()))?;
        pool.install(|| jobs.par_iter().map(run).collect())
    };
    let mut trajectories = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    trajectories
        .sort_by(|a, b| (&a.task_id, a.trajectory_index).cmp(&(&b.task_id, b.trajectory_index)));

    let mut samples = Vec::with_capacity(trajectories.len() * cfg.n as usize);
    let mut start = 0;
    while start < trajectories.len() {
        let task_id = &trajectories[start].task_id;
        let end = start
            + trajectories[start..]
                .iter()
                .take_while(|t| &t.task_id == task_id)
                .count();
        let mut group = Vec::new();
        for traj in &trajectories[start..end] {
            group.extend(split_trajectory(traj, &cfg.aggregation)?);
        }
        fill_advantages(&mut group, cfg.std_epsilon)?;
        samples.extend(group);
        start = end;
    }
    let stats = StepStats::from_samples(step, &samples);
    Ok(StepOutput {
        trajectories,
        samples,
        stats,
    })
}

/// Policy backed by an OpenAI-style chat-completions endpoint.
#[cfg(feature = "chat-policy")]
pub mod chat {
    use super::{Policy, PolicyError, PolicyRequest, RawResponse};
    use serde_json::{json, Value};

    pub const ENDPOINT_VAR: &str = "POLICY_ENDPOINT";
    pub const TOKEN_VAR: &str = "POLICY_TOKEN";

    #[derive(Debug, Clone)]
    pub struct ChatPolicy {
        endpoint: String,
        token: Option<String>,
        model: String,
        id: String,
    }

    impl ChatPolicy {
        pub fn new(
            endpoint: impl Into<String>,
            token: Option<String>,
            model: impl Into<String>,
        ) -> Self {
            let model = model.into();
            Self {
                endpoint: endpoint.into(),
                token,
                id: format!("chat:{model}"),
                model,
            }
        }

        /// Reads the endpoint URL and optional bearer token from the environment.
        pub fn from_env(model: impl Into<String>) -> Result<Self, PolicyError> {
            let endpoint = std::env::var(ENDPOINT_VAR)
                .map_err(|_| PolicyError::Transport(format!("{ENDPOINT_VAR} is not set")))?;
            Ok(Self::new(endpoint, std::env::var(TOKEN_VAR).ok(), model))
        }

        pub fn request_body(&self, req: &PolicyRequest<'_>) -> Value {
            json!({
                "model": self.model,
                "messages": [{"role": "user", "content": req.prompt.text}],
                "temperature": req.temperature,
                "max_tokens": req.max_response_tokens,
                "seed": req.seed,
            })
        }
    }

    /// Extracts text, completion token count and truncation from a
    /// chat-completions response body.
    pub fn parse_completion(body: &Value, max_tokens: usize) -> Result<RawResponse, PolicyError> {
        let choice = &body["choices"][0];
        let text = choice["message"]["content"]
            .as_str()
            .ok_or_else(|| PolicyError::BadResponse("missing choices[0].message.content".into()))?
            .to_owned();
        let tokens = body["usage"]["completion_tokens"]
            .as_u64()
            .map(|t| t as usize);
        let truncated =
            choice["finish_reason"].as_str() == Some("length") || tokens == Some(max_tokens);
        let response_tokens = if truncated {
            max_tokens
        } else {
            tokens.unwrap_or(0).min(max_tokens)
        };
        Ok(RawResponse {
            text,
            response_tokens,
            truncated,
        })
    }

    impl Policy for ChatPolicy {
        fn id(&self) -> &str {
            &self.id
        }

        fn generate(&self, req: &PolicyRequest<'_>) -> Result<RawResponse, PolicyError> {
            let mut call = ureq::post(&self.endpoint).header("Content-Type", "application/json");
            if let Some(token) = &self.token {
                call = call.header("Authorization", &format!("Bearer {token}"));
            }
            let mut resp = call
                .send_json(self.request_body(req))
                .map_err(|e| PolicyError::Transport(e.to_string()))?;
            let body: Value = resp
                .body_mut()
                .read_json()
                .map_err(|e| PolicyError::BadResponse(e.to_string()))?;
            parse_completion(&body, req.max_response_tokens)
        }
    }
}
