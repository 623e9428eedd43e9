//! Run configuration: one JSON document, validated field by field.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::{PromptBudget, WORD_COUNTER_ID};
use crate::credit::{AggregationMode, AggregationSpec};
use crate::grpo::GrpoConfig;
use crate::rollout::RolloutConfig;
use crate::scoring::ScoreWeights;
use crate::seed::hash_parts;
use crate::simenv::{Difficulty, ScriptedKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleEntry {
    /// First step (1-based) using `value`.
    pub at_step: u64,
    pub value: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicySpec {
    Scripted {
        scripted: ScriptedKind,
    },
    /// Chat-completions endpoint taken from the environment.
    External {
        model: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ExecutorSpec {
    Simenv {
        #[serde(default)]
        noise: f64,
    },
    Worker {
        command: Vec<String>,
        #[serde(default = "one")]
        workers: usize,
        #[serde(default = "default_trials")]
        trials: u32,
        #[serde(default = "default_timing_iters")]
        timing_iters: u32,
        #[serde(default = "default_timeout")]
        timeout_s: f64,
        #[serde(default = "default_tol")]
        rtol: f64,
        #[serde(default = "default_tol")]
        atol: f64,
    },
}

fn one() -> usize {
    1
}
fn default_trials() -> u32 {
    5
}
fn default_timing_iters() -> u32 {
    20
}
fn default_timeout() -> f64 {
    60.0
}
fn default_tol() -> f64 {
    1e-4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskSource {
    Synthetic {
        seed: u64,
        count: usize,
        difficulty: Difficulty,
    },
    /// JSON list of synthetic tasks.
    SynthFile { path: PathBuf },
    /// JSON list of `{task_id, reference_source}` for the worker executor.
    KernelFile { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub m: u32,
    pub n: u32,
    pub gamma: f64,
    pub agg_mode: AggregationMode,
    pub score_weights: ScoreWeights,
    pub grpo: GrpoConfig,
    pub max_response_tokens: usize,
    pub max_response_tokens_schedule: Vec<ScheduleEntry>,
    pub context_budget_tokens: usize,
    pub first_turn_example: bool,
    pub policy: PolicySpec,
    pub executor: ExecutorSpec,
    pub seed: u64,
    pub tasks: TaskSource,
    pub runs_dir: PathBuf,
    pub run_id: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            m: 16,
            n: 4,
            gamma: 0.4,
            agg_mode: AggregationMode::Sum,
            score_weights: ScoreWeights::default(),
            grpo: GrpoConfig::default(),
            max_response_tokens: 16384,
            max_response_tokens_schedule: vec![ScheduleEntry {
                at_step: 30,
                value: 22000,
            }],
            context_budget_tokens: 32768,
            first_turn_example: true,
            policy: PolicySpec::Scripted {
                scripted: ScriptedKind::Greedy,
            },
            executor: ExecutorSpec::Simenv { noise: 0.0 },
            seed: 0,
            tasks: TaskSource::Synthetic {
                seed: 1,
                count: 20,
                difficulty: Difficulty::Mixed,
            },
            runs_dir: PathBuf::from("."),
            run_id: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("config is not valid JSON for this schema: {0}")]
    Parse(String),
    #[error("{field}: {message}")]
    Field {
        field: &'static str,
        message: String,
    },
}

fn field(field: &'static str, message: impl Into<String>) -> ConfigError {
    ConfigError::Field {
        field,
        message: message.into(),
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.m == 0 {
            return Err(field("m", "must be positive"));
        }
        if self.n == 0 {
            return Err(field("n", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(field(
                "gamma",
                format!("must lie in [0, 1], got {}", self.gamma),
            ));
        }
        self.score_weights
            .validate()
            .map_err(|e| field("score_weights", e.to_string()))?;
        self.grpo
            .validate()
            .map_err(|e| field("grpo", e.to_string()))?;
        if self.max_response_tokens == 0 {
            return Err(field("max_response_tokens", "must be positive"));
        }
        let mut prev = 0;
        for e in &self.max_response_tokens_schedule {
            if e.at_step <= prev {
                return Err(field(
                    "max_response_tokens_schedule",
                    "at_step values must be >= 1 and strictly increasing",
                ));
            }
            if e.value == 0 {
                return Err(field(
                    "max_response_tokens_schedule",
                    "values must be positive",
                ));
            }
            prev = e.at_step;
        }
        if self.context_budget_tokens == 0 {
            return Err(field("context_budget_tokens", "must be positive"));
        }
        if let PolicySpec::External { model } = &self.policy {
            if model.is_empty() {
                return Err(field("policy", "external policy needs a model name"));
            }
        }
        match (&self.executor, &self.tasks) {
            (
                ExecutorSpec::Simenv { noise },
                TaskSource::Synthetic { .. } | TaskSource::SynthFile { .. },
            ) => {
                if !(0.0..1.0).contains(noise) {
                    return Err(field(
                        "executor",
                        format!("noise must lie in [0, 1), got {noise}"),
                    ));
                }
            }
            (ExecutorSpec::Worker { .. }, TaskSource::KernelFile { .. }) => {}
            (ExecutorSpec::Simenv { .. }, _) => {
                return Err(field(
                    "tasks",
                    "simenv executor needs synthetic or synth_file tasks",
                ));
            }
            (ExecutorSpec::Worker { .. }, _) => {
                return Err(field("tasks", "worker executor needs kernel_file tasks"))
            }
        }
        if let ExecutorSpec::Worker {
            command,
            workers,
            trials,
            timing_iters,
            timeout_s,
            rtol,
            atol,
        } = &self.executor
        {
            if command.is_empty() || command[0].is_empty() {
                return Err(field("executor", "worker command must be nonempty"));
            }
            if *workers == 0 || *trials == 0 || *timing_iters == 0 {
                return Err(field(
                    "executor",
                    "workers, trials and timing_iters must be positive",
                ));
            }
            if !(timeout_s.is_finite() && *timeout_s > 0.0) {
                return Err(field("executor", "timeout_s must be positive"));
            }
            if !(*rtol >= 0.0 && *atol >= 0.0) {
                return Err(field("executor", "rtol and atol must be nonnegative"));
            }
        }
        if let TaskSource::Synthetic { count: 0, .. } = self.tasks {
            return Err(field("tasks", "count must be positive"));
        }
        if let Some(id) = &self.run_id {
            if id.is_empty()
                || !id
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
                || id.starts_with('.')
            {
                return Err(field("run_id", "use letters, digits, '-', '_' and '.'"));
            }
        }
        Ok(())
    }

    /// Response length limit in effect at 1-based `step`.
    pub fn max_tokens_at(&self, step: u64) -> usize {
        self.max_response_tokens_schedule
            .iter()
            .rfind(|e| e.at_step <= step)
            .map_or(self.max_response_tokens, |e| e.value)
    }

    /// Explicit run id, or one derived from the config contents.
    pub fn run_id(&self) -> String {
        match &self.run_id {
            Some(id) => id.clone(),
            None => {
                let canon = serde_json::to_string(&self.identity()).expect("config serializes");
                format!("run-{:016x}", hash_parts(&[canon.as_bytes()]))
            }
        }
    }

    /// The config minus where and under which name the run is stored. Two
    /// configs with equal identities produce the same run.
    pub fn identity(&self) -> Self {
        Self {
            runs_dir: PathBuf::from("."),
            run_id: None,
            ..self.clone()
        }
    }

    pub fn rollout_config(&self, step: u64, parallelism: usize) -> RolloutConfig {
        let mut r = RolloutConfig::new(
            self.m,
            self.n,
            AggregationSpec {
                mode: self.agg_mode,
                gamma: self.gamma,
            },
            PromptBudget {
                max_tokens: self.context_budget_tokens,
                counter_id: WORD_COUNTER_ID.to_owned(),
            },
        );
        r.score_weights = self.score_weights;
        r.temperature = self.grpo.temperature;
        r.max_response_tokens = self.max_tokens_at(step);
        r.first_turn_example = self.first_turn_example;
        r.parallelism = parallelism;
        r
    }
}
