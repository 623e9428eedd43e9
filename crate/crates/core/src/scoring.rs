//! Kernel scoring: evaluation outcomes, the scalar kernel score and the
//! `fast_p` threshold indicator.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Outcome category of one candidate evaluation.
///
/// Variants are declared in funnel order: a later category implies every
/// earlier check passed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalStatus {
    ParseError,
    GuardRejected,
    CompileError,
    RuntimeError,
    Incorrect,
    Correct,
}

impl EvalStatus {
    pub const ALL: [EvalStatus; 6] = [
        EvalStatus::ParseError,
        EvalStatus::GuardRejected,
        EvalStatus::CompileError,
        EvalStatus::RuntimeError,
        EvalStatus::Incorrect,
        EvalStatus::Correct,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EvalStatus::ParseError => "parse_error",
            EvalStatus::GuardRejected => "guard_rejected",
            EvalStatus::CompileError => "compile_error",
            EvalStatus::RuntimeError => "runtime_error",
            EvalStatus::Incorrect => "incorrect",
            EvalStatus::Correct => "correct",
        }
    }

    pub fn is_correct(self) -> bool {
        self == EvalStatus::Correct
    }
}

impl std::fmt::Display for EvalStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Result of evaluating one candidate program against its reference.
///
/// `runtime_ms` is present only for correct candidates. `baseline_ms` is the
/// reference wall time; it may be unknown when evaluation stopped before the
/// executor ran (parse or guard failures).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub status: EvalStatus,
    pub runtime_ms: Option<f64>,
    pub baseline_ms: Option<f64>,
    pub error_message: String,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScoreError {
    #[error("correct evaluation is missing a positive finite runtime_ms")]
    MissingRuntime,
    #[error("correct evaluation is missing a positive finite baseline_ms")]
    MissingBaseline,
    #[error("correct evaluation carries an error message: {0:?}")]
    UnexpectedMessage(String),
    #[error("{status} evaluation must not carry runtime_ms")]
    UnexpectedRuntime { status: EvalStatus },
    #[error("{status} evaluation must carry a nonempty error message")]
    MissingMessage { status: EvalStatus },
    #[error("baseline_ms must be positive and finite, got {0}")]
    BadBaseline(f64),
    #[error("score weights must be finite and nonnegative, got correctness={correctness} speedup={speedup}")]
    BadWeights { correctness: f64, speedup: f64 },
}

fn positive_finite(x: f64) -> bool {
    x.is_finite() && x > 0.0
}

impl EvalResult {
    pub fn correct(baseline_ms: f64, runtime_ms: f64) -> Self {
        Self {
            status: EvalStatus::Correct,
            runtime_ms: Some(runtime_ms),
            baseline_ms: Some(baseline_ms),
            error_message: String::new(),
        }
    }

    /// A non-correct result. `status` must not be [`EvalStatus::Correct`].
    pub fn failed(
        status: EvalStatus,
        baseline_ms: Option<f64>,
        message: impl Into<String>,
    ) -> Self {
        debug_assert!(status != EvalStatus::Correct);
        Self {
            status,
            runtime_ms: None,
            baseline_ms,
            error_message: message.into(),
        }
    }

    pub fn validate(&self) -> Result<(), ScoreError> {
        if let Some(b) = self.baseline_ms {
            if !positive_finite(b) {
                return Err(ScoreError::BadBaseline(b));
            }
        }
        if self.status.is_correct() {
            if !self.runtime_ms.is_some_and(positive_finite) {
                return Err(ScoreError::MissingRuntime);
            }
            if self.baseline_ms.is_none() {
                return Err(ScoreError::MissingBaseline);
            }
            if !self.error_message.is_empty() {
                return Err(ScoreError::UnexpectedMessage(self.error_message.clone()));
            }
        } else {
            if self.runtime_ms.is_some() {
                return Err(ScoreError::UnexpectedRuntime {
                    status: self.status,
                });
            }
            if self.error_message.is_empty() {
                return Err(ScoreError::MissingMessage {
                    status: self.status,
                });
            }
        }
        Ok(())
    }

    /// `baseline_ms / runtime_ms` for correct results, `None` otherwise.
    pub fn speedup(&self) -> Option<f64> {
        match (self.status, self.baseline_ms, self.runtime_ms) {
            (EvalStatus::Correct, Some(b), Some(r)) if r > 0.0 => Some(b / r),
            _ => None,
        }
    }
}

/// Weights of the correctness indicator and the speedup term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreWeights {
    pub correctness_weight: f64,
    pub speedup_weight: f64,
}

impl Default for ScoreWeights {
    fn default() -> Self {
        Self {
            correctness_weight: 0.3,
            speedup_weight: 1.0,
        }
    }
}

impl ScoreWeights {
    pub fn validate(&self) -> Result<(), ScoreError> {
        let ok = |w: f64| w.is_finite() && w >= 0.0;
        if ok(self.correctness_weight) && ok(self.speedup_weight) {
            Ok(())
        } else {
            Err(ScoreError::BadWeights {
                correctness: self.correctness_weight,
                speedup: self.speedup_weight,
            })
        }
    }
}

/// Kernel score: `w_c * 1{correct} + w_s * speedup * 1{correct}`.
///
/// Every non-correct status, including guard rejection, scores exactly 0.
pub fn score_kernel(eval: &EvalResult, weights: &ScoreWeights) -> Result<f64, ScoreError> {
    eval.validate()?;
    weights.validate()?;
    Ok(match eval.speedup() {
        Some(speedup) => weights.correctness_weight + weights.speedup_weight * speedup,
        None => 0.0,
    })
}

/// True iff the evaluation is correct with speedup at least `p` (inclusive).
///
/// # Panics
/// If `p` is not positive.
pub fn fast_p(eval: &EvalResult, p: f64) -> bool {
    assert!(p > 0.0, "fast_p threshold must be positive, got {p}");
    eval.speedup().is_some_and(|s| s >= p)
}
