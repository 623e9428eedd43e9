//! Per-turn prompt construction: task text, instructions, prior kernels with
//! their summaries and feedback, under a token budget.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scoring::{EvalResult, EvalStatus};

/// Version of the prompt and feedback wording below. Bump on any change.
pub const TEMPLATE_VERSION: &str = "1";

const PARSE_ERROR: &str = "Your previous answer failed to be parsed due to not adhering to the desired formatting. Here is the error message: ";
const COMPILE_ERROR: &str = "Your previous answer failed to compile. Here is the error message: ";
const RUNTIME_ERROR: &str = "Your previous answer compiled successfully but had runtime errors. Here is the error message: ";
const INCORRECT: &str = "Your previous answer was incorrect. Here is the error message: ";
const CORRECT: &str =
    "Your previous answer was correct but can be made faster. Here is the speedup you achieved relative to the baseline: ";

const ARCH_HEADER: &str = "You are given the following architecture:\n";
const EXAMPLE_HEADER: &str = "Here is an example:\n\n";
const HISTORY_HEADER: &str = "Here are your previous attempts: \n";
const RESTART: &str = "Restart your reasoning process and generate new, complete code.";

const CUDA_INSTRUCTIONS: &str = "Replace pytorch operators in the given architecture with raw CUDA kernels, optimizing for performance on NVIDIA H100 (e.g. shared memory, kernel fusion, warp primitives, vectorization,...). Use torch.utils.cpp_extension.load_inline and name your optimized output architecture ModelNew. You are not allowed to use torch.nn (except for Parameter, containers, and init). The input and output have to be on CUDA device. Your answer must be the complete new architecture (no testing code, no other code): it will be evaluated and you will be given feedback on its correctness and speedup so you can keep iterating, trying to maximize the speedup. After your answer, summarize your changes in a few sentences.";

const CUDA_EXAMPLE: &str = r#"import torch.nn as nn
from torch.utils.cpp_extension import load_inline

# Define the custom CUDA kernel for element-wise addition
elementwise_add_source = """
#include <torch/extension.h>
#include <cuda_runtime.h>

__global__ void elementwise_add_kernel(const float* a, const float* b, float* out, int size) {
    int idx = blockIdx.x * blockDim.x + threadIdx.x;
    if (idx < size) {
        out[idx] = a[idx] + b[idx];
    }
}

torch::Tensor elementwise_add_cuda(torch::Tensor a, torch::Tensor b) {
    auto size = a.numel();
    auto out = torch::zeros_like(a);

    const int block_size = 256;
    const int num_blocks = (size + block_size - 1) / block_size;

    elementwise_add_kernel<<<num_blocks, block_size>>>(a.data_ptr<float>(), b.data_ptr<float>(), out.data_ptr<float>(), size);

    return out;
}
"""

elementwise_add_cpp_source = (
    "torch::Tensor elementwise_add_cuda(torch::Tensor a, torch::Tensor b);"
)

# Compile the inline CUDA code for element-wise addition
elementwise_add = load_inline(
    name="elementwise_add",
    cpp_sources=elementwise_add_cpp_source,
    cuda_sources=elementwise_add_source,
    functions=["elementwise_add_cuda"],
    verbose=True,
    extra_cflags=[""],
    extra_ldflags=[""],
)


class ModelNew(nn.Module):
    def __init__(self) -> None:
        super().__init__()
        self.elementwise_add = elementwise_add

    def forward(self, a, b):
        return self.elementwise_add.elementwise_add_cuda(a, b)
"#;

const SYNTH_INSTRUCTIONS: &str = "Choose optimizations from the catalog above to make the program as fast as possible while keeping it correct. Answer with one line `opt: <name>` per optimization inside a fenced code block. After your answer, summarize your changes in a few sentences.";

const SYNTH_EXAMPLE: &str =
    "```\nopt: tile\nopt: vectorize\n```\nTiled the loop and vectorized the inner body.\n";

/// Feedback text for one evaluated turn.
///
/// Guard rejections reuse the incorrect wording; their error message names
/// the violated rules. Correct speedups are printed with two decimals.
pub fn feedback_block(eval: &EvalResult) -> String {
    let msg = &eval.error_message;
    match eval.status {
        EvalStatus::ParseError => format!("{PARSE_ERROR}{msg}"),
        EvalStatus::CompileError => format!("{COMPILE_ERROR}{msg}"),
        EvalStatus::RuntimeError => format!("{RUNTIME_ERROR}{msg}"),
        EvalStatus::Incorrect | EvalStatus::GuardRejected => format!("{INCORRECT}{msg}"),
        EvalStatus::Correct => format!("{CORRECT}{:.2}", eval.speedup().unwrap_or(0.0)),
    }
}

/// One completed refinement turn as it appears in later contexts. The full
/// chain of thought is deliberately absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub turn_index: u32,
    pub kernel_source: String,
    pub cot_summary: String,
    pub eval: EvalResult,
}

/// Counts prompt tokens under some tokenization scheme.
pub trait TokenCounter: Send + Sync {
    fn id(&self) -> &str;
    fn count(&self, text: &str) -> usize;
}

/// Whitespace-delimited words times 1.3, rounded up.
#[derive(Debug, Clone, Copy, Default)]
pub struct WordCounter;

pub const WORD_COUNTER_ID: &str = "words_x1.3";

impl TokenCounter for WordCounter {
    fn id(&self) -> &str {
        WORD_COUNTER_ID
    }

    fn count(&self, text: &str) -> usize {
        let words = text.split_whitespace().count();
        (words * 13).div_ceil(10)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBudget {
    pub max_tokens: usize,
    pub counter_id: String,
}

impl PromptBudget {
    pub fn words(max_tokens: usize) -> Self {
        Self {
            max_tokens,
            counter_id: WORD_COUNTER_ID.to_owned(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub text: String,
    /// Turn indices of the history entries that survived truncation.
    pub included_turns: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ContextError {
    #[error("base prompt needs {base_tokens} tokens but the budget is {max_tokens}")]
    BudgetExceeded {
        base_tokens: usize,
        max_tokens: usize,
    },
    #[error("budget expects counter {expected:?}, got {actual:?}")]
    CounterMismatch { expected: String, actual: String },
    #[error("history turn indices must be positive and strictly increasing")]
    UnsortedHistory,
}

/// Instructions and one-shot format example surrounding the task text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub instructions: String,
    pub example: String,
}

impl PromptTemplate {
    /// Inline-CUDA instructions with the element-wise add example.
    pub fn cuda() -> Self {
        Self {
            instructions: CUDA_INSTRUCTIONS.to_owned(),
            example: CUDA_EXAMPLE.to_owned(),
        }
    }

    /// Instructions for the synthetic optimization environment.
    pub fn synthetic() -> Self {
        Self {
            instructions: SYNTH_INSTRUCTIONS.to_owned(),
            example: SYNTH_EXAMPLE.to_owned(),
        }
    }

    fn base(&self, task_text: &str) -> String {
        format!(
            "{ARCH_HEADER}{}\n\n{}",
            task_text.trim_end_matches('\n'),
            self.instructions
        )
    }

    fn assemble(&self, base: &str, turns: &[TurnRecord]) -> String {
        let mut out = base.to_owned();
        if turns.is_empty() {
            return out;
        }
        out.push_str("\n\n");
        out.push_str(HISTORY_HEADER);
        for t in turns {
            out.push('\n');
            out.push_str(t.kernel_source.trim_end_matches('\n'));
            out.push_str("\n\n");
            out.push_str(t.cot_summary.trim_end_matches('\n'));
            out.push_str("\n\n");
            out.push_str(&feedback_block(&t.eval));
            out.push('\n');
        }
        out.push('\n');
        out.push_str(RESTART);
        out
    }

    /// Builds the prompt for the next turn.
    ///
    /// The format example is appended only when the history is empty and
    /// `first_turn_example` is set. When the full history does not fit,
    /// whole turns are dropped from the front; if every turn is dropped the
    /// previous-attempts section is omitted.
    pub fn build_context(
        &self,
        task_text: &str,
        history: &[TurnRecord],
        budget: &PromptBudget,
        counter: &dyn TokenCounter,
        first_turn_example: bool,
    ) -> Result<Prompt, ContextError> {
        if budget.counter_id != counter.id() {
            return Err(ContextError::CounterMismatch {
                expected: budget.counter_id.clone(),
                actual: counter.id().to_owned(),
            });
        }
        let mut prev = 0;
        for t in history {
            if t.turn_index <= prev {
                return Err(ContextError::UnsortedHistory);
            }
            prev = t.turn_index;
        }
        let mut base = self.base(task_text);
        if history.is_empty() && first_turn_example {
            base.push_str(EXAMPLE_HEADER);
            base.push_str(&self.example);
        }
        let base_tokens = counter.count(&base);
        if base_tokens > budget.max_tokens {
            return Err(ContextError::BudgetExceeded {
                base_tokens,
                max_tokens: budget.max_tokens,
            });
        }
        for start in 0..history.len() {
            let text = self.assemble(&base, &history[start..]);
            if counter.count(&text) <= budget.max_tokens {
                return Ok(Prompt {
                    text,
                    included_turns: history[start..].iter().map(|t| t.turn_index).collect(),
                });
            }
        }
        Ok(Prompt {
            text: base,
            included_turns: Vec::new(),
        })
    }
}
