//! Multi-turn reinforcement learning for iterative kernel optimization:
//! scoring, reward-hacking guards, turn-level credit assignment, the GRPO
//! objective, context construction, rollout orchestration, a synthetic
//! environment, evaluation metrics and run storage.

pub mod config;
pub mod context;
pub mod credit;
pub mod grpo;
pub mod guardrails;
pub mod metrics;
pub mod rollout;
pub mod scoring;
pub mod seed;
pub mod simenv;
pub mod store;
pub mod worker;

#[cfg(feature = "chat-policy")]
pub use rollout::chat;
