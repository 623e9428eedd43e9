//! Host side of the out-of-process evaluation worker: newline-delimited JSON
//! over the worker's stdin/stdout.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::guardrails::DEFAULT_ENTRY_CLASS;
use crate::rollout::{Executor, ExecutorError};
use crate::scoring::{EvalResult, EvalStatus};

/// One evaluation request. Field order is the wire key order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRequest {
    pub id: String,
    pub op: String,
    pub reference_source: String,
    pub candidate_source: String,
    pub entry_class: String,
    pub reference_class: String,
    pub trials: u32,
    pub timing_iters: u32,
    pub timeout_s: f64,
    pub seed: u64,
    pub rtol: f64,
    pub atol: f64,
}

/// Worker reply. Field order is the wire key order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalResponse {
    pub id: String,
    pub status: EvalStatus,
    pub error_message: String,
    pub runtime_ms: Option<f64>,
    pub baseline_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WireError {
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("response id {got:?} does not match request id {want:?}")]
    IdMismatch { want: String, got: String },
    #[error("worker may not report guard_rejected")]
    GuardStatus,
    #[error("response violates the result contract: {0}")]
    Contract(String),
}

impl EvalRequest {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("request serializes")
    }

    pub fn from_line(line: &str) -> Result<Self, WireError> {
        serde_json::from_str(line.trim_end()).map_err(|e| WireError::Malformed(e.to_string()))
    }
}

impl EvalResponse {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("response serializes")
    }

    pub fn from_line(line: &str) -> Result<Self, WireError> {
        serde_json::from_str(line.trim_end()).map_err(|e| WireError::Malformed(e.to_string()))
    }

    /// Checks the reply against its request and converts it to a result.
    pub fn into_result(self, request_id: &str) -> Result<EvalResult, WireError> {
        if self.id != request_id {
            return Err(WireError::IdMismatch {
                want: request_id.to_owned(),
                got: self.id,
            });
        }
        if self.status == EvalStatus::GuardRejected {
            return Err(WireError::GuardStatus);
        }
        let r = EvalResult {
            status: self.status,
            runtime_ms: self.runtime_ms,
            baseline_ms: self.baseline_ms,
            error_message: self.error_message,
        };
        r.validate()
            .map_err(|e| WireError::Contract(e.to_string()))?;
        Ok(r)
    }
}

/// A task evaluated by the worker.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelTask {
    pub task_id: String,
    pub reference_source: String,
    #[serde(default)]
    pub task_text: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerConfig {
    pub command: Vec<String>,
    pub workers: usize,
    pub entry_class: String,
    pub reference_class: String,
    pub trials: u32,
    pub timing_iters: u32,
    pub timeout_s: f64,
    pub rtol: f64,
    pub atol: f64,
}

impl WorkerConfig {
    pub fn new(command: Vec<String>) -> Self {
        Self {
            command,
            workers: 1,
            entry_class: DEFAULT_ENTRY_CLASS.to_owned(),
            reference_class: "Model".to_owned(),
            trials: 5,
            timing_iters: 20,
            timeout_s: 60.0,
            rtol: 1e-4,
            atol: 1e-4,
        }
    }

    /// How long the host waits for one reply before declaring the worker
    /// hung: the worker's own timeout plus slack for timing runs.
    fn reply_deadline(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_s * 2.0 + 30.0)
    }
}

struct WorkerProc {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
}

impl WorkerProc {
    fn spawn(cmd: &[String]) -> std::io::Result<Self> {
        let mut child = Command::new(&cmd[0])
            .args(&cmd[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(Self {
            child,
            stdin,
            lines: rx,
        })
    }

    fn call(&mut self, line: &str, deadline: Duration) -> Result<String, String> {
        self.stdin
            .write_all(format!("{line}\n").as_bytes())
            .and_then(|_| self.stdin.flush())
            .map_err(|e| format!("write to worker failed: {e}"))?;
        match self.lines.recv_timeout(deadline) {
            Ok(Ok(reply)) => Ok(reply),
            Ok(Err(e)) => Err(format!("read from worker failed: {e}")),
            Err(RecvTimeoutError::Timeout) => {
                Err(format!("no reply within {:.0} s", deadline.as_secs_f64()))
            }
            Err(RecvTimeoutError::Disconnected) => Err("worker exited".to_owned()),
        }
    }
}

impl Drop for WorkerProc {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Pool of worker processes, spawned lazily up to `workers`. A worker that
/// dies or hangs is discarded and the request retried once on a fresh one.
pub struct WorkerExecutor {
    cfg: WorkerConfig,
    tasks: BTreeMap<String, KernelTask>,
    idle: Mutex<(Vec<WorkerProc>, usize)>,
    freed: Condvar,
    next_id: AtomicU64,
}

impl WorkerExecutor {
    pub fn new(cfg: WorkerConfig, tasks: &[KernelTask]) -> Self {
        assert!(!cfg.command.is_empty() && cfg.workers > 0);
        Self {
            cfg,
            tasks: tasks
                .iter()
                .map(|t| (t.task_id.clone(), t.clone()))
                .collect(),
            idle: Mutex::new((Vec::new(), 0)),
            freed: Condvar::new(),
            next_id: AtomicU64::new(1),
        }
    }

    pub fn request(&self, task: &KernelTask, candidate: &str, seed: u64) -> EvalRequest {
        EvalRequest {
            id: format!("req-{}", self.next_id.fetch_add(1, Ordering::Relaxed)),
            op: "evaluate".to_owned(),
            reference_source: task.reference_source.clone(),
            candidate_source: candidate.to_owned(),
            entry_class: self.cfg.entry_class.clone(),
            reference_class: self.cfg.reference_class.clone(),
            trials: self.cfg.trials,
            timing_iters: self.cfg.timing_iters,
            timeout_s: self.cfg.timeout_s,
            seed,
            rtol: self.cfg.rtol,
            atol: self.cfg.atol,
        }
    }

    fn checkout(&self) -> Result<WorkerProc, ExecutorError> {
        let mut guard = self.idle.lock().expect("pool lock");
        loop {
            if let Some(p) = guard.0.pop() {
                return Ok(p);
            }
            if guard.1 < self.cfg.workers {
                guard.1 += 1;
                drop(guard);
                return WorkerProc::spawn(&self.cfg.command).map_err(|e| {
                    self.release(None);
                    ExecutorError::Unavailable(format!(
                        "cannot start worker {:?}: {e}",
                        self.cfg.command[0]
                    ))
                });
            }
            guard = self.freed.wait(guard).expect("pool lock");
        }
    }

    fn release(&self, proc_: Option<WorkerProc>) {
        let mut guard = self.idle.lock().expect("pool lock");
        match proc_ {
            Some(p) => guard.0.push(p),
            None => guard.1 -= 1,
        }
        self.freed.notify_one();
    }

    fn round_trip(&self, req: &EvalRequest) -> Result<EvalResult, String> {
        let mut p = self.checkout().map_err(|e| e.to_string())?;
        match p.call(&req.to_line(), self.cfg.reply_deadline()) {
            Ok(line) => {
                self.release(Some(p));
                EvalResponse::from_line(&line)
                    .and_then(|r| r.into_result(&req.id))
                    .map_err(|e| e.to_string())
            }
            Err(e) => {
                drop(p);
                self.release(None);
                Err(e)
            }
        }
    }
}

impl Executor for WorkerExecutor {
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
        let req = self.request(task, kernel_source, seed);
        match self.round_trip(&req) {
            Ok(r) => Ok(r),
            Err(_) => {
                let req = self.request(task, kernel_source, seed);
                self.round_trip(&req).map_err(ExecutorError::Unavailable)
            }
        }
    }
}
