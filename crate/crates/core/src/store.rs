//! Append-only run storage.
//!
//! Layout under the store root:
//!
//! ```text
//! runs/<run_id>/config.json     run record with the config snapshot
//! runs/<run_id>/turns.jsonl     one TurnRow per line
//! runs/<run_id>/stats.jsonl     one StepStats per line
//! runs/<run_id>/cot/step-N.jsonl  optional full chains of thought
//! ```
//!
//! Every record is written with a single `write_all` of a complete line, so
//! a reader sees at worst a torn final line, which it ignores.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::TaskEvals;
use crate::rollout::{StepStats, TrainingSample};
use crate::scoring::EvalResult;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("run {0:?} not found")]
    NotFound(String),
    #[error("run {0:?} already exists")]
    AlreadyExists(String),
    #[error("duplicate turn key step={step} task={task_id:?} trajectory={trajectory_index} turn={turn_index}")]
    Duplicate {
        step: u64,
        task_id: String,
        trajectory_index: u32,
        turn_index: u32,
    },
    #[error("invalid run id {0:?}")]
    BadRunId(String),
    #[error("{path}: line {line}: {message}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    /// Seconds since the Unix epoch.
    pub created_at: u64,
    pub seed: u64,
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRow {
    pub run_id: String,
    pub step: u64,
    pub task_id: String,
    pub trajectory_index: u32,
    pub turn_index: u32,
    pub kernel_source: String,
    pub cot_summary: String,
    pub eval: EvalResult,
    pub score: f64,
    pub aggregated_reward: f64,
    pub advantage: f64,
    pub response_tokens: usize,
    pub truncated: bool,
}

type TurnKey = (u64, String, u32, u32);

impl TurnRow {
    pub fn from_sample(run_id: &str, step: u64, s: &TrainingSample) -> Self {
        Self {
            run_id: run_id.to_owned(),
            step,
            task_id: s.task_id.clone(),
            trajectory_index: s.trajectory_index,
            turn_index: s.turn_index,
            kernel_source: s.response.kernel_source.clone(),
            cot_summary: s.response.cot_summary.clone(),
            eval: s.eval.clone(),
            score: s.score,
            aggregated_reward: s.aggregated_reward,
            advantage: s.advantage,
            response_tokens: s.response.response_tokens,
            truncated: s.truncated,
        }
    }

    fn key(&self) -> TurnKey {
        (
            self.step,
            self.task_id.clone(),
            self.trajectory_index,
            self.turn_index,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CotRow {
    pub task_id: String,
    pub trajectory_index: u32,
    pub turn_index: u32,
    pub cot_full: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ScanFilter {
    pub step: Option<u64>,
    pub task_id: Option<String>,
}

impl ScanFilter {
    fn matches(&self, r: &TurnRow) -> bool {
        self.step.is_none_or(|s| s == r.step)
            && self.task_id.as_ref().is_none_or(|t| *t == r.task_id)
    }
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, StoreError> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let complete = match text.rfind('\n') {
        Some(i) => &text[..=i],
        None => "",
    };
    complete
        .lines()
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| StoreError::Corrupt {
                path: path.to_owned(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

fn append_line<T: Serialize>(file: &mut File, value: &T) -> Result<(), StoreError> {
    let mut line = serde_json::to_string(value).expect("row serializes");
    line.push('\n');
    file.write_all(line.as_bytes())?;
    Ok(())
}

fn open_append(path: &Path) -> io::Result<File> {
    OpenOptions::new().create(true).append(true).open(path)
}

#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

impl Store {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn run_dir(&self, run_id: &str) -> PathBuf {
        self.root.join("runs").join(run_id)
    }

    fn existing_run_dir(&self, run_id: &str) -> Result<PathBuf, StoreError> {
        let dir = self.run_dir(run_id);
        if dir.join("config.json").is_file() {
            Ok(dir)
        } else {
            Err(StoreError::NotFound(run_id.to_owned()))
        }
    }

    pub fn run_exists(&self, run_id: &str) -> bool {
        self.existing_run_dir(run_id).is_ok()
    }

    pub fn create_run(&self, record: &RunRecord) -> Result<RunWriter, StoreError> {
        let id = &record.run_id;
        if id.is_empty()
            || !id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
            || id.starts_with('.')
        {
            return Err(StoreError::BadRunId(id.clone()));
        }
        let dir = self.run_dir(id);
        if dir.exists() {
            return Err(StoreError::AlreadyExists(id.clone()));
        }
        fs::create_dir_all(&dir)?;
        let tmp = dir.join("config.json.tmp");
        fs::write(
            &tmp,
            serde_json::to_string_pretty(record).expect("record serializes") + "\n",
        )?;
        fs::rename(&tmp, dir.join("config.json"))?;
        RunWriter::open(dir, id)
    }

    pub fn load_run(&self, run_id: &str) -> Result<RunRecord, StoreError> {
        let path = self.existing_run_dir(run_id)?.join("config.json");
        let text = fs::read_to_string(&path)?;
        serde_json::from_str(&text).map_err(|e| StoreError::Corrupt {
            path,
            line: e.line(),
            message: e.to_string(),
        })
    }

    /// Opens an existing run for appending. Turn rows of steps without a
    /// stats line (an interrupted step) are discarded.
    pub fn resume_run(&self, run_id: &str) -> Result<RunWriter, StoreError> {
        let dir = self.existing_run_dir(run_id)?;
        let last = self
            .read_stats(run_id)?
            .iter()
            .map(|s| s.step)
            .max()
            .unwrap_or(0);
        let turns = dir.join("turns.jsonl");
        let rows: Vec<TurnRow> = read_jsonl(&turns)?;
        let text = match fs::read_to_string(&turns) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(e.into()),
        };
        if rows.iter().any(|r| r.step > last) || !text.is_empty() && !text.ends_with('\n') {
            // Kept lines are copied verbatim, not re-serialized.
            let tmp = dir.join("turns.jsonl.tmp");
            let mut f = File::create(&tmp)?;
            for (line, r) in text.lines().zip(&rows) {
                if r.step <= last {
                    f.write_all(line.as_bytes())?;
                    f.write_all(b"\n")?;
                }
            }
            f.sync_all()?;
            fs::rename(&tmp, &turns)?;
        }
        RunWriter::open(dir, run_id)
    }

    pub fn list_runs(&self) -> Result<Vec<String>, StoreError> {
        let dir = self.root.join("runs");
        let mut out = Vec::new();
        match fs::read_dir(&dir) {
            Ok(entries) => {
                for e in entries {
                    let e = e?;
                    if e.path().join("config.json").is_file() {
                        out.push(e.file_name().to_string_lossy().into_owned());
                    }
                }
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => {}
            Err(e) => return Err(e.into()),
        }
        out.sort();
        Ok(out)
    }

    /// Rows in append order.
    pub fn read_turns(&self, run_id: &str) -> Result<Vec<TurnRow>, StoreError> {
        read_jsonl(&self.existing_run_dir(run_id)?.join("turns.jsonl"))
    }

    /// Matching rows ordered by (step, task_id, trajectory_index, turn_index).
    pub fn scan(&self, run_id: &str, filter: &ScanFilter) -> Result<Vec<TurnRow>, StoreError> {
        let mut rows: Vec<TurnRow> = self
            .read_turns(run_id)?
            .into_iter()
            .filter(|r| filter.matches(r))
            .collect();
        rows.sort_by_key(TurnRow::key);
        Ok(rows)
    }

    pub fn read_stats(&self, run_id: &str) -> Result<Vec<StepStats>, StoreError> {
        read_jsonl(&self.existing_run_dir(run_id)?.join("stats.jsonl"))
    }

    pub fn read_cot(&self, run_id: &str, step: u64) -> Result<Vec<CotRow>, StoreError> {
        read_jsonl(
            &self
                .existing_run_dir(run_id)?
                .join("cot")
                .join(format!("step-{step}.jsonl")),
        )
    }
}

/// Groups rows into per-task trajectories of ordered evaluations.
pub fn task_evals(rows: &[TurnRow]) -> TaskEvals {
    let mut grouped: BTreeMap<String, BTreeMap<u32, BTreeMap<u32, EvalResult>>> = BTreeMap::new();
    for r in rows {
        grouped
            .entry(r.task_id.clone())
            .or_default()
            .entry(r.trajectory_index)
            .or_default()
            .insert(r.turn_index, r.eval.clone());
    }
    grouped
        .into_iter()
        .map(|(task, trajs)| {
            (
                task,
                trajs
                    .into_values()
                    .map(|t| t.into_values().collect())
                    .collect(),
            )
        })
        .collect()
}

/// Single writer for one run.
#[derive(Debug)]
pub struct RunWriter {
    dir: PathBuf,
    run_id: String,
    turns: File,
    stats: File,
    keys: HashSet<TurnKey>,
}

impl RunWriter {
    fn open(dir: PathBuf, run_id: &str) -> Result<Self, StoreError> {
        let existing: Vec<TurnRow> = read_jsonl(&dir.join("turns.jsonl"))?;
        Ok(Self {
            turns: open_append(&dir.join("turns.jsonl"))?,
            stats: open_append(&dir.join("stats.jsonl"))?,
            keys: existing.iter().map(TurnRow::key).collect(),
            run_id: run_id.to_owned(),
            dir,
        })
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    pub fn append_turn(&mut self, row: &TurnRow) -> Result<(), StoreError> {
        let key = row.key();
        if self.keys.contains(&key) {
            return Err(StoreError::Duplicate {
                step: key.0,
                task_id: key.1,
                trajectory_index: key.2,
                turn_index: key.3,
            });
        }
        append_line(&mut self.turns, row)?;
        self.keys.insert(key);
        Ok(())
    }

    pub fn append_stats(&mut self, stats: &StepStats) -> Result<(), StoreError> {
        append_line(&mut self.stats, stats)
    }

    pub fn append_cot(&mut self, step: u64, rows: &[CotRow]) -> Result<(), StoreError> {
        let dir = self.dir.join("cot");
        fs::create_dir_all(&dir)?;
        let mut f = open_append(&dir.join(format!("step-{step}.jsonl")))?;
        for r in rows {
            append_line(&mut f, r)?;
        }
        Ok(())
    }

    pub fn sync(&self) -> Result<(), StoreError> {
        self.turns.sync_data()?;
        self.stats.sync_data()?;
        Ok(())
    }
}
