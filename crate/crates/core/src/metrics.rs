//! Trajectory metrics, best@k / avg@k / pass@k estimators, and the
//! fixed-budget parallel-versus-sequential report.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{FromPrimitive, Num, One, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rollout::Trajectory;
use crate::scoring::{fast_p, EvalResult};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("trajectory has no turns")]
    EmptyTrajectory,
    #[error("need 1 <= k <= n, got k={k} n={n}")]
    BadK { k: usize, n: usize },
    #[error("need c <= n, got c={c} n={n}")]
    BadCount { c: u64, n: u64 },
    #[error("values must be finite")]
    NonFinite,
    #[error("config {num_traj}x{num_turns} does not match budget {budget}")]
    BudgetMismatch {
        num_traj: usize,
        num_turns: usize,
        budget: usize,
    },
    #[error("thresholds must be positive and finite")]
    BadThreshold,
    #[error("task {task:?} has {have_traj} trajectories of at least {have_turns} turns; need {need_traj} of {need_turns}")]
    Shortfall {
        task: String,
        need_traj: usize,
        need_turns: usize,
        have_traj: usize,
        have_turns: usize,
    },
    #[error("no tasks to report on")]
    NoData,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FastPFlag {
    pub p: f64,
    pub hit: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMetric {
    pub correct: bool,
    /// Best speedup over correct turns; 0 if none is correct.
    pub performance: f64,
    pub fast_p_flags: Vec<FastPFlag>,
}

fn check_thresholds(thresholds: &[f64]) -> Result<(), MetricsError> {
    if thresholds.iter().all(|p| p.is_finite() && *p > 0.0) {
        Ok(())
    } else {
        Err(MetricsError::BadThreshold)
    }
}

pub fn metric_from_evals(
    evals: &[EvalResult],
    thresholds: &[f64],
) -> Result<TrajectoryMetric, MetricsError> {
    if evals.is_empty() {
        return Err(MetricsError::EmptyTrajectory);
    }
    check_thresholds(thresholds)?;
    let performance = evals
        .iter()
        .filter_map(EvalResult::speedup)
        .fold(0.0, f64::max);
    Ok(TrajectoryMetric {
        correct: evals.iter().any(|e| e.status.is_correct()),
        performance,
        fast_p_flags: thresholds
            .iter()
            .map(|&p| FastPFlag {
                p,
                hit: evals.iter().any(|e| fast_p(e, p)),
            })
            .collect(),
    })
}

pub fn trajectory_metric(
    traj: &Trajectory,
    thresholds: &[f64],
) -> Result<TrajectoryMetric, MetricsError> {
    let evals: Vec<EvalResult> = traj.turns.iter().map(|t| t.record.eval.clone()).collect();
    metric_from_evals(&evals, thresholds)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateMethod {
    ExactEnumeration,
    ClosedForm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupEstimate {
    pub metric_name: String,
    pub k: usize,
    pub n: usize,
    pub estimate: f64,
    pub method: EstimateMethod,
}

/// `C(n, k)` as u128, or `None` on overflow.
fn binomial_u128(n: u64, k: u64) -> Option<u128> {
    if k > n {
        return Some(0);
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        // acc * (n - i) is divisible by i + 1 because acc = C(n, i).
        acc = acc.checked_mul(u128::from(n - i))? / u128::from(i + 1);
    }
    Some(acc)
}

fn check_pass(n: u64, c: u64, k: u64) -> Result<(), MetricsError> {
    if c > n {
        return Err(MetricsError::BadCount { c, n });
    }
    if k == 0 || k > n {
        return Err(MetricsError::BadK {
            k: k as usize,
            n: n as usize,
        });
    }
    Ok(())
}

const F64_EXACT: u128 = 1 << 53;

/// Unbiased pass@k: `1 - C(n-c, k) / C(n, k)`.
///
/// Uses exact integer binomials while they fit in the f64 mantissa, and the
/// product `1 - prod_{i=n-c+1}^{n} (1 - k/i)` beyond that.
pub fn pass_at_k(n: u64, c: u64, k: u64) -> Result<f64, MetricsError> {
    check_pass(n, c, k)?;
    if n - c < k {
        return Ok(1.0);
    }
    if c == 0 {
        return Ok(0.0);
    }
    if let (Some(num), Some(den)) = (binomial_u128(n - c, k), binomial_u128(n, k)) {
        if den < F64_EXACT {
            return Ok((den - num) as f64 / den as f64);
        }
    }
    let mut keep = 1.0;
    for i in (n - c + 1)..=n {
        keep *= 1.0 - k as f64 / i as f64;
    }
    Ok(1.0 - keep)
}

fn binomial_big(n: u64, k: u64) -> BigInt {
    if k > n {
        return BigInt::zero();
    }
    let mut acc = BigInt::one();
    for i in 0..k {
        acc = acc * BigInt::from(n - i) / BigInt::from(i + 1);
    }
    acc
}

/// pass@k as an exact rational.
pub fn pass_at_k_exact(n: u64, c: u64, k: u64) -> Result<BigRational, MetricsError> {
    check_pass(n, c, k)?;
    let ratio = BigRational::new(binomial_big(n - c, k), binomial_big(n, k));
    Ok(BigRational::one() - ratio)
}

/// Rank-weighted estimator of `E[max of a uniform k-subset]`:
/// `sum_{j=k}^{n} v_(j) C(j-1, k-1) / C(n, k)` over ascending order
/// statistics. Weights follow `w_n = k/n`, `w_{j-1} = w_j (j-k)/(j-1)`.
pub fn best_at_k_generic<T>(values: &[T], k: usize) -> Result<T, MetricsError>
where
    T: Clone + PartialOrd + Num + FromPrimitive,
{
    let n = values.len();
    if k == 0 || k > n {
        return Err(MetricsError::BadK { k, n });
    }
    let from = |x: usize| T::from_usize(x).expect("representable count");
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("comparable values"));
    let mut w = from(k) / from(n);
    let mut acc = T::zero();
    for j in (k..=n).rev() {
        acc = acc + sorted[j - 1].clone() * w.clone();
        if j > k {
            w = w * from(j - k) / from(j - 1);
        }
    }
    Ok(acc)
}

pub fn best_at_k(values: &[f64], k: usize) -> Result<f64, MetricsError> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(MetricsError::NonFinite);
    }
    best_at_k_generic(values, k)
}

pub fn best_at_k_exact(values: &[BigRational], k: usize) -> Result<BigRational, MetricsError> {
    best_at_k_generic(values, k)
}

/// Mean of `values`; `k` is only checked and recorded.
pub fn avg_at_k(values: &[f64], k: usize) -> Result<f64, MetricsError> {
    let n = values.len();
    if k == 0 || k > n {
        return Err(MetricsError::BadK { k, n });
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(MetricsError::NonFinite);
    }
    Ok(values.iter().sum::<f64>() / n as f64)
}

/// Evaluations per task: trajectories in index order, turns in order.
pub type TaskEvals = BTreeMap<String, Vec<Vec<EvalResult>>>;

fn window<'a>(
    task: &str,
    trajs: &'a [Vec<EvalResult>],
    num_traj: usize,
    num_turns: usize,
) -> Result<Vec<&'a [EvalResult]>, MetricsError> {
    let long_enough = trajs.iter().take_while(|t| t.len() >= num_turns).count();
    if long_enough < num_traj {
        return Err(MetricsError::Shortfall {
            task: task.to_owned(),
            need_traj: num_traj,
            need_turns: num_turns,
            have_traj: trajs.len(),
            have_turns: trajs.iter().map(Vec::len).min().unwrap_or(0),
        });
    }
    Ok(trajs[..num_traj].iter().map(|t| &t[..num_turns]).collect())
}

fn csv_escape(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub budget: usize,
    pub num_traj: usize,
    pub num_turns: usize,
    /// Mean over tasks of the best speedup among all sampled turns.
    pub performance: f64,
    /// Fraction of tasks with any correct turn.
    pub correctness: f64,
    pub per_task: BTreeMap<String, (f64, bool)>,
}

impl ScalingRow {
    pub fn label(&self) -> String {
        format!("{}x{}", self.num_traj, self.num_turns)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub rows: Vec<ScalingRow>,
}

/// Best-of-all-samples performance and correctness per configuration of
/// `num_traj` trajectories times `num_turns` turns, each using exactly
/// `budget` samples per task.
pub fn scaling_report(
    data: &TaskEvals,
    configs: &[(usize, usize)],
    budget: usize,
) -> Result<ScalingReport, MetricsError> {
    if data.is_empty() {
        return Err(MetricsError::NoData);
    }
    let mut rows = Vec::with_capacity(configs.len());
    for &(num_traj, num_turns) in configs {
        if num_traj == 0 || num_turns == 0 || num_traj * num_turns != budget {
            return Err(MetricsError::BudgetMismatch {
                num_traj,
                num_turns,
                budget,
            });
        }
        let mut per_task = BTreeMap::new();
        for (task, trajs) in data {
            let mut best = 0.0f64;
            let mut correct = false;
            for t in window(task, trajs, num_traj, num_turns)? {
                let m = metric_from_evals(t, &[])?;
                best = best.max(m.performance);
                correct |= m.correct;
            }
            per_task.insert(task.clone(), (best, correct));
        }
        let count = per_task.len() as f64;
        rows.push(ScalingRow {
            budget,
            num_traj,
            num_turns,
            performance: per_task.values().map(|v| v.0).sum::<f64>() / count,
            correctness: per_task.values().filter(|v| v.1).count() as f64 / count,
            per_task,
        });
    }
    Ok(ScalingReport { rows })
}

impl ScalingReport {
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{:>6} {:>6} {:>7} {:>12} {:>12}\n",
            "Total", "Traj", "Turns", "Performance", "Correctness"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:>6} {:>6} {:>7} {:>12.4} {:>12.4}",
                r.budget, r.num_traj, r.num_turns, r.performance, r.correctness
            );
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,config,task,value\n");
        for r in &self.rows {
            let cfg = r.label();
            for (task, (perf, corr)) in &r.per_task {
                let task = csv_escape(task);
                let _ = writeln!(out, "performance,{cfg},{task},{perf}");
                let _ = writeln!(out, "correctness,{cfg},{task},{}", u8::from(*corr));
            }
            let _ = writeln!(out, "performance,{cfg},ALL,{}", r.performance);
            let _ = writeln!(out, "correctness,{cfg},ALL,{}", r.correctness);
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub metric: String,
    pub best: f64,
    pub avg: f64,
    pub per_task: BTreeMap<String, (f64, f64)>,
}

/// Table-1-shaped report: best@k and avg@k of correctness, performance and
/// each fast_p, averaged over tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: usize,
    pub turns: usize,
    pub rows: Vec<EvalRow>,
}

fn fmt_p(p: f64) -> String {
    let s = format!("{p}");
    if s.contains('.') {
        s
    } else {
        format!("{s}.0")
    }
}

/// Uses every stored trajectory of at least `turns` turns per task (at
/// least `k` required), each truncated to its first `turns` turns.
pub fn eval_report(
    data: &TaskEvals,
    k: usize,
    turns: usize,
    thresholds: &[f64],
) -> Result<EvalReport, MetricsError> {
    if data.is_empty() {
        return Err(MetricsError::NoData);
    }
    if k == 0 || turns == 0 {
        return Err(MetricsError::BadK { k, n: 0 });
    }
    check_thresholds(thresholds)?;
    let mut names = vec!["correctness".to_owned(), "performance".to_owned()];
    names.extend(thresholds.iter().map(|p| format!("fast_{}", fmt_p(*p))));
    let mut rows: Vec<EvalRow> = names
        .into_iter()
        .map(|metric| EvalRow {
            metric,
            best: 0.0,
            avg: 0.0,
            per_task: BTreeMap::new(),
        })
        .collect();
    for (task, trajs) in data {
        let usable = trajs.iter().take_while(|t| t.len() >= turns).count();
        let metrics = window(task, trajs, usable.max(k), turns)?
            .into_iter()
            .map(|t| metric_from_evals(t, thresholds))
            .collect::<Result<Vec<_>, _>>()?;
        let mut columns: Vec<Vec<f64>> = vec![
            metrics
                .iter()
                .map(|m| f64::from(u8::from(m.correct)))
                .collect(),
            metrics.iter().map(|m| m.performance).collect(),
        ];
        for i in 0..thresholds.len() {
            columns.push(
                metrics
                    .iter()
                    .map(|m| f64::from(u8::from(m.fast_p_flags[i].hit)))
                    .collect(),
            );
        }
        for (row, values) in rows.iter_mut().zip(columns) {
            row.per_task.insert(
                task.clone(),
                (best_at_k(&values, k)?, avg_at_k(&values, k)?),
            );
        }
    }
    for row in &mut rows {
        let count = row.per_task.len() as f64;
        row.best = row.per_task.values().map(|v| v.0).sum::<f64>() / count;
        row.avg = row.per_task.values().map(|v| v.1).sum::<f64>() / count;
    }
    Ok(EvalReport { k, turns, rows })
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let best = format!("best@{}", self.k);
        let avg = format!("avg@{}", self.k);
        let mut out = format!("{:<14} {:>10} {:>10}\n", "Metric", best, avg);
        for r in &self.rows {
            let _ = writeln!(out, "{:<14} {:>10.4} {:>10.4}", r.metric, r.best, r.avg);
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let cfg = format!("k{}_turns{}", self.k, self.turns);
        let mut out = String::from("metric,config,task,value\n");
        for r in &self.rows {
            for (task, (b, a)) in &r.per_task {
                let task = csv_escape(task);
                let _ = writeln!(out, "{}.best@{},{cfg},{task},{b}", r.metric, self.k);
                let _ = writeln!(out, "{}.avg@{},{cfg},{task},{a}", r.metric, self.k);
            }
            let _ = writeln!(out, "{}.best@{},{cfg},ALL,{}", r.metric, self.k, r.best);
            let _ = writeln!(out, "{}.avg@{},{cfg},ALL,{}", r.metric, self.k, r.avg);
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
