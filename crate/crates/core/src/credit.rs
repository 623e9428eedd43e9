//! Turn-level credit assignment and group-relative advantages.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default additive guard in the advantage denominator.
pub const DEFAULT_STD_EPSILON: f64 = 1e-8;

/// The advantage denominator uses the population standard deviation.
pub const STD_ESTIMATOR: &str = "population";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    /// Discounted suffix sum of future scores.
    Sum,
    /// Discounted suffix maximum of future scores.
    Max,
    /// Each turn keeps its own score.
    Greedy,
    /// Every turn receives the trajectory's best score.
    Outcome,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregationSpec {
    pub mode: AggregationMode,
    pub gamma: f64,
}

impl AggregationSpec {
    pub fn new(mode: AggregationMode, gamma: f64) -> Result<Self, CreditError> {
        let spec = Self { mode, gamma };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), CreditError> {
        if (0.0..=1.0).contains(&self.gamma) {
            Ok(())
        } else {
            Err(CreditError::BadGamma(self.gamma))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CreditError {
    #[error("turn scores must be nonempty")]
    EmptyScores,
    #[error("gamma must lie in [0, 1], got {0}")]
    BadGamma(f64),
    #[error("advantage normalization needs at least 2 rewards, got {0}")]
    GroupTooSmall(usize),
    #[error("non-finite value in rewards")]
    NonFinite,
}

/// Per-turn rewards `R_1..R_T` from per-turn kernel scores `r_1..r_T`.
///
/// Sum: `R_t = sum_{i>=t} gamma^(i-t) r_i`. Max: `R_t = max_{i>=t} gamma^(i-t) r_i`.
pub fn aggregate(scores: &[f64], spec: &AggregationSpec) -> Result<Vec<f64>, CreditError> {
    spec.validate()?;
    if scores.is_empty() {
        return Err(CreditError::EmptyScores);
    }
    let gamma = spec.gamma;
    let mut out = vec![0.0; scores.len()];
    match spec.mode {
        AggregationMode::Greedy => out.copy_from_slice(scores),
        AggregationMode::Outcome => {
            let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            out.fill(best);
        }
        AggregationMode::Sum => {
            let mut acc = 0.0;
            for (t, &r) in scores.iter().enumerate().rev() {
                acc = r + gamma * acc;
                out[t] = acc;
            }
        }
        AggregationMode::Max => {
            // max_i gamma^(i-t) r_i = max(r_t, gamma * R_{t+1}) since gamma >= 0.
            let mut acc = f64::NEG_INFINITY;
            for (t, &r) in scores.iter().enumerate().rev() {
                acc = if acc == f64::NEG_INFINITY {
                    r
                } else {
                    r.max(gamma * acc)
                };
                out[t] = acc;
            }
        }
    }
    Ok(out)
}

/// Rewards of one task's group of `m * n` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupRewards {
    pub rewards: Vec<f64>,
    pub epsilon: f64,
}

impl GroupRewards {
    pub fn new(rewards: Vec<f64>) -> Self {
        Self {
            rewards,
            epsilon: DEFAULT_STD_EPSILON,
        }
    }
}

/// `(r_i - mean) / (std + epsilon)` with the population std. A zero-variance
/// group yields all-zero advantages.
pub fn normalize_group(group: &GroupRewards) -> Result<Vec<f64>, CreditError> {
    let r = &group.rewards;
    if r.len() < 2 {
        return Err(CreditError::GroupTooSmall(r.len()));
    }
    if r.iter().any(|x| !x.is_finite()) {
        return Err(CreditError::NonFinite);
    }
    if r.iter().all(|x| *x == r[0]) {
        return Ok(vec![0.0; r.len()]);
    }
    let n = r.len() as f64;
    let rough = r.iter().sum::<f64>() / n;
    // One correction pass removes most of the rounding left in the mean.
    let mean = rough + r.iter().map(|x| x - rough).sum::<f64>() / n;
    let var = r.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    Ok(r.iter()
        .map(|x| (x - mean) / (std + group.epsilon))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(mode: AggregationMode, gamma: f64) -> AggregationSpec {
        AggregationSpec::new(mode, gamma).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn sum_example() {
        let r = aggregate(&[0.0, 1.3, 0.5], &spec(AggregationMode::Sum, 0.4)).unwrap();
        assert!(close(&r, &[0.6, 1.5, 0.5], 1e-12), "{r:?}");
    }

    #[test]
    fn max_example() {
        let r = aggregate(&[0.0, 1.3, 0.5], &spec(AggregationMode::Max, 0.4)).unwrap();
        assert!(close(&r, &[0.52, 1.3, 0.5], 1e-12), "{r:?}");
    }

    #[test]
    fn gamma_zero_sum_is_greedy() {
        let s = [0.3, 0.0, 2.1, 1.0];
        assert_eq!(
            aggregate(&s, &spec(AggregationMode::Sum, 0.0)).unwrap(),
            s.to_vec()
        );
    }

    #[test]
    fn greedy_and_outcome() {
        let s = [0.0, 1.3, 0.5];
        assert_eq!(
            aggregate(&s, &spec(AggregationMode::Greedy, 0.4)).unwrap(),
            s.to_vec()
        );
        assert_eq!(
            aggregate(&s, &spec(AggregationMode::Outcome, 0.4)).unwrap(),
            vec![1.3; 3]
        );
    }

    #[test]
    fn aggregate_errors() {
        assert_eq!(
            aggregate(&[], &spec(AggregationMode::Sum, 0.4)),
            Err(CreditError::EmptyScores)
        );
        assert_eq!(
            AggregationSpec::new(AggregationMode::Sum, 1.3),
            Err(CreditError::BadGamma(1.3))
        );
    }

    #[test]
    fn normalize_examples() {
        let a = normalize_group(&GroupRewards::new(vec![1.0, 2.0, 3.0])).unwrap();
        assert!(close(&a, &[-1.224745, 0.0, 1.224745], 1e-6), "{a:?}");
        let a = normalize_group(&GroupRewards::new(vec![5.0; 4])).unwrap();
        assert_eq!(a, vec![0.0; 4]);
        let a = normalize_group(&GroupRewards::new(vec![0.0, 1.0])).unwrap();
        assert!(close(&a, &[-1.0, 1.0], 1e-6), "{a:?}");
    }

    #[test]
    fn normalize_rejects_small_groups() {
        assert_eq!(
            normalize_group(&GroupRewards::new(vec![1.0])),
            Err(CreditError::GroupTooSmall(1))
        );
    }

    #[test]
    fn credit_flows_to_incorrect_first_turn() {
        let s = spec(AggregationMode::Sum, 0.4);
        let mut rewards = aggregate(&[0.0, 0.0, 0.0], &s).unwrap();
        rewards.extend(aggregate(&[0.0, 1.3, 2.0], &s).unwrap());
        let adv = normalize_group(&GroupRewards::new(rewards)).unwrap();
        assert!(adv[..3].iter().all(|&a| a < 0.0));
        assert!(adv[3] > 0.0);
    }

    fn brute_sum(r: &[f64], g: f64) -> Vec<f64> {
        (0..r.len())
            .map(|t| (t..r.len()).map(|i| g.powi((i - t) as i32) * r[i]).sum())
            .collect()
    }

    fn brute_max(r: &[f64], g: f64) -> Vec<f64> {
        (0..r.len())
            .map(|t| {
                (t..r.len())
                    .map(|i| g.powi((i - t) as i32) * r[i])
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect()
    }

    proptest! {
        #[test]
        fn matches_double_loop(r in prop::collection::vec(0.0f64..5.0, 1..12), g in 0.0f64..=1.0) {
            let sum = aggregate(&r, &spec(AggregationMode::Sum, g)).unwrap();
            prop_assert!(close(&sum, &brute_sum(&r, g), 1e-12));
            let max = aggregate(&r, &spec(AggregationMode::Max, g)).unwrap();
            prop_assert!(close(&max, &brute_max(&r, g), 1e-12));
            let last = r[r.len() - 1];
            prop_assert_eq!(sum[r.len() - 1], last);
            prop_assert_eq!(max[r.len() - 1], last);
        }

        #[test]
        fn monotone_in_future_scores(
            r in prop::collection::vec(0.0f64..5.0, 2..8),
            g in 0.0f64..=1.0,
            j in 0usize..8,
            bump in 0.0f64..3.0,
        ) {
            let j = j % r.len();
            let mut up = r.clone();
            up[j] += bump;
            for mode in [AggregationMode::Sum, AggregationMode::Max] {
                let a = aggregate(&r, &spec(mode, g)).unwrap();
                let b = aggregate(&up, &spec(mode, g)).unwrap();
                for t in 0..=j {
                    prop_assert!(b[t] >= a[t]);
                }
            }
        }

        #[test]
        fn normalized_moments(r in prop::collection::vec(-10.0f64..10.0, 2..40)) {
            let g = GroupRewards { rewards: r.clone(), epsilon: 0.0 };
            let a = normalize_group(&g).unwrap();
            let n = a.len() as f64;
            let mean = a.iter().sum::<f64>() / n;
            prop_assert!(mean.abs() < 1e-9);
            let var_in = {
                let m = r.iter().sum::<f64>() / n;
                r.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n
            };
            if var_in > 1e-12 {
                let std = (a.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
                prop_assert!((std - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn shift_invariant(r in prop::collection::vec(0.0f64..5.0, 2..20), c in -3.0f64..3.0) {
            let a = normalize_group(&GroupRewards::new(r.clone())).unwrap();
            let b = normalize_group(&GroupRewards::new(r.iter().map(|x| x + c).collect())).unwrap();
            prop_assert!(close(&a, &b, 1e-9));
        }
    }
}
