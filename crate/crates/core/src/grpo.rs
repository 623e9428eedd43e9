//! GRPO clipped-surrogate objective with decoupled clip bounds, an optional
//! KL penalty, selectable length normalization, and a small tabular policy
//! whose analytic gradient is checked against finite differences.
//!
//! Summation order is fixed (sample order, then token order) so objectives
//! and gradients are bitwise reproducible.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Per-token KL estimator: `exp(ref - new) - (ref - new) - 1`.
pub const KL_ESTIMATOR: &str = "k3";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// Divide each sample's token sum by its own length.
    PerSequence,
    /// Divide every sample's token sum by `norm_constant`.
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrpoConfig {
    pub eps_low: f64,
    pub eps_high: f64,
    pub beta: f64,
    pub norm_mode: NormMode,
    pub norm_constant: usize,
    pub max_grad_norm: f64,
    pub temperature: f64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            eps_low: 0.2,
            eps_high: 0.28,
            beta: 0.0,
            norm_mode: NormMode::PerSequence,
            norm_constant: 16384,
            max_grad_norm: 0.05,
            temperature: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GrpoError {
    #[error("invalid grpo config: {0}")]
    Config(String),
    #[error("batch must contain at least one sample")]
    EmptyBatch,
    #[error("sample {index}: {reason}")]
    BadSample { index: usize, reason: String },
    #[error("non-finite gradient at parameter {0}")]
    NonFinite(usize),
    #[error("invalid toy policy: {0}")]
    Policy(String),
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<(), GrpoError> {
        let bad = |m: String| Err(GrpoError::Config(m));
        if !(0.0 < self.eps_low && self.eps_low <= self.eps_high && self.eps_high < 1.0) {
            return bad(format!(
                "need 0 < eps_low <= eps_high < 1, got eps_low={} eps_high={}",
                self.eps_low, self.eps_high
            ));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return bad(format!("beta must be >= 0, got {}", self.beta));
        }
        if self.norm_constant == 0 {
            return bad("norm_constant must be positive".into());
        }
        if !(self.max_grad_norm.is_finite() && self.max_grad_norm > 0.0) {
            return bad(format!(
                "max_grad_norm must be positive, got {}",
                self.max_grad_norm
            ));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return bad(format!(
                "temperature must be positive, got {}",
                self.temperature
            ));
        }
        Ok(())
    }

    fn clip_bounds(&self) -> (f64, f64) {
        (1.0 - self.eps_low, 1.0 + self.eps_high)
    }

    fn sample_weight(&self, len: usize) -> f64 {
        match self.norm_mode {
            NormMode::PerSequence => 1.0 / len as f64,
            NormMode::Constant => 1.0 / self.norm_constant as f64,
        }
    }
}

/// Per-token log-probabilities of one sampled response, with its advantage
/// broadcast over every token.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleLogProbs {
    pub logp_new: Vec<f64>,
    pub logp_old: Vec<f64>,
    pub logp_ref: Vec<f64>,
    pub advantage: f64,
}

impl SampleLogProbs {
    fn validate(&self, index: usize) -> Result<(), GrpoError> {
        let bad = |reason: &str| {
            Err(GrpoError::BadSample {
                index,
                reason: reason.to_owned(),
            })
        };
        let n = self.logp_new.len();
        if n == 0 {
            return bad("empty response");
        }
        if self.logp_old.len() != n || self.logp_ref.len() != n {
            return bad("log-probability lists differ in length");
        }
        let all = self
            .logp_new
            .iter()
            .chain(&self.logp_old)
            .chain(&self.logp_ref);
        if all.clone().any(|x| !x.is_finite() || *x > 0.0) {
            return bad("log-probabilities must be finite and <= 0");
        }
        if !self.advantage.is_finite() {
            return bad("advantage must be finite");
        }
        Ok(())
    }
}

/// `min(rho * adv, clip(rho, 1 - eps_low, 1 + eps_high) * adv)`.
pub fn token_term(logp_new: f64, logp_old: f64, adv: f64, cfg: &GrpoConfig) -> f64 {
    let (lo, hi) = cfg.clip_bounds();
    let rho = (logp_new - logp_old).exp();
    (rho * adv).min(rho.clamp(lo, hi) * adv)
}

/// Derivative of [`token_term`] with respect to `logp_new`.
pub fn token_term_grad(logp_new: f64, logp_old: f64, adv: f64, cfg: &GrpoConfig) -> f64 {
    let (lo, hi) = cfg.clip_bounds();
    let rho = (logp_new - logp_old).exp();
    let unclipped = rho * adv;
    if unclipped <= rho.clamp(lo, hi) * adv {
        unclipped
    } else {
        0.0
    }
}

/// Nonnegative per-token KL estimate of `pi_new || pi_ref`.
pub fn kl_estimate(logp_new: f64, logp_ref: f64) -> f64 {
    let d = logp_ref - logp_new;
    d.exp() - d - 1.0
}

/// Derivative of [`kl_estimate`] with respect to `logp_new`.
pub fn kl_estimate_grad(logp_new: f64, logp_ref: f64) -> f64 {
    1.0 - (logp_ref - logp_new).exp()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchObjective {
    pub objective: f64,
    /// Each sample's normalized contribution before averaging over the batch.
    pub per_sample: Vec<f64>,
}

/// Batch objective: mean over samples of `w_i * sum_t (term_t - beta * kl_t)`,
/// where `w_i` follows the configured length normalization.
pub fn batch_objective(
    samples: &[SampleLogProbs],
    cfg: &GrpoConfig,
) -> Result<BatchObjective, GrpoError> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(GrpoError::EmptyBatch);
    }
    let mut per_sample = Vec::with_capacity(samples.len());
    for (index, s) in samples.iter().enumerate() {
        s.validate(index)?;
        let mut total = 0.0;
        for t in 0..s.logp_new.len() {
            total += token_term(s.logp_new[t], s.logp_old[t], s.advantage, cfg);
        }
        if cfg.beta != 0.0 {
            let mut kl = 0.0;
            for t in 0..s.logp_new.len() {
                kl += kl_estimate(s.logp_new[t], s.logp_ref[t]);
            }
            total -= cfg.beta * kl;
        }
        per_sample.push(cfg.sample_weight(s.logp_new.len()) * total);
    }
    let objective = per_sample.iter().sum::<f64>() / samples.len() as f64;
    Ok(BatchObjective {
        objective,
        per_sample,
    })
}

/// Gradient of the batch objective with respect to each sample's `logp_new`.
pub fn batch_objective_grad(
    samples: &[SampleLogProbs],
    cfg: &GrpoConfig,
) -> Result<Vec<Vec<f64>>, GrpoError> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(GrpoError::EmptyBatch);
    }
    let g = samples.len() as f64;
    samples
        .iter()
        .enumerate()
        .map(|(index, s)| {
            s.validate(index)?;
            let w = cfg.sample_weight(s.logp_new.len()) / g;
            Ok((0..s.logp_new.len())
                .map(|t| {
                    let mut d = token_term_grad(s.logp_new[t], s.logp_old[t], s.advantage, cfg);
                    if cfg.beta != 0.0 {
                        d -= cfg.beta * kl_estimate_grad(s.logp_new[t], s.logp_ref[t]);
                    }
                    w * d
                })
                .collect())
        })
        .collect()
}

/// Scales `grads` onto the L2 ball of radius `max_norm` when outside it.
pub fn clip_grad_norm(grads: &[f64], max_norm: f64) -> Vec<f64> {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        grads.iter().map(|g| g * scale).collect()
    } else {
        grads.to_vec()
    }
}

/// Tabular softmax policy: independent logits per (position, symbol).
#[derive(Debug, Clone, PartialEq)]
pub struct ToyPolicy {
    vocab_size: usize,
    seq_len: usize,
    logits: Vec<f64>,
}

/// One sampled sequence and its scalar advantage.
#[derive(Debug, Clone, PartialEq)]
pub struct ToySample {
    pub tokens: Vec<usize>,
    pub advantage: f64,
}

impl ToyPolicy {
    pub fn new(vocab_size: usize, seq_len: usize, logits: Vec<f64>) -> Result<Self, GrpoError> {
        if vocab_size == 0 || seq_len == 0 {
            return Err(GrpoError::Policy(
                "vocab_size and seq_len must be positive".into(),
            ));
        }
        if logits.len() != vocab_size * seq_len {
            return Err(GrpoError::Policy(format!(
                "expected {} logits, got {}",
                vocab_size * seq_len,
                logits.len()
            )));
        }
        if logits.iter().any(|x| !x.is_finite()) {
            return Err(GrpoError::Policy("logits must be finite".into()));
        }
        Ok(Self {
            vocab_size,
            seq_len,
            logits,
        })
    }

    pub fn uniform(vocab_size: usize, seq_len: usize) -> Self {
        Self::new(vocab_size, seq_len, vec![0.0; vocab_size * seq_len]).expect("valid shape")
    }

    pub fn random<R: Rng>(rng: &mut R, vocab_size: usize, seq_len: usize, scale: f64) -> Self {
        let logits = (0..vocab_size * seq_len)
            .map(|_| rng.random_range(-scale..=scale))
            .collect();
        Self::new(vocab_size, seq_len, logits).expect("valid shape")
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn num_params(&self) -> usize {
        self.logits.len()
    }

    fn row(&self, pos: usize) -> &[f64] {
        &self.logits[pos * self.vocab_size..(pos + 1) * self.vocab_size]
    }

    /// Softmax probabilities at `pos`.
    pub fn probs(&self, pos: usize) -> Vec<f64> {
        let row = self.row(pos);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / z).collect()
    }

    pub fn log_prob(&self, pos: usize, token: usize) -> f64 {
        let row = self.row(pos);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        row[token] - lse
    }

    pub fn sequence_log_probs(&self, tokens: &[usize]) -> Vec<f64> {
        tokens
            .iter()
            .enumerate()
            .map(|(pos, &tok)| self.log_prob(pos, tok))
            .collect()
    }

    /// Samples `len` tokens at the given temperature.
    pub fn sample<R: Rng>(&self, rng: &mut R, len: usize, temperature: f64) -> Vec<usize> {
        (0..len.min(self.seq_len))
            .map(|pos| {
                let scaled: Vec<f64> = self.row(pos).iter().map(|x| x / temperature).collect();
                let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = scaled.iter().map(|x| (x - max).exp()).collect();
                let mut u = rng.random::<f64>() * w.iter().sum::<f64>();
                for (tok, wi) in w.iter().enumerate() {
                    if u < *wi {
                        return tok;
                    }
                    u -= wi;
                }
                self.vocab_size - 1
            })
            .collect()
    }

    /// Copy with each logit shifted by a uniform draw from `[-scale, scale]`.
    pub fn perturbed<R: Rng>(&self, rng: &mut R, scale: f64) -> Self {
        let logits = self
            .logits
            .iter()
            .map(|x| x + rng.random_range(-scale..=scale))
            .collect();
        Self::new(self.vocab_size, self.seq_len, logits).expect("valid shape")
    }

    /// Gradient ascent step `theta += lr * clip(grad)`.
    pub fn ascend(&mut self, grad: &[f64], lr: f64, max_grad_norm: f64) {
        assert_eq!(grad.len(), self.logits.len());
        for (x, g) in self
            .logits
            .iter_mut()
            .zip(clip_grad_norm(grad, max_grad_norm))
        {
            *x += lr * g;
        }
    }

    fn with_logit(&self, index: usize, value: f64) -> Self {
        let mut p = self.clone();
        p.logits[index] = value;
        p
    }
}

fn check_batch(policy: &ToyPolicy, batch: &[ToySample]) -> Result<(), GrpoError> {
    if batch.is_empty() {
        return Err(GrpoError::EmptyBatch);
    }
    for (index, s) in batch.iter().enumerate() {
        if s.tokens.is_empty() || s.tokens.len() > policy.seq_len {
            return Err(GrpoError::BadSample {
                index,
                reason: format!(
                    "sequence length {} outside 1..={}",
                    s.tokens.len(),
                    policy.seq_len
                ),
            });
        }
        if let Some(&t) = s.tokens.iter().find(|&&t| t >= policy.vocab_size) {
            return Err(GrpoError::BadSample {
                index,
                reason: format!("token {t} outside vocabulary of {}", policy.vocab_size),
            });
        }
    }
    Ok(())
}

fn toy_log_probs(
    policy: &ToyPolicy,
    old: &ToyPolicy,
    reference: &ToyPolicy,
    batch: &[ToySample],
) -> Vec<SampleLogProbs> {
    batch
        .iter()
        .map(|s| SampleLogProbs {
            logp_new: policy.sequence_log_probs(&s.tokens),
            logp_old: old.sequence_log_probs(&s.tokens),
            logp_ref: reference.sequence_log_probs(&s.tokens),
            advantage: s.advantage,
        })
        .collect()
}

/// Batch objective of `policy` with frozen behaviour (`old`) and reference
/// policies.
pub fn toy_objective(
    policy: &ToyPolicy,
    old: &ToyPolicy,
    reference: &ToyPolicy,
    batch: &[ToySample],
    cfg: &GrpoConfig,
) -> Result<f64, GrpoError> {
    check_batch(policy, batch)?;
    Ok(batch_objective(&toy_log_probs(policy, old, reference, batch), cfg)?.objective)
}

/// Analytic gradient of [`toy_objective`] with respect to every logit of
/// `policy`, by the chain rule through log-softmax.
pub fn toy_gradient(
    policy: &ToyPolicy,
    old: &ToyPolicy,
    reference: &ToyPolicy,
    batch: &[ToySample],
    cfg: &GrpoConfig,
) -> Result<Vec<f64>, GrpoError> {
    check_batch(policy, batch)?;
    let dlogp = batch_objective_grad(&toy_log_probs(policy, old, reference, batch), cfg)?;
    let v = policy.vocab_size;
    let mut grad = vec![0.0; policy.num_params()];
    for (s, d) in batch.iter().zip(&dlogp) {
        for (pos, (&tok, &dl)) in s.tokens.iter().zip(d).enumerate() {
            if dl == 0.0 {
                continue;
            }
            let probs = policy.probs(pos);
            for (sym, p) in probs.iter().enumerate() {
                let indicator = if sym == tok { 1.0 } else { 0.0 };
                grad[pos * v + sym] += dl * (indicator - p);
            }
        }
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(GrpoError::NonFinite(i));
    }
    Ok(grad)
}

/// Central finite-difference gradient of an arbitrary objective over the
/// policy's logits.
pub fn finite_difference_gradient<F>(
    policy: &ToyPolicy,
    h: f64,
    mut objective: F,
) -> Result<Vec<f64>, GrpoError>
where
    F: FnMut(&ToyPolicy) -> Result<f64, GrpoError>,
{
    (0..policy.num_params())
        .map(|i| {
            let x = policy.logits[i];
            let plus = objective(&policy.with_logit(i, x + h))?;
            let minus = objective(&policy.with_logit(i, x - h))?;
            let fd = (plus - minus) / (2.0 * h);
            if fd.is_finite() {
                Ok(fd)
            } else {
                Err(GrpoError::NonFinite(i))
            }
        })
        .collect()
}

/// Whether the behaviour policy was perturbed enough to activate clipping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipRegime {
    Inactive,
    Active,
}

/// A frozen gradient-check problem: current, behaviour and reference
/// policies plus a batch of scored sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckCase {
    pub policy: ToyPolicy,
    pub old_policy: ToyPolicy,
    pub ref_policy: ToyPolicy,
    pub batch: Vec<ToySample>,
}

/// Ratios closer than this to a clip bound are resampled: the objective has
/// a kink there and finite differences straddling it are meaningless.
const KINK_MARGIN: f64 = 1e-3;

impl GradCheckCase {
    /// A random case with vocabulary <= 8 and sequences <= 6 tokens.
    ///
    /// In the active regime at least one token has its unclipped branch
    /// rejected by the `min`; in the inactive regime every ratio lies inside
    /// the clip band.
    pub fn random(seed: u64, regime: ClipRegime, cfg: &GrpoConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (lo, hi) = cfg.clip_bounds();
        loop {
            let vocab = rng.random_range(2..=8);
            let seq_len = rng.random_range(1..=6);
            let policy = ToyPolicy::random(&mut rng, vocab, seq_len, 1.5);
            let old_scale = match regime {
                ClipRegime::Inactive => 0.04,
                ClipRegime::Active => 1.0,
            };
            let old_policy = policy.perturbed(&mut rng, old_scale);
            let ref_policy = policy.perturbed(&mut rng, 0.5);
            let group = rng.random_range(2..=5);
            let batch: Vec<ToySample> = (0..group)
                .map(|_| {
                    let len = rng.random_range(1..=seq_len);
                    ToySample {
                        tokens: old_policy.sample(&mut rng, len, 1.0),
                        advantage: rng.random_range(-2.0..2.0),
                    }
                })
                .collect();
            let case = Self {
                policy,
                old_policy,
                ref_policy,
                batch,
            };
            let mut near_kink = false;
            let mut clipped = 0usize;
            let mut outside_band = 0usize;
            for s in &case.batch {
                let new = case.policy.sequence_log_probs(&s.tokens);
                let old = case.old_policy.sequence_log_probs(&s.tokens);
                for (n, o) in new.iter().zip(&old) {
                    let rho = (n - o).exp();
                    near_kink |= (rho - lo).abs() < KINK_MARGIN || (rho - hi).abs() < KINK_MARGIN;
                    if !(lo..=hi).contains(&rho) {
                        outside_band += 1;
                    }
                    if token_term_grad(*n, *o, s.advantage, cfg) == 0.0 {
                        clipped += 1;
                    }
                }
                near_kink |= s.advantage.abs() < KINK_MARGIN;
            }
            let regime_ok = match regime {
                ClipRegime::Inactive => outside_band == 0,
                ClipRegime::Active => clipped > 0,
            };
            if !near_kink && regime_ok {
                return case;
            }
        }
    }
}

/// Denominator floor for relative errors, so that gradients at the level of
/// finite-difference noise do not dominate the report.
pub const REL_ERROR_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub analytic_norm: f64,
    pub params: usize,
    /// Tokens whose surrogate gradient is zeroed by clipping.
    pub clipped_tokens: usize,
}

/// Compares the analytic gradient with central finite differences of step `h`.
pub fn grad_check(
    case: &GradCheckCase,
    cfg: &GrpoConfig,
    h: f64,
) -> Result<GradCheckReport, GrpoError> {
    let analytic = toy_gradient(
        &case.policy,
        &case.old_policy,
        &case.ref_policy,
        &case.batch,
        cfg,
    )?;
    let numeric = finite_difference_gradient(&case.policy, h, |p| {
        toy_objective(p, &case.old_policy, &case.ref_policy, &case.batch, cfg)
    })?;
    let mut max_rel_error: f64 = 0.0;
    let mut max_abs_error: f64 = 0.0;
    for (a, f) in analytic.iter().zip(&numeric) {
        let abs = (a - f).abs();
        max_abs_error = max_abs_error.max(abs);
        max_rel_error = max_rel_error.max(abs / a.abs().max(f.abs()).max(REL_ERROR_FLOOR));
    }
    let mut clipped_tokens = 0;
    for s in &case.batch {
        let new = case.policy.sequence_log_probs(&s.tokens);
        let old = case.old_policy.sequence_log_probs(&s.tokens);
        clipped_tokens += new
            .iter()
            .zip(&old)
            .filter(|(n, o)| {
                token_term_grad(**n, **o, s.advantage, cfg) == 0.0 && s.advantage != 0.0
            })
            .count();
    }
    Ok(GradCheckReport {
        max_rel_error,
        max_abs_error,
        analytic_norm: analytic.iter().map(|g| g * g).sum::<f64>().sqrt(),
        params: analytic.len(),
        clipped_tokens,
    })
}
