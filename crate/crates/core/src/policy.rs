//! Tabular autoregressive softmax policy.
//!
//! The policy factorizes a fixed-length token sequence into per-position
//! softmax distributions conditioned on the last `context_order` tokens.
//! States form a prefix tree: one root state for the empty context, then one
//! state per context of each length up to the order. Everything (sampling,
//! log-probabilities, gradients) is exact, which lets the test suite check
//! the training machinery against enumeration and finite-difference oracles.
//!
//! Sampling and log-probability evaluation are read-only and safe to run in
//! parallel across prompts; `apply_update` needs exclusive access; gradient
//! accumulators merge by addition in any order.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};

/// Hard cap on the logits table so misconfigured vocab/order combinations
/// fail fast instead of allocating gigabytes.
const MAX_TABLE_ENTRIES: usize = 1 << 24;

/// One sampled rollout: the token sequence, its per-token log-probabilities
/// under the sampling policy at temperature 1, and the grading outcome
/// assigned later by the trainer.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub prompt_id: u64,
    pub tokens: Vec<usize>,
    pub logprobs: Vec<f64>,
    pub reward: f64,
    pub correct: bool,
}

impl Trajectory {
    /// Sum of per-token log-probabilities recorded at sampling time.
    pub fn logprob(&self) -> f64 {
        self.logprobs.iter().sum()
    }
}

/// Logit table of the policy plus its shape parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    vocab_size: usize,
    context_order: usize,
    max_len: usize,
    /// Row-major: `logits[state * vocab_size + token]`.
    logits: Vec<f64>,
    /// `offsets[m]` = first state index for contexts of length `m`.
    offsets: Vec<usize>,
    update_count: u64,
}

impl PolicyParams {
    /// All-zero logits (uniform policy).
    pub fn new(vocab_size: usize, context_order: usize, max_len: usize) -> Result<Self> {
        if vocab_size < 2 {
            return Err(Error::config(format!("vocab_size must be >= 2, got {vocab_size}")));
        }
        if max_len < 1 {
            return Err(Error::config("max_len must be >= 1".to_string()));
        }
        let mut offsets = Vec::with_capacity(context_order + 1);
        let mut total = 0usize;
        let mut block = 1usize;
        for _ in 0..=context_order {
            offsets.push(total);
            total = total
                .checked_add(block)
                .filter(|&t| t <= MAX_TABLE_ENTRIES)
                .ok_or_else(|| Error::config("policy state table too large".to_string()))?;
            block = block
                .checked_mul(vocab_size)
                .filter(|&b| b <= MAX_TABLE_ENTRIES)
                .ok_or_else(|| Error::config("policy state table too large".to_string()))?;
        }
        let entries = total
            .checked_mul(vocab_size)
            .filter(|&e| e <= MAX_TABLE_ENTRIES)
            .ok_or_else(|| Error::config("policy logits table too large".to_string()))?;
        Ok(PolicyParams {
            vocab_size,
            context_order,
            max_len,
            logits: vec![0.0; entries],
            offsets,
            update_count: 0,
        })
    }

    /// Uniform random logits in `[-scale, scale]`, for initial-likelihood
    /// spread in rank-bias experiments.
    pub fn random(
        vocab_size: usize,
        context_order: usize,
        max_len: usize,
        scale: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut policy = Self::new(vocab_size, context_order, max_len)?;
        for logit in &mut policy.logits {
            *logit = rng.gen_range(-scale..=scale);
        }
        Ok(policy)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn context_order(&self) -> usize {
        self.context_order
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn n_states(&self) -> usize {
        self.logits.len() / self.vocab_size
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    /// Number of `apply_update` calls so far; the trainer's strictly
    /// on-policy contract is one update per sampled batch.
    pub fn update_count(&self) -> u64 {
        self.update_count
    }

    pub fn shape_matches(&self, other: &PolicyParams) -> bool {
        self.vocab_size == other.vocab_size
            && self.context_order == other.context_order
            && self.max_len == other.max_len
    }

    /// Set one logit directly (test and experiment setup).
    pub fn set_logit(&mut self, state: usize, token: usize, value: f64) {
        self.logits[state * self.vocab_size + token] = value;
    }

    /// State index for position `pos` given the tokens generated so far.
    pub fn state_index(&self, tokens: &[usize], pos: usize) -> usize {
        let m = pos.min(self.context_order);
        let mut idx = 0usize;
        for &t in &tokens[pos - m..pos] {
            idx = idx * self.vocab_size + t;
        }
        self.offsets[m] + idx
    }

    fn row(&self, state: usize) -> &[f64] {
        &self.logits[state * self.vocab_size..(state + 1) * self.vocab_size]
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::domain(format!(
                "token {bad} outside vocabulary of size {}",
                self.vocab_size
            )));
        }
        Ok(())
    }

    /// Sample one trajectory. Temperature shapes the sampling distribution
    /// only; recorded log-probabilities are always at temperature 1.
    pub fn sample_trajectory(
        &self,
        prompt_id: u64,
        temperature: f64,
        rng: &mut impl Rng,
    ) -> Result<Trajectory> {
        if !(temperature > 0.0) {
            return Err(Error::domain(format!("temperature must be > 0, got {temperature}")));
        }
        let mut tokens = Vec::with_capacity(self.max_len);
        let mut logprobs = Vec::with_capacity(self.max_len);
        for pos in 0..self.max_len {
            let state = self.state_index(&tokens, pos);
            let row = self.row(state);
            let token = sample_softmax(row, temperature, rng);
            logprobs.push(log_softmax_at(row, token));
            tokens.push(token);
        }
        Ok(Trajectory { prompt_id, tokens, logprobs, reward: 0.0, correct: false })
    }

    /// Log-probability of a full token sequence.
    pub fn sequence_logprob(&self, tokens: &[usize]) -> Result<f64> {
        self.check_tokens(tokens)?;
        let mut total = 0.0;
        for pos in 0..tokens.len() {
            let state = self.state_index(tokens, pos);
            total += log_softmax_at(self.row(state), tokens[pos]);
        }
        Ok(total)
    }

    /// Probability of a full token sequence; strictly positive under softmax.
    pub fn trajectory_probability(&self, tokens: &[usize]) -> Result<f64> {
        Ok(self.sequence_logprob(tokens)?.exp())
    }

    /// Accumulate `weight * d(sequence_logprob)/d(theta)` into `out`. At each
    /// visited state the taken token's logit receives `weight * (1 - p)` and
    /// every other token `-weight * p`.
    pub fn grad_logprob(&self, tokens: &[usize], out: &mut GradientAccumulator, weight: f64) -> Result<()> {
        if out.data.len() != self.logits.len() || out.vocab_size != self.vocab_size {
            return Err(Error::domain("gradient accumulator shape does not match policy".to_string()));
        }
        self.check_tokens(tokens)?;
        if weight == 0.0 {
            return Ok(());
        }
        let mut probs = vec![0.0; self.vocab_size];
        for pos in 0..tokens.len() {
            let state = self.state_index(tokens, pos);
            softmax_into(self.row(state), &mut probs);
            let base = state * self.vocab_size;
            for (t, &p) in probs.iter().enumerate() {
                out.data[base + t] -= weight * p;
            }
            out.data[base + tokens[pos]] += weight;
        }
        Ok(())
    }

    /// Gradient-ascent step with decoupled weight decay:
    /// `theta <- theta + lr * grad - lr * weight_decay * theta`.
    pub fn apply_update(&mut self, grad: &GradientAccumulator, lr: f64, weight_decay: f64) -> Result<()> {
        if grad.data.len() != self.logits.len() || grad.vocab_size != self.vocab_size {
            return Err(Error::domain("gradient accumulator shape does not match policy".to_string()));
        }
        if !(lr > 0.0) {
            return Err(Error::domain(format!("learning rate must be > 0, got {lr}")));
        }
        if weight_decay < 0.0 {
            return Err(Error::domain(format!("weight decay must be >= 0, got {weight_decay}")));
        }
        for (theta, &g) in self.logits.iter_mut().zip(&grad.data) {
            *theta += lr * g - lr * weight_decay * *theta;
        }
        self.update_count += 1;
        Ok(())
    }
}

/// Gradient buffer with the same shape as a policy's logit table.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientAccumulator {
    vocab_size: usize,
    data: Vec<f64>,
}

impl GradientAccumulator {
    pub fn zeros_like(policy: &PolicyParams) -> Self {
        GradientAccumulator { vocab_size: policy.vocab_size, data: vec![0.0; policy.logits.len()] }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&g| g == 0.0)
    }

    /// Element-wise addition; accumulators merge commutatively.
    pub fn merge(&mut self, other: &GradientAccumulator) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.data {
            *g *= factor;
        }
    }
}

fn sample_softmax(row: &[f64], temperature: f64, rng: &mut impl Rng) -> usize {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &l| m.max(l / temperature));
    let weights: Vec<f64> = row.iter().map(|&l| (l / temperature - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (t, &w) in weights.iter().enumerate() {
        u -= w;
        if u < 0.0 {
            return t;
        }
    }
    row.len() - 1 // numerical leftovers land on the last token
}

fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &l| m.max(l));
    let mut total = 0.0;
    for (o, &l) in out.iter_mut().zip(row) {
        *o = (l - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

fn log_softmax_at(row: &[f64], token: usize) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &l| m.max(l));
    let logsum: f64 = row.iter().map(|&l| (l - max).exp()).sum::<f64>().ln() + max;
    row[token] - logsum
}

/// Serializable training state: the policy table plus the master seed and
/// the next step index, which together determine every RNG stream of the
/// continuation. Logits are stored as decimal text; Rust's shortest
/// round-trip float formatting makes save/load bit-exact.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub policy: PolicyParams,
    pub seed: u64,
    pub next_step: u64,
}

const CHECKPOINT_MAGIC: &str = "corpo-policy v1";

impl Checkpoint {
    pub fn to_text(&self) -> String {
        let p = &self.policy;
        let mut out = String::new();
        let _ = writeln!(out, "{CHECKPOINT_MAGIC}");
        let _ = writeln!(out, "vocab_size {}", p.vocab_size);
        let _ = writeln!(out, "context_order {}", p.context_order);
        let _ = writeln!(out, "max_len {}", p.max_len);
        let _ = writeln!(out, "seed {}", self.seed);
        let _ = writeln!(out, "next_step {}", self.next_step);
        let _ = writeln!(out, "states {}", p.n_states());
        for state in 0..p.n_states() {
            let row = p.row(state);
            for (i, v) in row.iter().enumerate() {
                if i > 0 {
                    out.push(' ');
                }
                let _ = write!(out, "{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let fail = |msg: &str| Error::format(origin, msg);
        let mut lines = text.lines();
        if lines.next() != Some(CHECKPOINT_MAGIC) {
            return Err(fail("missing checkpoint header"));
        }
        let mut field = |name: &str| -> Result<u64> {
            let line = lines.next().ok_or_else(|| fail(&format!("missing field `{name}`")))?;
            let value = line
                .strip_prefix(name)
                .and_then(|rest| rest.trim().parse::<u64>().ok())
                .ok_or_else(|| fail(&format!("malformed field `{name}`: {line}")))?;
            Ok(value)
        };
        let vocab_size = field("vocab_size")? as usize;
        let context_order = field("context_order")? as usize;
        let max_len = field("max_len")? as usize;
        let seed = field("seed")?;
        let next_step = field("next_step")?;
        let states = field("states")? as usize;

        let mut policy = PolicyParams::new(vocab_size, context_order, max_len)
            .map_err(|e| fail(&format!("invalid shape: {e}")))?;
        if policy.n_states() != states {
            return Err(fail(&format!(
                "state count {} does not match shape-derived count {}",
                states,
                policy.n_states()
            )));
        }
        for state in 0..states {
            let line = lines.next().ok_or_else(|| fail("truncated logits table"))?;
            let row: Vec<f64> = line
                .split_whitespace()
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| fail(&format!("bad logit on state {state}: {e}")))?;
            if row.len() != vocab_size {
                return Err(fail(&format!(
                    "state {state} has {} logits, expected {vocab_size}",
                    row.len()
                )));
            }
            policy.logits[state * vocab_size..(state + 1) * vocab_size].copy_from_slice(&row);
        }
        Ok(Checkpoint { policy, seed, next_step })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}
