//! Strictly on-policy group-based policy-gradient training loop.
//!
//! Each step samples a fresh group of rollouts per batch prompt, grades
//! them, computes per-group advantages under the configured baseline, and
//! applies exactly one gradient update for the whole batch. Optional
//! mechanisms: dynamic rollouts (resample up to a cap and keep the
//! max-variance subset when a group lacks outcome diversity), a variance
//! filter that drops zero-variance groups, and one-time difficulty
//! filtering of the dataset by probe success rate.
//!
//! Group collection, probing, and evaluation run in parallel across prompts;
//! every prompt draws from its own RNG stream derived from the master seed,
//! and gradients merge in prompt order, so results are bit-identical
//! regardless of scheduling.

use serde::{Deserialize, Serialize};

use crate::advantage::{compute_advantages, BaselineKind, NormalizationMode, Phase};
use crate::envs::{Environment, Prompt};
use crate::error::{Error, Result};
use crate::metrics::{
    mean_at_k, pass_at_k_mean, r_count, r_loss, weight_stats, MetricsRecord, QuadrantCounts,
};
use crate::parallel::{try_map_ordered, try_map_ordered_seq};
use crate::policy::{Checkpoint, GradientAccumulator, PolicyParams, Trajectory};
use crate::reward_scale::{BucketMap, OrdinalScale};
use crate::rng::{stream_rng, Stream};

/// Probe-based dataset filtering: drop prompts whose estimated success rate
/// over `probe_n` fresh rollouts falls outside `[low, high]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DifficultyFilterConfig {
    pub low: f64,
    pub high: f64,
    pub probe_n: usize,
}

/// Training-loop parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub baseline: BaselineKind,
    pub norm: NormalizationMode,
    pub group_size: usize,
    pub batch_prompts: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub steps: u64,
    pub temperature: f64,
    pub dynamic_rollouts: bool,
    pub rollout_cap_multiplier: f64,
    pub variance_filter: bool,
    pub difficulty_filter: Option<DifficultyFilterConfig>,
    /// Divide each trajectory's gradient weight by its token count. Off by
    /// default.
    pub length_normalize: bool,
    /// Linear learning-rate warmup over this many applied updates; 0
    /// disables it. Skipped steps do not consume a warmup tick.
    pub warmup_steps: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let min_group = if self.baseline.is_group_relative() { 2 } else { 1 };
        if self.group_size < min_group {
            return Err(Error::config(format!(
                "group_size must be >= {min_group} for baseline `{}`, got {}",
                self.baseline.label(),
                self.group_size
            )));
        }
        if self.batch_prompts < 1 {
            return Err(Error::config("batch_prompts must be >= 1".to_string()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::config(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if !(self.rollout_cap_multiplier >= 1.0) {
            return Err(Error::config(format!(
                "rollout_cap_multiplier must be >= 1, got {}",
                self.rollout_cap_multiplier
            )));
        }
        if let Some(filter) = &self.difficulty_filter {
            if !(0.0 <= filter.low && filter.low < filter.high && filter.high <= 1.0) {
                return Err(Error::config(format!(
                    "difficulty filter thresholds must satisfy 0 <= low < high <= 1, got ({}, {})",
                    filter.low, filter.high
                )));
            }
            if filter.probe_n < 1 {
                return Err(Error::config("difficulty filter probe_n must be >= 1".to_string()));
            }
        }
        Ok(())
    }
}

/// G rollouts sharing one prompt; the unit over which baselines are
/// computed. `degenerate` marks zero reward variance.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub prompt_id: u64,
    pub trajectories: Vec<Trajectory>,
    pub degenerate: bool,
}

/// Aggregates produced by one batch update.
#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    pub n_groups: usize,
    pub n_dropped: usize,
    pub quadrants: QuadrantCounts,
    pub r_count: Option<f64>,
    pub r_loss: Option<f64>,
    pub mean_abs_advantage: f64,
    pub fraction_phase2: Option<f64>,
    /// False when every group was dropped and the step was skipped.
    pub applied_update: bool,
}

/// Evaluation schedule and output cadence for [`Trainer::run_experiment`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunPlan {
    pub steps: u64,
    /// Evaluate every `eval_cadence` steps (and always on the final step);
    /// 0 evaluates only at the end.
    pub eval_cadence: u64,
    pub eval_k: usize,
    pub eval_samples: usize,
    /// Emit a checkpoint every `checkpoint_every` steps; 0 emits only the
    /// final one.
    pub checkpoint_every: u64,
}

/// Events surfaced while an experiment runs, in emission order.
pub enum RunEvent<'a> {
    Record(&'a MetricsRecord),
    Checkpoint(u64, &'a Checkpoint),
}

/// Training context: configuration, environment, the effective reward scale
/// (the bucket target when bucketing is active), and the master seed.
#[derive(Debug, Clone)]
pub struct Trainer {
    config: TrainConfig,
    env: Environment,
    scale: OrdinalScale,
    bucket: Option<BucketMap>,
    seed: u64,
}

impl Trainer {
    pub fn new(
        config: TrainConfig,
        env: Environment,
        scale: OrdinalScale,
        bucket: Option<BucketMap>,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        match &bucket {
            Some(map) => {
                if map.source_len() != env.scale().len() || map.target_len() != scale.len() {
                    return Err(Error::config(format!(
                        "bucket map shape ({} -> {}) does not match env scale ({}) and effective scale ({})",
                        map.source_len(),
                        map.target_len(),
                        env.scale().len(),
                        scale.len()
                    )));
                }
            }
            None => {
                if scale != *env.scale() {
                    return Err(Error::config(
                        "without bucketing, the effective scale must equal the environment scale".to_string(),
                    ));
                }
            }
        }
        Ok(Trainer { config, env, scale, bucket, seed })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn env(&self) -> &Environment {
        &self.env
    }

    /// The scale rewards are expressed in after optional bucketing.
    pub fn effective_scale(&self) -> &OrdinalScale {
        &self.scale
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Correctness threshold the baselines compare against.
    pub fn threshold(&self) -> f64 {
        match self.config.baseline {
            BaselineKind::Static { threshold } | BaselineKind::Corpo { threshold } => threshold,
            BaselineKind::GroupMean => self.scale.r_min_correct(),
        }
    }

    /// Sample one rollout and grade it onto the effective scale.
    pub fn sample_graded(
        &self,
        policy: &PolicyParams,
        prompt: &Prompt,
        rng: &mut impl rand::Rng,
    ) -> Result<Trajectory> {
        let mut trajectory = policy.sample_trajectory(prompt.id, self.config.temperature, rng)?;
        let outcome = self.env.grade(prompt, &trajectory)?;
        let level = match &self.bucket {
            Some(map) => map.map_level(outcome.level_index)?,
            None => outcome.level_index,
        };
        trajectory.reward = self.scale.reward(level)?;
        trajectory.correct = self.scale.is_correct(trajectory.reward);
        Ok(trajectory)
    }

    /// Collect one group for a prompt. With dynamic rollouts enabled, keeps
    /// sampling (up to `rollout_cap_multiplier * G` total) until the group
    /// holds at least one correct and one failed trajectory, then keeps the
    /// size-G subset with maximal reward variance, breaking ties toward the
    /// earliest-generated rollouts.
    pub fn collect_group(&self, policy: &PolicyParams, prompt: &Prompt, step: u64) -> Result<RolloutGroup> {
        let mut rng = stream_rng(self.seed, Stream::Rollout, &[step, prompt.id]);
        let g = self.config.group_size;
        let mut trajectories = Vec::with_capacity(g);
        for _ in 0..g {
            trajectories.push(self.sample_graded(policy, prompt, &mut rng)?);
        }
        if self.config.dynamic_rollouts {
            let cap = ((self.config.rollout_cap_multiplier * g as f64).floor() as usize).max(g);
            while !has_outcome_diversity(&trajectories) && trajectories.len() < cap {
                trajectories.push(self.sample_graded(policy, prompt, &mut rng)?);
            }
            if trajectories.len() > g {
                trajectories = subsample_max_variance(trajectories, g);
            }
        }
        let degenerate = trajectories.iter().all(|t| t.reward == trajectories[0].reward);
        Ok(RolloutGroup { prompt_id: prompt.id, trajectories, degenerate })
    }

    /// Collect groups for a batch of prompts, in parallel when the
    /// `parallel` feature is enabled. Output order follows the input.
    pub fn collect_batch(
        &self,
        policy: &PolicyParams,
        prompts: &[Prompt],
        step: u64,
    ) -> Result<Vec<RolloutGroup>> {
        try_map_ordered(prompts, |prompt| self.collect_group(policy, prompt, step))
    }

    /// Sequential twin of [`Trainer::collect_batch`]; always available and
    /// bit-identical to the parallel path.
    pub fn collect_batch_sequential(
        &self,
        policy: &PolicyParams,
        prompts: &[Prompt],
        step: u64,
    ) -> Result<Vec<RolloutGroup>> {
        try_map_ordered_seq(prompts, |prompt| self.collect_group(policy, prompt, step))
    }

    /// Probe success counts for one prompt over `probe_n` fresh rollouts.
    pub fn probe_success_count(
        &self,
        policy: &PolicyParams,
        prompt: &Prompt,
        probe_n: usize,
    ) -> Result<usize> {
        let mut rng = stream_rng(self.seed, Stream::Probe, &[prompt.id]);
        let mut successes = 0;
        for _ in 0..probe_n {
            if self.sample_graded(policy, prompt, &mut rng)?.correct {
                successes += 1;
            }
        }
        Ok(successes)
    }

    /// Apply the configured difficulty filter once; a pass-through when the
    /// filter is not configured. An emptied dataset is a configuration
    /// error, reported with the per-prompt rates.
    pub fn difficulty_filter(&self, policy: &PolicyParams, dataset: &[Prompt]) -> Result<Vec<Prompt>> {
        let Some(filter) = self.config.difficulty_filter else {
            return Ok(dataset.to_vec());
        };
        let rates = try_map_ordered(dataset, |prompt| {
            let successes = self.probe_success_count(policy, prompt, filter.probe_n)?;
            Ok(successes as f64 / filter.probe_n as f64)
        })?;
        let kept: Vec<Prompt> = dataset
            .iter()
            .zip(&rates)
            .filter(|(_, &rate)| rate >= filter.low && rate <= filter.high)
            .map(|(prompt, _)| prompt.clone())
            .collect();
        if kept.is_empty() {
            let detail: Vec<String> = dataset
                .iter()
                .zip(&rates)
                .map(|(prompt, rate)| format!("prompt {}: {rate:.3}", prompt.id))
                .collect();
            return Err(Error::config(format!(
                "difficulty filter ({}, {}) removed every prompt; per-prompt success rates: {}",
                filter.low,
                filter.high,
                detail.join(", ")
            )));
        }
        Ok(kept)
    }

    fn effective_lr(&self, applied_updates: u64) -> f64 {
        if self.config.warmup_steps == 0 {
            self.config.lr
        } else {
            let ramp = ((applied_updates + 1) as f64 / self.config.warmup_steps as f64).min(1.0);
            self.config.lr * ramp
        }
    }

    /// Compute advantages for the retained groups, accumulate the batch
    /// gradient (normalized by retained trajectory count), and apply exactly
    /// one update. Skips the update when every group was dropped.
    pub fn update_from_groups(
        &self,
        policy: &mut PolicyParams,
        groups: &[RolloutGroup],
    ) -> Result<StepStats> {
        let retained: Vec<&RolloutGroup> = groups
            .iter()
            .filter(|group| !(self.config.variance_filter && group.degenerate))
            .collect();
        let n_dropped = groups.len() - retained.len();

        let mut gradient = GradientAccumulator::zeros_like(policy);
        let mut quadrants = QuadrantCounts::default();
        let mut advantages = Vec::new();
        let mut phase2_groups = 0usize;
        let mut n_trajectories = 0usize;

        for group in &retained {
            let rewards: Vec<f64> = group.trajectories.iter().map(|t| t.reward).collect();
            let report = compute_advantages(&rewards, self.config.baseline, self.config.norm, &self.scale)?;
            if report.phase == Phase::PreferenceSeeking {
                phase2_groups += 1;
            }
            for ((trajectory, &advantage), &quadrant) in
                group.trajectories.iter().zip(&report.advantages).zip(&report.quadrants)
            {
                let weight = if self.config.length_normalize {
                    advantage / trajectory.tokens.len() as f64
                } else {
                    advantage
                };
                policy.grad_logprob(&trajectory.tokens, &mut gradient, weight)?;
                quadrants.add(quadrant);
                advantages.push(advantage);
                n_trajectories += 1;
            }
        }

        let applied_update = n_trajectories > 0;
        if applied_update {
            gradient.scale(1.0 / n_trajectories as f64);
            let lr = self.effective_lr(policy.update_count());
            policy.apply_update(&gradient, lr, self.config.weight_decay)?;
        }

        let fraction_phase2 = match self.config.baseline {
            BaselineKind::Corpo { .. } if !retained.is_empty() => {
                Some(phase2_groups as f64 / retained.len() as f64)
            }
            _ => None,
        };
        let mean_abs_advantage = if n_trajectories > 0 {
            advantages.iter().map(|a| a.abs()).sum::<f64>() / n_trajectories as f64
        } else {
            0.0
        };

        Ok(StepStats {
            n_groups: retained.len(),
            n_dropped,
            quadrants,
            r_count: r_count(&advantages),
            r_loss: r_loss(&advantages),
            mean_abs_advantage,
            fraction_phase2,
            applied_update,
        })
    }

    /// One full training step: sample groups for the batch, update, report.
    pub fn train_step(
        &self,
        policy: &mut PolicyParams,
        batch: &[Prompt],
        step: u64,
    ) -> Result<MetricsRecord> {
        let groups = self.collect_batch(policy, batch, step)?;
        let stats = self.update_from_groups(policy, &groups)?;
        Ok(self.record(step, stats, policy))
    }

    fn record(&self, step: u64, stats: StepStats, policy: &PolicyParams) -> MetricsRecord {
        MetricsRecord {
            step,
            baseline: self.config.baseline.label().to_string(),
            n_groups: stats.n_groups,
            n_dropped: stats.n_dropped,
            quadrants: stats.quadrants,
            r_count: stats.r_count,
            r_loss: stats.r_loss,
            mean_abs_advantage: stats.mean_abs_advantage,
            fraction_phase2: stats.fraction_phase2,
            weights: weight_stats(policy),
            evals: None,
        }
    }

    /// pass@k and mean@k per eval set, sampling `eval_samples` rollouts per
    /// prompt from dedicated eval streams.
    pub fn evaluate(
        &self,
        policy: &PolicyParams,
        eval_sets: &[(String, Vec<Prompt>)],
        plan: &RunPlan,
        step: u64,
    ) -> Result<Vec<(f64, f64)>> {
        eval_sets
            .iter()
            .enumerate()
            .map(|(set_index, (_, prompts))| {
                let counts: Vec<(usize, usize)> = try_map_ordered(prompts, |prompt| {
                    let mut rng =
                        stream_rng(self.seed, Stream::Eval, &[step, set_index as u64, prompt.id]);
                    let mut correct = 0usize;
                    for _ in 0..plan.eval_samples {
                        if self.sample_graded(policy, prompt, &mut rng)?.correct {
                            correct += 1;
                        }
                    }
                    Ok((plan.eval_samples, correct))
                })?;
                Ok((pass_at_k_mean(&counts, plan.eval_k)?, mean_at_k(&counts)?))
            })
            .collect()
    }

    /// Select the step's batch without replacement from its own stream.
    pub fn select_batch(&self, dataset: &[Prompt], step: u64) -> Vec<Prompt> {
        let take = self.config.batch_prompts.min(dataset.len());
        if take == dataset.len() {
            return dataset.to_vec();
        }
        let mut rng = stream_rng(self.seed, Stream::BatchSelect, &[step]);
        let mut indices: Vec<usize> = (0..dataset.len()).collect();
        for i in 0..take {
            let j = rand::Rng::gen_range(&mut rng, i..dataset.len());
            indices.swap(i, j);
        }
        let mut chosen = indices[..take].to_vec();
        chosen.sort_unstable();
        chosen.into_iter().map(|i| dataset[i].clone()).collect()
    }

    /// Run the full experiment: one-time difficulty filtering, then
    /// `plan.steps` training steps starting after `start_step`, with
    /// evaluations at the configured cadence and checkpoints surfaced
    /// through `on_event`. With `steps = 0` only the initial evaluation is
    /// emitted.
    pub fn run_experiment(
        &self,
        policy: &mut PolicyParams,
        dataset: &[Prompt],
        eval_sets: &[(String, Vec<Prompt>)],
        plan: &RunPlan,
        start_step: u64,
        on_event: &mut dyn FnMut(RunEvent<'_>) -> Result<()>,
    ) -> Result<Vec<MetricsRecord>> {
        let dataset = self.difficulty_filter(policy, dataset)?;
        let mut records = Vec::new();

        if plan.steps == 0 {
            let evals = self.evaluate(policy, eval_sets, plan, 0)?;
            let record = MetricsRecord {
                step: 0,
                baseline: self.config.baseline.label().to_string(),
                n_groups: 0,
                n_dropped: 0,
                quadrants: QuadrantCounts::default(),
                r_count: None,
                r_loss: None,
                mean_abs_advantage: 0.0,
                fraction_phase2: None,
                weights: weight_stats(policy),
                evals: Some(evals),
            };
            on_event(RunEvent::Record(&record))?;
            records.push(record);
        }

        for step in (start_step + 1)..=plan.steps {
            let batch = self.select_batch(&dataset, step);
            let mut record = self.train_step(policy, &batch, step)?;
            let eval_due = step == plan.steps || (plan.eval_cadence > 0 && step % plan.eval_cadence == 0);
            if eval_due {
                record.evals = Some(self.evaluate(policy, eval_sets, plan, step)?);
            }
            on_event(RunEvent::Record(&record))?;
            records.push(record);

            if plan.checkpoint_every > 0 && step % plan.checkpoint_every == 0 && step != plan.steps {
                let ckpt = Checkpoint { policy: policy.clone(), seed: self.seed, next_step: step + 1 };
                on_event(RunEvent::Checkpoint(step, &ckpt))?;
            }
        }

        let final_step = plan.steps.max(start_step);
        let ckpt = Checkpoint { policy: policy.clone(), seed: self.seed, next_step: final_step + 1 };
        on_event(RunEvent::Checkpoint(final_step, &ckpt))?;
        Ok(records)
    }
}

fn has_outcome_diversity(trajectories: &[Trajectory]) -> bool {
    trajectories.iter().any(|t| t.correct) && trajectories.iter().any(|t| !t.correct)
}

fn population_variance(rewards: &[f64]) -> f64 {
    let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
    rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / rewards.len() as f64
}

/// Keep the size-`g` subset with maximal reward variance. A maximal subset
/// always consists of some count of the smallest rewards plus the largest
/// remaining ones, so only `g + 1` split candidates need checking; ties
/// resolve toward the earliest-generated rollouts.
fn subsample_max_variance(trajectories: Vec<Trajectory>, g: usize) -> Vec<Trajectory> {
    let n = trajectories.len();
    debug_assert!(n > g && g >= 1);
    let rewards: Vec<f64> = trajectories.iter().map(|t| t.reward).collect();

    let mut ascending: Vec<usize> = (0..n).collect();
    ascending.sort_by(|&a, &b| rewards[a].partial_cmp(&rewards[b]).expect("finite rewards").then(a.cmp(&b)));
    let mut descending: Vec<usize> = (0..n).collect();
    descending
        .sort_by(|&a, &b| rewards[b].partial_cmp(&rewards[a]).expect("finite rewards").then(a.cmp(&b)));

    let mut best: Option<(f64, Vec<usize>)> = None;
    for take_low in 0..=g {
        let low: Vec<usize> = ascending[..take_low].to_vec();
        let mut chosen = low.clone();
        for &idx in &descending {
            if chosen.len() == g {
                break;
            }
            if !low.contains(&idx) {
                chosen.push(idx);
            }
        }
        chosen.sort_unstable();
        let variance = population_variance(&chosen.iter().map(|&i| rewards[i]).collect::<Vec<_>>());
        let better = match &best {
            None => true,
            Some((best_var, best_chosen)) => {
                variance > *best_var || (variance == *best_var && chosen < *best_chosen)
            }
        };
        if better {
            best = Some((variance, chosen));
        }
    }

    let (_, chosen) = best.expect("at least one candidate");
    let mut keep = vec![false; n];
    for &idx in &chosen {
        keep[idx] = true;
    }
    trajectories
        .into_iter()
        .zip(keep)
        .filter_map(|(t, k)| k.then_some(t))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{PromptPayload, SequenceMatchEnv};
    use crate::reward_scale::{ten_point_default, OrdinalScale};

    fn base_config(baseline: BaselineKind) -> TrainConfig {
        TrainConfig {
            baseline,
            norm: NormalizationMode::None,
            group_size: 8,
            batch_prompts: 8,
            lr: 0.5,
            weight_decay: 0.0,
            steps: 10,
            temperature: 1.0,
            dynamic_rollouts: false,
            rollout_cap_multiplier: 5.0,
            variance_filter: false,
            difficulty_filter: None,
            length_normalize: false,
            warmup_steps: 0,
        }
    }

    /// Scale with threshold 0 whose levels align with 4-token match grades.
    fn witness_scale() -> OrdinalScale {
        OrdinalScale::new("witness", vec![-3.0, -2.0, -1.0, 0.0, 1.0], 3).unwrap()
    }

    fn witness_trainer(baseline: BaselineKind) -> Trainer {
        let env = SequenceMatchEnv::new(4, 4, witness_scale(), 0.5).unwrap();
        Trainer::new(base_config(baseline), Environment::SequenceMatch(env), witness_scale(), None, 17)
            .unwrap()
    }

    fn ten_point_trainer(baseline: BaselineKind, seed: u64, similarity: f64) -> Trainer {
        let env = SequenceMatchEnv::new(6, 5, ten_point_default(), similarity).unwrap();
        Trainer::new(
            base_config(baseline),
            Environment::SequenceMatch(env),
            ten_point_default(),
            None,
            seed,
        )
        .unwrap()
    }

    fn dataset(trainer: &Trainer, n: usize) -> Vec<Prompt> {
        let mut rng = stream_rng(trainer.seed(), Stream::Dataset, &[0]);
        trainer.env().make_dataset(n, &mut rng).unwrap()
    }

    #[test]
    fn config_validation() {
        let mut cfg = base_config(BaselineKind::GroupMean);
        cfg.group_size = 1;
        assert!(cfg.validate().is_err()); // group-relative needs G >= 2
        cfg.baseline = BaselineKind::Static { threshold: 0.0 };
        assert!(cfg.validate().is_ok()); // static works on singleton groups

        let mut cfg = base_config(BaselineKind::GroupMean);
        cfg.difficulty_filter = Some(DifficultyFilterConfig { low: 0.9, high: 0.1, probe_n: 4 });
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn dynamic_rollouts_early_exit_matches_plain_collection() {
        // threshold low enough that the first G rollouts of a uniform policy
        // are mixed: dynamic mode must return them unchanged
        let scale = OrdinalScale::new("easy", vec![-1.0, 0.0, 1.0, 2.0, 3.0], 1).unwrap();
        let env = SequenceMatchEnv::new(3, 4, scale.clone(), 0.0).unwrap();
        let mut cfg = base_config(BaselineKind::GroupMean);
        cfg.dynamic_rollouts = true;
        let dynamic =
            Trainer::new(cfg.clone(), Environment::SequenceMatch(env.clone()), scale.clone(), None, 5)
                .unwrap();
        cfg.dynamic_rollouts = false;
        let plain = Trainer::new(cfg, Environment::SequenceMatch(env), scale, None, 5).unwrap();

        let policy = PolicyParams::new(3, 1, 4).unwrap();
        let prompts = dataset(&plain, 8);
        let mut found_mixed = false;
        for prompt in &prompts {
            let a = dynamic.collect_group(&policy, prompt, 1).unwrap();
            let b = plain.collect_group(&policy, prompt, 1).unwrap();
            if has_outcome_diversity(&b.trajectories) {
                found_mixed = true;
                assert_eq!(a, b);
            }
        }
        assert!(found_mixed, "test needs at least one naturally mixed group");
    }

    #[test]
    fn homogeneous_rollouts_return_degenerate_group() {
        // a policy locked far away from any target fails identically every
        // time, so even 5G rollouts stay homogeneous
        let mut cfg = base_config(BaselineKind::GroupMean);
        cfg.dynamic_rollouts = true;
        let env = SequenceMatchEnv::new(4, 4, witness_scale(), 0.5).unwrap();
        let trainer =
            Trainer::new(cfg, Environment::SequenceMatch(env), witness_scale(), None, 9).unwrap();
        let mut policy = PolicyParams::new(4, 1, 4).unwrap();
        for state in 0..policy.n_states() {
            policy.set_logit(state, 3, 50.0);
        }
        let prompt = Prompt { id: 0, payload: PromptPayload::SequenceTarget { tokens: vec![0, 1, 2, 0] } };
        let group = trainer.collect_group(&policy, &prompt, 1).unwrap();
        assert_eq!(group.trajectories.len(), 8);
        assert!(group.degenerate);
    }

    #[test]
    fn subsample_matches_exhaustive_oracle() {
        // tiny G: compare against enumeration of all size-g subsets
        let mut rng = stream_rng(31, Stream::Dataset, &[7]);
        let scale = ten_point_default();
        for g in 2..=4usize {
            for _ in 0..200 {
                let n = rand::Rng::gen_range(&mut rng, (g + 1)..=(3 * g));
                let trajectories: Vec<Trajectory> = (0..n)
                    .map(|i| Trajectory {
                        prompt_id: 0,
                        tokens: vec![i],
                        logprobs: vec![],
                        reward: scale.reward(rand::Rng::gen_range(&mut rng, 0..scale.len())).unwrap(),
                        correct: false,
                    })
                    .collect();
                let rewards: Vec<f64> = trajectories.iter().map(|t| t.reward).collect();

                let mut max_variance = f64::NEG_INFINITY;
                let mut subset = vec![0usize; g];
                enumerate_subsets(n, g, &mut subset, 0, 0, &mut |chosen| {
                    let vals: Vec<f64> = chosen.iter().map(|&i| rewards[i]).collect();
                    max_variance = max_variance.max(population_variance(&vals));
                });

                let selected = subsample_max_variance(trajectories, g);
                let selected_rewards: Vec<f64> = selected.iter().map(|t| t.reward).collect();
                assert!(
                    (population_variance(&selected_rewards) - max_variance).abs() < 1e-12,
                    "selected variance {} oracle {}",
                    population_variance(&selected_rewards),
                    max_variance
                );
            }
        }
    }

    fn enumerate_subsets(
        n: usize,
        g: usize,
        subset: &mut Vec<usize>,
        depth: usize,
        start: usize,
        visit: &mut impl FnMut(&[usize]),
    ) {
        if depth == g {
            visit(subset);
            return;
        }
        for i in start..n {
            subset[depth] = i;
            enumerate_subsets(n, g, subset, depth + 1, i + 1, visit);
        }
    }

    #[test]
    fn difficulty_filter_drops_extremes() {
        let mut cfg = base_config(BaselineKind::GroupMean);
        cfg.difficulty_filter = Some(DifficultyFilterConfig { low: 0.1, high: 0.9, probe_n: 16 });
        // 2-level scale: correct iff the single token matches the target
        let scale = OrdinalScale::new("binary", vec![-1.0, 1.0], 1).unwrap();
        let env = SequenceMatchEnv::new(2, 1, scale.clone(), 0.0).unwrap();
        let trainer = Trainer::new(cfg, Environment::SequenceMatch(env), scale, None, 23).unwrap();

        // always token 1: prompt targeting 1 succeeds 16/16, prompt targeting
        // 0 succeeds 0/16
        let mut policy = PolicyParams::new(2, 0, 1).unwrap();
        policy.set_logit(0, 1, 60.0);
        let sure = Prompt { id: 0, payload: PromptPayload::SequenceTarget { tokens: vec![1] } };
        let never = Prompt { id: 1, payload: PromptPayload::SequenceTarget { tokens: vec![0] } };
        let err = trainer.difficulty_filter(&policy, &[sure.clone(), never.clone()]).unwrap_err();
        assert!(err.is_validation(), "emptied dataset must be a configuration error: {err}");

        // uniform policy: interior rate, both kept
        let uniform = PolicyParams::new(2, 0, 1).unwrap();
        let kept = trainer.difficulty_filter(&uniform, &[sure, never]).unwrap();
        assert_eq!(kept.len(), 2);
    }

    /// Build the flaw-witness group: rewards [-3, -1, -2] under a threshold
    /// of 0, graded for real by the sequence-match environment.
    fn witness_group(trainer: &Trainer) -> (Prompt, RolloutGroup) {
        let prompt = Prompt { id: 0, payload: PromptPayload::SequenceTarget { tokens: vec![0, 1, 2, 3] } };
        let mut group = Vec::new();
        for tokens in [vec![1, 2, 3, 0], vec![0, 1, 3, 0], vec![0, 2, 3, 0]] {
            let mut t = Trajectory { prompt_id: 0, tokens, logprobs: vec![], reward: 0.0, correct: false };
            let outcome = trainer.env().grade(&prompt, &t).unwrap();
            t.reward = trainer.effective_scale().reward(outcome.level_index).unwrap();
            t.correct = trainer.effective_scale().is_correct(t.reward);
            group.push(t);
        }
        assert_eq!(group.iter().map(|t| t.reward).collect::<Vec<_>>(), vec![-3.0, -1.0, -2.0]);
        (prompt, RolloutGroup { prompt_id: 0, trajectories: group, degenerate: false })
    }

    #[test]
    fn witness_group_moves_probability_opposite_ways() {
        // GroupMean reinforces the least-bad failure; the clamp suppresses it
        let grpo = witness_trainer(BaselineKind::GroupMean);
        let (_, group) = witness_group(&grpo);
        let target_tokens = group.trajectories[1].tokens.clone();

        let mut policy = PolicyParams::new(4, 1, 4).unwrap();
        let before = policy.trajectory_probability(&target_tokens).unwrap();
        grpo.update_from_groups(&mut policy, std::slice::from_ref(&group)).unwrap();
        let after = policy.trajectory_probability(&target_tokens).unwrap();
        assert!(after > before, "GroupMean must reinforce the -1 trajectory: {before} -> {after}");

        let corpo = witness_trainer(BaselineKind::Corpo { threshold: 0.0 });
        let mut policy = PolicyParams::new(4, 1, 4).unwrap();
        let before = policy.trajectory_probability(&target_tokens).unwrap();
        corpo.update_from_groups(&mut policy, std::slice::from_ref(&group)).unwrap();
        let after = policy.trajectory_probability(&target_tokens).unwrap();
        assert!(after < before, "Corpo must suppress the -1 trajectory: {before} -> {after}");
    }

    #[test]
    fn identical_correct_groups_leave_policy_unchanged() {
        // Corpo phase 2 with all-equal correct rewards: zero advantages
        let corpo = witness_trainer(BaselineKind::Corpo { threshold: 0.0 });
        let prompt = Prompt { id: 0, payload: PromptPayload::SequenceTarget { tokens: vec![0, 1, 2, 3] } };
        let trajectories: Vec<Trajectory> = (0..4)
            .map(|_| {
                let mut t = Trajectory {
                    prompt_id: 0,
                    tokens: vec![0, 1, 2, 3],
                    logprobs: vec![],
                    reward: 0.0,
                    correct: false,
                };
                let outcome = corpo.env().grade(&prompt, &t).unwrap();
                t.reward = corpo.effective_scale().reward(outcome.level_index).unwrap();
                t.correct = true;
                t
            })
            .collect();
        let group = RolloutGroup { prompt_id: 0, trajectories, degenerate: true };

        let mut policy = PolicyParams::new(4, 1, 4).unwrap();
        let snapshot = policy.logits().to_vec();
        let stats = corpo.update_from_groups(&mut policy, std::slice::from_ref(&group)).unwrap();
        assert!(stats.applied_update);
        assert_eq!(stats.fraction_phase2, Some(1.0));
        assert_eq!(policy.logits(), snapshot.as_slice());
    }

    #[test]
    fn corpo_learns_from_homogeneous_failure_grpo_does_not() {
        let corpo = witness_trainer(BaselineKind::Corpo { threshold: 0.0 });
        let (_, mut group) = witness_group(&corpo);
        // make the group all-failed with equal rewards
        for t in &mut group.trajectories {
            t.tokens = vec![1, 2, 3, 0];
            t.reward = -3.0;
            t.correct = false;
        }
        group.degenerate = true;

        let mut policy = PolicyParams::new(4, 1, 4).unwrap();
        let snapshot = policy.logits().to_vec();
        let stats = corpo.update_from_groups(&mut policy, std::slice::from_ref(&group)).unwrap();
        assert!(stats.applied_update);
        assert!(stats.quadrants.count(crate::advantage::Quadrant::FailedNonpositive) == 3);
        assert_ne!(policy.logits(), snapshot.as_slice(), "clamped baseline extracts signal");

        let grpo = witness_trainer(BaselineKind::GroupMean);
        let mut policy = PolicyParams::new(4, 1, 4).unwrap();
        let snapshot = policy.logits().to_vec();
        grpo.update_from_groups(&mut policy, std::slice::from_ref(&group)).unwrap();
        assert_eq!(policy.logits(), snapshot.as_slice(), "zero-sum advantages cancel exactly");
    }

    #[test]
    fn train_step_is_deterministic_and_counts_updates() {
        let trainer = ten_point_trainer(BaselineKind::GroupMean, 77, 0.75);
        let prompts = dataset(&trainer, 8);

        let mut policy_a = PolicyParams::new(6, 1, 5).unwrap();
        let mut policy_b = PolicyParams::new(6, 1, 5).unwrap();
        let mut records_a = Vec::new();
        let mut records_b = Vec::new();
        for step in 1..=5 {
            records_a.push(trainer.train_step(&mut policy_a, &prompts, step).unwrap());
            records_b.push(trainer.train_step(&mut policy_b, &prompts, step).unwrap());
        }
        assert_eq!(records_a, records_b);
        assert_eq!(policy_a.logits(), policy_b.logits());
        assert_eq!(policy_a.update_count(), 5, "one update per non-skipped step");
    }

    #[test]
    fn parallel_and_sequential_collection_agree() {
        let trainer = ten_point_trainer(BaselineKind::GroupMean, 13, 0.75);
        let prompts = dataset(&trainer, 16);
        let policy = PolicyParams::new(6, 1, 5).unwrap();
        let par = trainer.collect_batch(&policy, &prompts, 3).unwrap();
        let seq = trainer.collect_batch_sequential(&policy, &prompts, 3).unwrap();
        assert_eq!(par, seq);
    }

    #[test]
    fn degenerate_groups_never_produce_non_finite_gradients() {
        let mut rng = stream_rng(41, Stream::Dataset, &[0]);
        let scale = ten_point_default();
        for norm in [NormalizationMode::None, NormalizationMode::GroupStd] {
            for kind in [
                BaselineKind::GroupMean,
                BaselineKind::Static { threshold: 1.0 },
                BaselineKind::Corpo { threshold: 1.0 },
            ] {
                let mut cfg = base_config(kind);
                cfg.norm = norm;
                let env = SequenceMatchEnv::new(6, 5, scale.clone(), 0.75).unwrap();
                let trainer =
                    Trainer::new(cfg, Environment::SequenceMatch(env), scale.clone(), None, 41).unwrap();
                let mut policy = PolicyParams::new(6, 1, 5).unwrap();
                for _ in 0..20 {
                    // random groups, frequently degenerate
                    let level = rand::Rng::gen_range(&mut rng, 0..scale.len());
                    let same = rand::Rng::gen::<bool>(&mut rng);
                    let trajectories: Vec<Trajectory> = (0..4)
                        .map(|i| {
                            let l = if same { level } else { rand::Rng::gen_range(&mut rng, 0..scale.len()) };
                            Trajectory {
                                prompt_id: 0,
                                tokens: vec![i % 6, (i + 1) % 6, 0, 1, 2],
                                logprobs: vec![],
                                reward: scale.reward(l).unwrap(),
                                correct: scale.is_correct(scale.reward(l).unwrap()),
                            }
                        })
                        .collect();
                    let degenerate = trajectories.iter().all(|t| t.reward == trajectories[0].reward);
                    let group = RolloutGroup { prompt_id: 0, trajectories, degenerate };
                    trainer.update_from_groups(&mut policy, std::slice::from_ref(&group)).unwrap();
                    assert!(policy.logits().iter().all(|l| l.is_finite()));
                }
            }
        }
    }

    #[test]
    fn run_experiment_zero_steps_emits_initial_evaluation_only() {
        let trainer = ten_point_trainer(BaselineKind::Corpo { threshold: 1.0 }, 3, 0.75);
        let data = dataset(&trainer, 8);
        let eval_sets = vec![("holdout".to_string(), dataset(&trainer, 4))];
        let plan = RunPlan { steps: 0, eval_cadence: 0, eval_k: 4, eval_samples: 8, checkpoint_every: 0 };
        let mut policy = PolicyParams::new(6, 1, 5).unwrap();
        let mut checkpoints = 0;
        let records = trainer
            .run_experiment(&mut policy, &data, &eval_sets, &plan, 0, &mut |event| {
                if let RunEvent::Checkpoint(_, ckpt) = event {
                    checkpoints += 1;
                    assert_eq!(ckpt.next_step, 1);
                }
                Ok(())
            })
            .unwrap();
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].step, 0);
        assert!(records[0].evals.is_some());
        assert_eq!(checkpoints, 1);
        assert_eq!(policy.update_count(), 0);
    }

    #[test]
    fn resume_reproduces_uninterrupted_run() {
        let trainer = ten_point_trainer(BaselineKind::GroupMean, 55, 0.75);
        let data = dataset(&trainer, 8);
        let eval_sets = vec![("holdout".to_string(), dataset(&trainer, 4))];
        let plan = RunPlan { steps: 12, eval_cadence: 4, eval_k: 4, eval_samples: 8, checkpoint_every: 6 };

        let mut full_policy = PolicyParams::new(6, 1, 5).unwrap();
        let mut saved: Option<Checkpoint> = None;
        let full_records = trainer
            .run_experiment(&mut full_policy, &data, &eval_sets, &plan, 0, &mut |event| {
                if let RunEvent::Checkpoint(6, ckpt) = event {
                    saved = Some(ckpt.clone());
                }
                Ok(())
            })
            .unwrap();

        let ckpt = saved.expect("mid-run checkpoint at step 6");
        let mut resumed_policy = ckpt.policy;
        let resumed_records = trainer
            .run_experiment(&mut resumed_policy, &data, &eval_sets, &plan, ckpt.next_step - 1, &mut |_| Ok(()))
            .unwrap();

        assert_eq!(&full_records[6..], &resumed_records[..]);
        assert_eq!(full_policy.logits(), resumed_policy.logits());
    }

    #[test]
    fn corpo_on_all_failed_dataset_keeps_advantages_nonpositive() {
        // hard targets + a policy that cannot reach them: every advantage
        // must stay <= 0 across the whole run
        let mut cfg = base_config(BaselineKind::Corpo { threshold: 1.0 });
        cfg.steps = 10;
        cfg.batch_prompts = 4;
        cfg.group_size = 4;
        let scale = ten_point_default();
        let env = SequenceMatchEnv::new(6, 5, scale.clone(), 0.0).unwrap();
        let trainer = Trainer::new(cfg, Environment::SequenceMatch(env), scale, None, 71).unwrap();

        let mut policy = PolicyParams::new(6, 1, 5).unwrap();
        for state in 0..policy.n_states() {
            policy.set_logit(state, 5, 40.0);
        }
        // targets avoid token 5 entirely
        let data: Vec<Prompt> = (0..4)
            .map(|id| Prompt {
                id,
                payload: PromptPayload::SequenceTarget { tokens: vec![0, 1, 2, 3, 4] },
            })
            .collect();
        let plan = RunPlan { steps: 10, eval_cadence: 0, eval_k: 2, eval_samples: 4, checkpoint_every: 0 };
        let records = trainer
            .run_experiment(&mut policy, &data, &[], &plan, 0, &mut |_| Ok(()))
            .unwrap();
        for record in &records {
            assert_eq!(record.quadrants.count(crate::advantage::Quadrant::FailedPositive), 0);
            assert_eq!(record.quadrants.count(crate::advantage::Quadrant::CorrectPositive), 0);
            assert_eq!(record.r_count, Some(0.0));
        }
    }
}
