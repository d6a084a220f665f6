//! Experiment configuration.
//!
//! Configs are TOML files with one section per subsystem. Unknown keys are
//! rejected — silent typos in RL configs are a classic failure mode. All
//! cross-field constraints are validated before any work starts, and
//! resolution produces a fully-defaulted copy that round-trips as the
//! resolved-config snapshot: any run is reproducible from that snapshot
//! plus its seed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::advantage::{BaselineKind, NormalizationMode};
use crate::envs::{Environment, PairRatingEnv, Prompt, SequenceMatchEnv};
use crate::error::{Error, Result};
use crate::policy::PolicyParams;
use crate::reward_scale::{four_point_default, ten_point_default, BucketMap, OrdinalScale};
use crate::rng::{stream_rng, Stream};
use crate::trainer::{DifficultyFilterConfig, RunPlan, TrainConfig, Trainer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<String>,
    #[serde(default)]
    pub checkpoint_every: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaleSection {
    pub levels: Vec<f64>,
    pub correct_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKindName {
    SequenceMatch,
    PairRating,
}

fn default_scale_name() -> String {
    "ten_point".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSection {
    pub kind: EnvKindName,
    #[serde(default = "default_scale_name")]
    pub scale: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vocab_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seq_len: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_prompts: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_similarity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BucketizeSection {
    pub target: String,
    pub boundaries: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyInitKind {
    #[default]
    Zero,
    Random,
}

fn default_context_order() -> usize {
    1
}

fn default_init_scale() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySection {
    #[serde(default = "default_context_order")]
    pub context_order: usize,
    #[serde(default)]
    pub init: PolicyInitKind,
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
}

impl Default for PolicySection {
    fn default() -> Self {
        PolicySection {
            context_order: default_context_order(),
            init: PolicyInitKind::default(),
            init_scale: default_init_scale(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineName {
    Grpo,
    Static,
    Corpo,
}

impl BaselineName {
    pub fn label(self) -> &'static str {
        match self {
            BaselineName::Grpo => "grpo",
            BaselineName::Static => "static",
            BaselineName::Corpo => "corpo",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DifficultyFilterSection {
    #[serde(default = "default_filter_low")]
    pub low: f64,
    #[serde(default = "default_filter_high")]
    pub high: f64,
    #[serde(default = "default_probe_n")]
    pub probe_n: usize,
}

fn default_filter_low() -> f64 {
    0.1
}

fn default_filter_high() -> f64 {
    0.9
}

fn default_probe_n() -> usize {
    16
}

fn default_group_size() -> usize {
    8
}

fn default_batch_prompts() -> usize {
    64
}

fn default_lr() -> f64 {
    0.5
}

fn default_steps() -> u64 {
    100
}

fn default_temperature() -> f64 {
    1.0
}

fn default_cap_multiplier() -> f64 {
    5.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub baseline: BaselineName,
    #[serde(default)]
    pub norm: NormalizationMode,
    /// Correctness threshold for the static/corpo baselines; defaults to
    /// the effective scale's minimum correct reward.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    #[serde(default = "default_group_size")]
    pub group_size: usize,
    #[serde(default = "default_batch_prompts")]
    pub batch_prompts: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_steps")]
    pub steps: u64,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub dynamic_rollouts: bool,
    #[serde(default = "default_cap_multiplier")]
    pub rollout_cap_multiplier: f64,
    /// Defaults by baseline: on for grpo, off for static/corpo.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variance_filter: Option<bool>,
    #[serde(default)]
    pub length_normalize: bool,
    #[serde(default)]
    pub warmup_steps: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub difficulty_filter: Option<DifficultyFilterSection>,
}

fn default_eval_k() -> usize {
    16
}

fn default_eval_samples() -> usize {
    16
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Evaluate every `cadence` steps (the final step always evaluates);
    /// 0 = final only.
    #[serde(default)]
    pub cadence: u64,
    #[serde(default = "default_eval_k")]
    pub k: usize,
    #[serde(default = "default_eval_samples")]
    pub samples_per_prompt: usize,
    /// Eval set name -> number of held-out prompts.
    #[serde(default)]
    pub sets: BTreeMap<String, usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            cadence: 0,
            k: default_eval_k(),
            samples_per_prompt: default_eval_samples(),
            sets: BTreeMap::new(),
        }
    }
}

/// Full experiment config as written on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    /// Named scales; the built-in `ten_point` and `four_point` scales are
    /// always available unless overridden here.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub scales: BTreeMap<String, ScaleSection>,
    pub env: EnvSection,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bucketize: Option<BucketizeSection>,
    #[serde(default)]
    pub policy: PolicySection,
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
}

/// CLI-level overrides applied before resolution.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub eval_k: Option<usize>,
}

impl ExperimentConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("{}: {e}", origin.display())))
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    fn scale_table(&self) -> BTreeMap<String, ScaleSection> {
        let mut table = BTreeMap::new();
        for builtin in [ten_point_default(), four_point_default()] {
            table.insert(
                builtin.name().to_string(),
                ScaleSection { levels: builtin.levels().to_vec(), correct_index: builtin.correct_index() },
            );
        }
        for (name, section) in &self.scales {
            table.insert(name.clone(), section.clone());
        }
        table
    }

    fn build_scale(table: &BTreeMap<String, ScaleSection>, name: &str) -> Result<OrdinalScale> {
        let section = table.get(name).ok_or_else(|| {
            Error::config(format!(
                "unknown scale `{name}`; declared scales: {}",
                table.keys().cloned().collect::<Vec<_>>().join(", ")
            ))
        })?;
        OrdinalScale::new(name, section.levels.clone(), section.correct_index)
    }

    /// Validate everything and construct the run context.
    pub fn resolve(&self, overrides: &Overrides) -> Result<ResolvedExperiment> {
        let mut raw = self.clone();
        if let Some(seed) = overrides.seed {
            raw.experiment.seed = seed;
        }
        if let Some(out_dir) = &overrides.out_dir {
            raw.experiment.out_dir = Some(out_dir.display().to_string());
        }
        if let Some(k) = overrides.eval_k {
            raw.eval.k = k;
        }

        let scale_table = raw.scale_table();
        let env_scale = Self::build_scale(&scale_table, &raw.env.scale)?;

        let env = match raw.env.kind {
            EnvKindName::SequenceMatch => {
                let vocab_size = *raw.env.vocab_size.get_or_insert(6);
                let seq_len = *raw.env.seq_len.get_or_insert(5);
                let similarity = *raw.env.target_similarity.get_or_insert(0.75);
                Environment::SequenceMatch(SequenceMatchEnv::new(
                    vocab_size,
                    seq_len,
                    env_scale.clone(),
                    similarity,
                )?)
            }
            EnvKindName::PairRating => {
                if raw.env.vocab_size.is_some()
                    || raw.env.seq_len.is_some()
                    || raw.env.target_similarity.is_some()
                {
                    return Err(Error::config(
                        "pair_rating fixes vocab_size, seq_len, and has no target_similarity; remove those keys"
                            .to_string(),
                    ));
                }
                Environment::PairRating(PairRatingEnv::new(env_scale.clone())?)
            }
        };
        let n_prompts = *raw.env.n_prompts.get_or_insert(64);
        if n_prompts < 1 {
            return Err(Error::config("env.n_prompts must be >= 1".to_string()));
        }

        let (effective_scale, bucket) = match &raw.bucketize {
            Some(section) => {
                let target = Self::build_scale(&scale_table, &section.target)?;
                let map = BucketMap::new(&env_scale, &target, &section.boundaries)?;
                (target, Some(map))
            }
            None => (env_scale.clone(), None),
        };

        let threshold = *raw.train.threshold.get_or_insert(effective_scale.r_min_correct());
        let baseline = match raw.train.baseline {
            BaselineName::Grpo => BaselineKind::GroupMean,
            BaselineName::Static => BaselineKind::Static { threshold },
            BaselineName::Corpo => BaselineKind::Corpo { threshold },
        };
        let variance_filter =
            *raw.train.variance_filter.get_or_insert(matches!(raw.train.baseline, BaselineName::Grpo));

        if raw.train.batch_prompts > n_prompts {
            return Err(Error::config(format!(
                "train.batch_prompts ({}) exceeds env.n_prompts ({n_prompts})",
                raw.train.batch_prompts
            )));
        }
        if raw.eval.k < 1 {
            return Err(Error::config("eval.k must be >= 1".to_string()));
        }
        if raw.eval.k > raw.eval.samples_per_prompt {
            return Err(Error::config(format!(
                "eval.k ({}) exceeds eval.samples_per_prompt ({})",
                raw.eval.k, raw.eval.samples_per_prompt
            )));
        }
        for (name, &size) in &raw.eval.sets {
            if size < 1 {
                return Err(Error::config(format!("eval set `{name}` must have >= 1 prompts")));
            }
        }
        if raw.policy.init_scale < 0.0 {
            return Err(Error::config("policy.init_scale must be >= 0".to_string()));
        }

        let train_config = TrainConfig {
            baseline,
            norm: raw.train.norm,
            group_size: raw.train.group_size,
            batch_prompts: raw.train.batch_prompts,
            lr: raw.train.lr,
            weight_decay: raw.train.weight_decay,
            steps: raw.train.steps,
            temperature: raw.train.temperature,
            dynamic_rollouts: raw.train.dynamic_rollouts,
            rollout_cap_multiplier: raw.train.rollout_cap_multiplier,
            variance_filter,
            difficulty_filter: raw.train.difficulty_filter.as_ref().map(|f| DifficultyFilterConfig {
                low: f.low,
                high: f.high,
                probe_n: f.probe_n,
            }),
            length_normalize: raw.train.length_normalize,
            warmup_steps: raw.train.warmup_steps,
        };
        let seed = raw.experiment.seed;
        let trainer = Trainer::new(train_config, env, effective_scale, bucket, seed)?;

        // fail fast on oversized policy tables
        PolicyParams::new(trainer.env().vocab_size(), raw.policy.context_order, trainer.env().seq_len())?;

        let plan = RunPlan {
            steps: raw.train.steps,
            eval_cadence: raw.eval.cadence,
            eval_k: raw.eval.k,
            eval_samples: raw.eval.samples_per_prompt,
            checkpoint_every: raw.experiment.checkpoint_every,
        };
        let out_dir = raw.experiment.out_dir.as_ref().map(PathBuf::from);
        let eval_set_sizes: Vec<(String, usize)> =
            raw.eval.sets.iter().map(|(name, &size)| (name.clone(), size)).collect();

        Ok(ResolvedExperiment { raw, seed, out_dir, trainer, plan, n_prompts, eval_set_sizes })
    }
}

/// A validated experiment ready to run. `raw` is the fully-defaulted config
/// whose TOML serialization is the resolved-config snapshot.
#[derive(Debug, Clone)]
pub struct ResolvedExperiment {
    pub raw: ExperimentConfig,
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub trainer: Trainer,
    pub plan: RunPlan,
    pub n_prompts: usize,
    pub eval_set_sizes: Vec<(String, usize)>,
}

impl ResolvedExperiment {
    pub fn snapshot_toml(&self) -> Result<String> {
        toml::to_string_pretty(&self.raw)
            .map_err(|e| Error::config(format!("serialize resolved config: {e}")))
    }

    /// Fresh policy from the policy-init stream.
    pub fn initial_policy(&self) -> Result<PolicyParams> {
        let vocab = self.trainer.env().vocab_size();
        let len = self.trainer.env().seq_len();
        let order = self.raw.policy.context_order;
        match self.raw.policy.init {
            PolicyInitKind::Zero => PolicyParams::new(vocab, order, len),
            PolicyInitKind::Random => {
                let mut rng = stream_rng(self.seed, Stream::PolicyInit, &[]);
                PolicyParams::random(vocab, order, len, self.raw.policy.init_scale, &mut rng)
            }
        }
    }

    /// Training prompts, drawn from the dataset stream.
    pub fn train_dataset(&self) -> Result<Vec<Prompt>> {
        let mut rng = stream_rng(self.seed, Stream::Dataset, &[0]);
        self.trainer.env().make_dataset(self.n_prompts, &mut rng)
    }

    /// Held-out eval sets, each from its own dataset stream.
    pub fn eval_sets(&self) -> Result<Vec<(String, Vec<Prompt>)>> {
        self.eval_set_sizes
            .iter()
            .enumerate()
            .map(|(index, (name, size))| {
                let mut rng = stream_rng(self.seed, Stream::Dataset, &[1 + index as u64]);
                Ok((name.clone(), self.trainer.env().make_dataset(*size, &mut rng)?))
            })
            .collect()
    }

    pub fn eval_set_names(&self) -> Vec<String> {
        self.eval_set_sizes.iter().map(|(name, _)| name.clone()).collect()
    }

    /// Copy with the baseline-defining fields masked, for enforcing that
    /// compared configs differ only in baseline (the variance filter
    /// default is part of the baseline's identity).
    pub fn baseline_masked_raw(&self) -> ExperimentConfig {
        let mut masked = self.raw.clone();
        masked.train.baseline = BaselineName::Grpo;
        masked.train.variance_filter = None;
        masked
    }
}
