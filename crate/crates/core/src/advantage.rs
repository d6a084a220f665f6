//! Group-based baselines and advantage computation.
//!
//! Three baseline formulations over a group of rollouts sharing one prompt:
//!
//! * `GroupMean` — the GRPO baseline, the arithmetic mean of the group's
//!   rewards. Purely relative: a failed trajectory earns a positive
//!   advantage whenever the group average is even worse.
//! * `Static` — a fixed correctness threshold. Failed trajectories always
//!   receive strictly negative advantage, proportional to how far below the
//!   threshold they landed.
//! * `Corpo` — the adaptive clamp `max(threshold, group mean)`. While the
//!   group underperforms the threshold it behaves like `Static`
//!   (correctness-seeking); once the group mean reaches the threshold it
//!   reduces to `GroupMean` exactly (preference-seeking).
//!
//! The module also classifies each (reward, advantage) pair into the four
//! signal quadrants used by the flaw diagnostics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reward_scale::OrdinalScale;

/// Baseline selection. `Static` and `Corpo` carry the correctness threshold
/// they compare against.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BaselineKind {
    GroupMean,
    Static { threshold: f64 },
    Corpo { threshold: f64 },
}

impl BaselineKind {
    pub fn label(&self) -> &'static str {
        match self {
            BaselineKind::GroupMean => "grpo",
            BaselineKind::Static { .. } => "static",
            BaselineKind::Corpo { .. } => "corpo",
        }
    }

    /// True for baselines computed from the group itself.
    pub fn is_group_relative(&self) -> bool {
        matches!(self, BaselineKind::GroupMean | BaselineKind::Corpo { .. })
    }
}

/// Advantage normalization. Config keys: `none`, `std`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum NormalizationMode {
    /// No normalization (default). Keeps the group-mean zero-sum property
    /// exact.
    #[default]
    #[serde(rename = "none")]
    None,
    /// Divide by the group's sample standard deviation, floored at 1e-8.
    /// Zero-variance groups yield all-zero advantages flagged degenerate.
    #[serde(rename = "std")]
    GroupStd,
}

/// Epsilon floor for `NormalizationMode::GroupStd`.
pub const STD_FLOOR: f64 = 1e-8;

/// Signal quadrant of one trajectory: correctness of the reward crossed with
/// the sign of the advantage. An advantage of exactly 0 counts as
/// non-positive (no reinforcement).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Quadrant {
    FailedPositive,
    FailedNonpositive,
    CorrectPositive,
    CorrectNonpositive,
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] = [
        Quadrant::FailedPositive,
        Quadrant::FailedNonpositive,
        Quadrant::CorrectPositive,
        Quadrant::CorrectNonpositive,
    ];

    /// Stable position used for histogram arrays and CSV columns.
    pub fn index(self) -> usize {
        match self {
            Quadrant::FailedPositive => 0,
            Quadrant::FailedNonpositive => 1,
            Quadrant::CorrectPositive => 2,
            Quadrant::CorrectNonpositive => 3,
        }
    }
}

/// Which regime a Corpo group is in. `NotApplicable` for other baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Group mean below the threshold: the clamp is active and the group is
    /// treated as under the correctness bar.
    CorrectnessSeeking,
    /// Group mean at or above the threshold: identical to `GroupMean`.
    PreferenceSeeking,
    NotApplicable,
}

/// Per-group advantage computation result.
#[derive(Debug, Clone)]
pub struct AdvantageReport {
    /// Advantage per trajectory, in input order.
    pub advantages: Vec<f64>,
    /// Signal quadrant per trajectory.
    pub quadrants: Vec<Quadrant>,
    /// The baseline value that was subtracted.
    pub baseline_value: f64,
    /// Corpo phase, `NotApplicable` otherwise.
    pub phase: Phase,
    /// True when the group's rewards had zero variance.
    pub degenerate: bool,
}

/// Arithmetic mean of the group's rewards.
pub fn group_mean_baseline(rewards: &[f64]) -> Result<f64> {
    if rewards.is_empty() {
        return Err(Error::domain("group mean of an empty group"));
    }
    Ok(rewards.iter().sum::<f64>() / rewards.len() as f64)
}

/// Group mean clamped from below at the correctness threshold.
pub fn corpo_baseline(rewards: &[f64], threshold: f64) -> Result<f64> {
    Ok(group_mean_baseline(rewards)?.max(threshold))
}

/// Classify one trajectory's learning signal.
pub fn classify_signal(reward: f64, advantage: f64, scale: &OrdinalScale) -> Quadrant {
    match (scale.is_correct(reward), advantage > 0.0) {
        (false, true) => Quadrant::FailedPositive,
        (false, false) => Quadrant::FailedNonpositive,
        (true, true) => Quadrant::CorrectPositive,
        (true, false) => Quadrant::CorrectNonpositive,
    }
}

fn sample_std(rewards: &[f64], mean: f64) -> f64 {
    if rewards.len() < 2 {
        return 0.0;
    }
    let ss: f64 = rewards.iter().map(|r| (r - mean) * (r - mean)).sum();
    (ss / (rewards.len() - 1) as f64).sqrt()
}

/// Compute advantages for one group of rewards.
///
/// `scale` supplies the correctness threshold used for quadrant
/// classification; the baseline threshold for `Static`/`Corpo` comes from
/// `kind` (usually the same value, but configurable independently).
pub fn compute_advantages(
    rewards: &[f64],
    kind: BaselineKind,
    norm: NormalizationMode,
    scale: &OrdinalScale,
) -> Result<AdvantageReport> {
    if rewards.is_empty() {
        return Err(Error::domain("advantage computation over an empty group"));
    }
    let mean = group_mean_baseline(rewards)?;
    let (baseline_value, phase) = match kind {
        BaselineKind::GroupMean => (mean, Phase::NotApplicable),
        BaselineKind::Static { threshold } => (threshold, Phase::NotApplicable),
        BaselineKind::Corpo { threshold } => {
            let phase = if mean < threshold { Phase::CorrectnessSeeking } else { Phase::PreferenceSeeking };
            (mean.max(threshold), phase)
        }
    };

    let degenerate = rewards.iter().all(|&r| r == rewards[0]);
    let advantages: Vec<f64> = match norm {
        NormalizationMode::None => rewards.iter().map(|r| r - baseline_value).collect(),
        NormalizationMode::GroupStd => {
            if degenerate {
                vec![0.0; rewards.len()]
            } else {
                let denom = sample_std(rewards, mean).max(STD_FLOOR);
                rewards.iter().map(|r| (r - baseline_value) / denom).collect()
            }
        }
    };
    let quadrants = rewards
        .iter()
        .zip(&advantages)
        .map(|(&r, &a)| classify_signal(r, a, scale))
        .collect();

    Ok(AdvantageReport { advantages, quadrants, baseline_value, phase, degenerate })
}
