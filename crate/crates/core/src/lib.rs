//! Desk-scale laboratory for group-based advantage baselines in
//! policy-gradient RL over ordinal rewards.
//!
//! Three baseline formulations are implemented and contrasted on synthetic
//! graded tasks with an exact-gradient tabular softmax policy:
//!
//! * **grpo** — the group-mean baseline; purely relative, so a failed
//!   rollout is reinforced whenever its group is even worse.
//! * **static** — a fixed correctness threshold; failed rollouts always get
//!   negative advantage, proportional to how far they fell short.
//! * **corpo** — the adaptive clamp `max(threshold, group mean)`, which
//!   behaves like the static baseline while the group underperforms and
//!   reduces exactly to the group mean once it clears the bar.
//!
//! The crate provides the reward scales and bucketing ([`reward_scale`]),
//! the advantage formulations and signal-quadrant diagnostics
//! ([`advantage`]), the tabular policy ([`policy`]), synthetic environments
//! ([`envs`]), the strictly on-policy trainer ([`trainer`]), the metrics and
//! evaluators ([`metrics`]), and the experiment front-end ([`config`],
//! [`commands`]).
//!
//! Per-prompt work (rollout collection, probing, evaluation) is
//! data-parallel via rayon behind the default `parallel` feature; the
//! sequential fallback produces bit-identical results, and every run is
//! reproducible from its seed.

pub mod advantage;
pub mod commands;
pub mod config;
pub mod envs;
pub mod error;
pub mod metrics;
mod parallel;
pub mod policy;
pub mod reward_scale;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
