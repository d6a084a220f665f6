//! Training diagnostics: signal-ratio metrics, quadrant histograms, uplift
//! (rank-bias) analysis, weight statistics, and pass@k / mean@k evaluators.
//!
//! All aggregations are pure functions; the per-step CSV schema lives here
//! so every run emits identical, diffable columns.

use crate::advantage::{AdvantageReport, Quadrant};
use crate::error::{Error, Result};
use crate::policy::PolicyParams;

/// Ratio of positive to negative advantage counts. Zeros contribute no
/// learning signal and are excluded from both sides; the ratio is undefined
/// (not 0) when there are no negative advantages.
pub fn r_count(advantages: &[f64]) -> Option<f64> {
    let pos = advantages.iter().filter(|&&a| a > 0.0).count();
    let neg = advantages.iter().filter(|&&a| a < 0.0).count();
    if neg == 0 {
        None
    } else {
        Some(pos as f64 / neg as f64)
    }
}

/// Ratio of summed advantage magnitudes, positive over negative; undefined
/// when there are no negative advantages.
pub fn r_loss(advantages: &[f64]) -> Option<f64> {
    let pos: f64 = advantages.iter().filter(|&&a| a > 0.0).sum();
    let neg: f64 = advantages.iter().filter(|&&a| a < 0.0).map(|a| a.abs()).sum();
    if neg == 0.0 {
        None
    } else {
        Some(pos / neg)
    }
}

/// Counts per signal quadrant, indexed by [`Quadrant::index`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct QuadrantCounts {
    pub counts: [usize; 4],
}

impl QuadrantCounts {
    pub fn add(&mut self, quadrant: Quadrant) {
        self.counts[quadrant.index()] += 1;
    }

    pub fn merge(&mut self, other: &QuadrantCounts) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn count(&self, quadrant: Quadrant) -> usize {
        self.counts[quadrant.index()]
    }

    /// Fractions summing to 1 (all zero for an empty histogram).
    pub fn fractions(&self) -> [f64; 4] {
        let total = self.total();
        if total == 0 {
            return [0.0; 4];
        }
        let mut out = [0.0; 4];
        for (f, &c) in out.iter_mut().zip(&self.counts) {
            *f = c as f64 / total as f64;
        }
        out
    }

    pub fn fraction(&self, quadrant: Quadrant) -> f64 {
        self.fractions()[quadrant.index()]
    }
}

/// Aggregate the quadrants of a batch of advantage reports.
pub fn quadrant_histogram(reports: &[AdvantageReport]) -> QuadrantCounts {
    let mut counts = QuadrantCounts::default();
    for report in reports {
        for &q in &report.quadrants {
            counts.add(q);
        }
    }
    counts
}

/// Summary statistics over every logit entry of a policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub median: f64,
    pub l1: f64,
    pub l2: f64,
}

pub fn weight_stats(policy: &PolicyParams) -> WeightStats {
    let weights = policy.logits();
    let n = weights.len();
    let mut sorted = weights.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite logits"));
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    };
    WeightStats {
        min: sorted[0],
        max: sorted[n - 1],
        mean: weights.iter().sum::<f64>() / n as f64,
        median,
        l1: weights.iter().map(|w| w.abs()).sum(),
        l2: weights.iter().map(|w| w * w).sum::<f64>().sqrt(),
    }
}

/// Unbiased pass@k estimator for one prompt: probability that at least one
/// of k draws (without replacement) from n samples with c successes is a
/// success, `1 - C(n-c, k) / C(n, k)`.
pub fn pass_at_k(n: usize, c: usize, k: usize) -> Result<f64> {
    if k > n {
        return Err(Error::domain(format!("pass@k: k = {k} exceeds sample count n = {n}")));
    }
    if c > n {
        return Err(Error::domain(format!("pass@k: successes c = {c} exceed n = {n}")));
    }
    if n - c < k {
        return Ok(1.0);
    }
    let mut prod = 1.0;
    for i in 0..k {
        prod *= (n - c - i) as f64 / (n - i) as f64;
    }
    Ok(1.0 - prod)
}

/// Mean pass@k over prompts, each given as `(n_samples, n_successes)`.
pub fn pass_at_k_mean(per_prompt: &[(usize, usize)], k: usize) -> Result<f64> {
    if per_prompt.is_empty() {
        return Err(Error::domain("pass@k over an empty prompt set".to_string()));
    }
    let mut total = 0.0;
    for &(n, c) in per_prompt {
        total += pass_at_k(n, c, k)?;
    }
    Ok(total / per_prompt.len() as f64)
}

/// Mean success rate `c / n` averaged over prompts (the k-sample mean
/// estimator has expectation c/n, so k does not enter the value).
pub fn mean_at_k(per_prompt: &[(usize, usize)]) -> Result<f64> {
    if per_prompt.is_empty() {
        return Err(Error::domain("mean@k over an empty prompt set".to_string()));
    }
    let mut total = 0.0;
    for &(n, c) in per_prompt {
        if n == 0 {
            return Err(Error::domain("mean@k: prompt with zero samples".to_string()));
        }
        total += c as f64 / n as f64;
    }
    Ok(total / per_prompt.len() as f64)
}

/// One likelihood-rank bucket of the uplift analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct UpliftBucket {
    /// 0 = highest initial likelihood.
    pub bucket: usize,
    pub count: usize,
    /// Mean of `p_after / p_before` over the bucket's trajectories.
    pub mean_ratio: f64,
}

/// Uplift ratios of correct trajectories, bucketed by initial likelihood.
#[derive(Debug, Clone, PartialEq)]
pub struct UpliftReport {
    pub buckets: Vec<UpliftBucket>,
}

/// Rank `trajectories` by their probability under `before` (descending),
/// partition into `n_buckets` equal-size rank buckets (remainder to earlier
/// buckets), and report each bucket's mean post/pre probability ratio.
pub fn uplift_analysis(
    before: &PolicyParams,
    after: &PolicyParams,
    trajectories: &[Vec<usize>],
    n_buckets: usize,
) -> Result<UpliftReport> {
    if !before.shape_matches(after) {
        return Err(Error::domain("uplift analysis: policies have different shapes".to_string()));
    }
    if n_buckets == 0 {
        return Err(Error::domain("uplift analysis: n_buckets must be >= 1".to_string()));
    }
    if trajectories.len() < n_buckets {
        return Err(Error::domain(format!(
            "uplift analysis: {} trajectories cannot fill {} buckets",
            trajectories.len(),
            n_buckets
        )));
    }

    let mut scored: Vec<(f64, f64, &Vec<usize>)> = trajectories
        .iter()
        .map(|t| {
            let p_before = before.trajectory_probability(t)?;
            let p_after = after.trajectory_probability(t)?;
            Ok((p_before, p_after, t))
        })
        .collect::<Result<_>>()?;
    // descending by initial probability; token order as a deterministic
    // tie-break
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("positive probabilities").then(a.2.cmp(b.2)));

    let base = scored.len() / n_buckets;
    let remainder = scored.len() % n_buckets;
    let mut buckets = Vec::with_capacity(n_buckets);
    let mut cursor = 0;
    for bucket in 0..n_buckets {
        let size = base + usize::from(bucket < remainder);
        let slice = &scored[cursor..cursor + size];
        cursor += size;
        let mean_ratio =
            slice.iter().map(|(pb, pa, _)| pa / pb).sum::<f64>() / size as f64;
        buckets.push(UpliftBucket { bucket, count: size, mean_ratio });
    }
    Ok(UpliftReport { buckets })
}

/// Per-step diagnostics; one CSV row each.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub step: u64,
    pub baseline: String,
    pub n_groups: usize,
    pub n_dropped: usize,
    pub quadrants: QuadrantCounts,
    pub r_count: Option<f64>,
    pub r_loss: Option<f64>,
    pub mean_abs_advantage: f64,
    /// Fraction of retained groups in the preference-seeking phase; only
    /// meaningful for the corpo baseline.
    pub fraction_phase2: Option<f64>,
    pub weights: WeightStats,
    /// `(pass@k, mean@k)` per eval set, aligned with the configured set
    /// order; `None` on steps without an evaluation.
    pub evals: Option<Vec<(f64, f64)>>,
}

/// Fixed base columns of the metrics CSV.
pub const CSV_BASE_HEADER: [&str; 18] = [
    "step",
    "baseline",
    "n_groups",
    "n_dropped",
    "q_failed_pos",
    "q_failed_nonpos",
    "q_correct_pos",
    "q_correct_nonpos",
    "r_count",
    "r_loss",
    "mean_abs_adv",
    "fraction_phase2",
    "w_min",
    "w_max",
    "w_mean",
    "w_median",
    "w_l1",
    "w_l2",
];

/// Full header: base columns plus `<set>_pass@<k>` and `<set>_mean@<k>` per
/// eval set.
pub fn csv_header(eval_sets: &[String], k: usize) -> Vec<String> {
    let mut header: Vec<String> = CSV_BASE_HEADER.iter().map(|s| s.to_string()).collect();
    for set in eval_sets {
        header.push(format!("{set}_pass@{k}"));
        header.push(format!("{set}_mean@{k}"));
    }
    header
}

fn fmt_opt(value: Option<f64>) -> String {
    value.map(|v| v.to_string()).unwrap_or_default()
}

impl MetricsRecord {
    /// Serialize in the column order of [`csv_header`]; `n_eval_sets` fixes
    /// the trailing column count so rows without evaluations stay aligned.
    pub fn to_csv_row(&self, n_eval_sets: usize) -> Vec<String> {
        let q = &self.quadrants.counts;
        let mut row = vec![
            self.step.to_string(),
            self.baseline.clone(),
            self.n_groups.to_string(),
            self.n_dropped.to_string(),
            q[0].to_string(),
            q[1].to_string(),
            q[2].to_string(),
            q[3].to_string(),
            fmt_opt(self.r_count),
            fmt_opt(self.r_loss),
            self.mean_abs_advantage.to_string(),
            fmt_opt(self.fraction_phase2),
            self.weights.min.to_string(),
            self.weights.max.to_string(),
            self.weights.mean.to_string(),
            self.weights.median.to_string(),
            self.weights.l1.to_string(),
            self.weights.l2.to_string(),
        ];
        match &self.evals {
            Some(scores) => {
                debug_assert_eq!(scores.len(), n_eval_sets);
                for &(pass, mean) in scores {
                    row.push(pass.to_string());
                    row.push(mean.to_string());
                }
            }
            None => row.extend(std::iter::repeat(String::new()).take(2 * n_eval_sets)),
        }
        row
    }
}
