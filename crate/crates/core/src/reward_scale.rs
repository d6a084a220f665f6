//! Ordinal reward scales.
//!
//! Rewards are drawn from an ordered discrete scale granting partial credit.
//! A scale carries a correctness threshold: the first level counted as
//! "acceptably correct". Everything below it is a failed outcome. The module
//! also implements bucketing of a fine scale onto a coarser one (e.g. the
//! default 10-point scale onto the 4-point scale) while preserving both the
//! level order and the correct/failed partition.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An ordered list of scalar reward levels with a correctness threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrdinalScale {
    name: String,
    levels: Vec<f64>,
    correct_index: usize,
}

impl OrdinalScale {
    /// Build a scale. `levels` must be strictly increasing with at least two
    /// entries and `correct_index` must be in range.
    pub fn new(name: impl Into<String>, levels: Vec<f64>, correct_index: usize) -> Result<Self> {
        let name = name.into();
        if levels.len() < 2 {
            return Err(Error::config(format!(
                "scale `{name}`: needs at least 2 levels, got {}",
                levels.len()
            )));
        }
        if levels.iter().any(|v| !v.is_finite()) {
            return Err(Error::config(format!("scale `{name}`: levels must be finite")));
        }
        if levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(format!(
                "scale `{name}`: levels must be strictly increasing"
            )));
        }
        if correct_index >= levels.len() {
            return Err(Error::config(format!(
                "scale `{name}`: correct_index {correct_index} out of range for {} levels",
                levels.len()
            )));
        }
        Ok(OrdinalScale { name, levels, correct_index })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        false // construction enforces >= 2 levels
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn correct_index(&self) -> usize {
        self.correct_index
    }

    /// Scalar reward for a level index.
    pub fn reward(&self, level_index: usize) -> Result<f64> {
        self.levels.get(level_index).copied().ok_or_else(|| {
            Error::domain(format!(
                "level index {level_index} out of range for scale `{}` of length {}",
                self.name,
                self.levels.len()
            ))
        })
    }

    /// Minimum reward counted as acceptably correct.
    pub fn r_min_correct(&self) -> f64 {
        self.levels[self.correct_index]
    }

    /// A reward exactly at the threshold counts as correct; failed outcomes
    /// sit strictly below it.
    pub fn is_correct(&self, reward: f64) -> bool {
        reward >= self.r_min_correct()
    }
}

/// Identifies a graded outcome: a level on a named scale.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradedOutcome {
    pub level_index: usize,
    pub scale_id: String,
}

/// Total, monotone mapping from the levels of a source scale onto a coarser
/// target scale.
#[derive(Debug, Clone, PartialEq)]
pub struct BucketMap {
    source_len: usize,
    target_len: usize,
    map: Vec<usize>,
}

impl BucketMap {
    /// `bucket_starts[t]` is the first source index of target bucket `t`.
    /// The starts must begin at 0, be strictly increasing, and partition the
    /// source range into exactly `target.len()` contiguous buckets. The
    /// bucket containing `source.correct_index` must land on
    /// `target.correct_index`, and correctness classification must be
    /// preserved for every source level.
    pub fn new(source: &OrdinalScale, target: &OrdinalScale, bucket_starts: &[usize]) -> Result<Self> {
        if bucket_starts.len() != target.len() {
            return Err(Error::config(format!(
                "bucketize {} -> {}: {} bucket starts for {} target levels",
                source.name(),
                target.name(),
                bucket_starts.len(),
                target.len()
            )));
        }
        if bucket_starts.first() != Some(&0) {
            return Err(Error::config("bucketize: first bucket must start at source index 0".to_string()));
        }
        if bucket_starts.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("bucketize: bucket starts must be strictly increasing".to_string()));
        }
        if *bucket_starts.last().unwrap() >= source.len() {
            return Err(Error::config(format!(
                "bucketize: last bucket start {} out of range for source of length {}",
                bucket_starts.last().unwrap(),
                source.len()
            )));
        }

        let mut map = vec![0usize; source.len()];
        for (bucket, &start) in bucket_starts.iter().enumerate() {
            let end = bucket_starts.get(bucket + 1).copied().unwrap_or(source.len());
            for entry in &mut map[start..end] {
                *entry = bucket;
            }
        }

        if map[source.correct_index()] != target.correct_index() {
            return Err(Error::config(format!(
                "bucketize: source correct_index {} maps to target bucket {} but target correct_index is {}",
                source.correct_index(),
                map[source.correct_index()],
                target.correct_index()
            )));
        }
        for (level, &bucket) in map.iter().enumerate() {
            let src_reward = source.reward(level)?;
            let dst_reward = target.reward(bucket)?;
            if source.is_correct(src_reward) != target.is_correct(dst_reward) {
                return Err(Error::config(format!(
                    "bucketize: source level {level} ({src_reward}) and its bucket {bucket} ({dst_reward}) disagree on correctness"
                )));
            }
        }

        Ok(BucketMap { source_len: source.len(), target_len: target.len(), map })
    }

    pub fn source_len(&self) -> usize {
        self.source_len
    }

    pub fn target_len(&self) -> usize {
        self.target_len
    }

    /// Target bucket for a source level.
    pub fn map_level(&self, source_level: usize) -> Result<usize> {
        self.map.get(source_level).copied().ok_or_else(|| {
            Error::domain(format!(
                "source level {source_level} out of range for bucket map over {} levels",
                self.source_len
            ))
        })
    }
}

/// Build the mapping from `source` onto `target` given bucket start indices.
pub fn bucketize(source: &OrdinalScale, target: &OrdinalScale, bucket_starts: &[usize]) -> Result<BucketMap> {
    BucketMap::new(source, target, bucket_starts)
}

/// Default 10-step scale: {-5,...,-1,+1,...,+5}, no zero level, threshold at
/// +1. Failed rewards are literally negative.
pub fn ten_point_default() -> OrdinalScale {
    OrdinalScale::new(
        "ten_point",
        vec![-5.0, -4.0, -3.0, -2.0, -1.0, 1.0, 2.0, 3.0, 4.0, 5.0],
        5,
    )
    .expect("default scale is valid")
}

/// Default 4-step scale: {-2,-1,+1,+2}, threshold at +1.
pub fn four_point_default() -> OrdinalScale {
    OrdinalScale::new("four_point", vec![-2.0, -1.0, 1.0, 2.0], 2).expect("default scale is valid")
}

/// Default 10 -> 4 bucket starts: {-5..-3}, {-2..-1}, {+1..+3}, {+4..+5}.
/// Never merges a failed level with a correct one.
pub fn default_bucket_starts() -> Vec<usize> {
    vec![0, 3, 5, 8]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn eleven_point() -> OrdinalScale {
        // -5..=+5 step 1, zero level included.
        let levels = (-5..=5).map(f64::from).collect();
        OrdinalScale::new("eleven_point", levels, 6).unwrap()
    }

    #[test]
    fn level_to_reward_lookup() {
        let scale = eleven_point();
        assert_eq!(scale.reward(10).unwrap(), 5.0);
        assert_eq!(scale.reward(0).unwrap(), -5.0);
        let four = four_point_default();
        assert_eq!(four.reward(2).unwrap(), 1.0);
        assert!(scale.reward(11).is_err());
    }

    #[test]
    fn correctness_threshold_boundary() {
        let scale = OrdinalScale::new("t", vec![-1.0, 0.0, 1.0], 1).unwrap();
        assert_eq!(scale.r_min_correct(), 0.0);
        assert!(!scale.is_correct(-0.5));
        assert!(scale.is_correct(0.0)); // boundary counts as correct
        assert!(scale.is_correct(3.0));
    }

    #[test]
    fn construction_rejects_bad_scales() {
        assert!(OrdinalScale::new("x", vec![1.0], 0).is_err());
        assert!(OrdinalScale::new("x", vec![1.0, 1.0], 0).is_err());
        assert!(OrdinalScale::new("x", vec![2.0, 1.0], 0).is_err());
        assert!(OrdinalScale::new("x", vec![1.0, 2.0], 2).is_err());
        assert!(OrdinalScale::new("x", vec![1.0, f64::NAN], 0).is_err());
    }

    #[test]
    fn default_bucket_map_top_to_top_and_identity() {
        // 11-level source, buckets {0-3},{4-5},{6-7},{8-10}
        let map = BucketMap::new(&eleven_point(), &four_point_default(), &[0, 4, 6, 8]).unwrap();
        assert_eq!(map.map_level(10).unwrap(), 3); // top maps to top

        // identity boundaries: one level per bucket.
        let ten = ten_point_default();
        let identity = BucketMap::new(&ten, &ten, &(0..10).collect::<Vec<_>>()).unwrap();
        for level in 0..10 {
            assert_eq!(identity.map_level(level).unwrap(), level);
        }
    }

    #[test]
    fn default_ten_to_four_preserves_order_and_correctness() {
        let ten = ten_point_default();
        let four = four_point_default();
        let map = BucketMap::new(&ten, &four, &default_bucket_starts()).unwrap();
        let mut last = 0;
        for level in 0..ten.len() {
            let bucket = map.map_level(level).unwrap();
            assert!(bucket >= last, "mapping must be monotone");
            last = bucket;
            let src = ten.reward(level).unwrap();
            let dst = four.reward(bucket).unwrap();
            assert_eq!(ten.is_correct(src), four.is_correct(dst));
        }
    }

    #[test]
    fn randomized_boundaries_stay_monotone() {
        // brute-force check over all source indices for random valid starts
        let mut rng = crate::rng::stream_rng(11, crate::rng::Stream::Dataset, &[0]);
        let levels: Vec<f64> = (0..12).map(|i| i as f64 - 6.0).collect();
        let source = OrdinalScale::new("src", levels, 6).unwrap();
        for _ in 0..200 {
            // pick 3 distinct interior cut points; threshold index 6 must be
            // a bucket start so correctness is preserved.
            let mut cuts = vec![6usize];
            while cuts.len() < 4 {
                let c = rng.gen_range(1..12);
                if !cuts.contains(&c) {
                    cuts.push(c);
                }
            }
            cuts.sort_unstable();
            let starts: Vec<usize> = std::iter::once(0).chain(cuts.iter().copied()).collect();
            let n_below = starts.iter().filter(|&&s| s < 6).count();
            let target_levels: Vec<f64> = (0..5).map(|i| i as f64 - n_below as f64).collect();
            let target = OrdinalScale::new("dst", target_levels, n_below).unwrap();
            let map = BucketMap::new(&source, &target, &starts).unwrap();
            let mut last = 0;
            for level in 0..source.len() {
                let bucket = map.map_level(level).unwrap();
                assert!(bucket >= last);
                last = bucket;
            }
            assert_eq!(last, target.len() - 1, "mapping must be onto");
        }
    }

    #[test]
    fn bucket_map_rejects_inconsistent_boundaries() {
        let ten = ten_point_default();
        let four = four_point_default();
        assert!(BucketMap::new(&ten, &four, &[0, 3, 5]).is_err()); // wrong count
        assert!(BucketMap::new(&ten, &four, &[1, 3, 5, 8]).is_err()); // first not 0
        assert!(BucketMap::new(&ten, &four, &[0, 5, 3, 8]).is_err()); // not increasing
        assert!(BucketMap::new(&ten, &four, &[0, 3, 5, 12]).is_err()); // out of range
        // merging failed level -1 with correct +1 breaks the partition
        assert!(BucketMap::new(&ten, &four, &[0, 3, 4, 8]).is_err());
    }

    proptest! {
        #[test]
        fn correctness_is_upward_closed(correct_index in 0usize..8, a in 0usize..8, b in 0usize..8) {
            let levels: Vec<f64> = (0..8).map(|i| i as f64 * 0.5 - 2.0).collect();
            let scale = OrdinalScale::new("p", levels, correct_index).unwrap();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let r1 = scale.reward(lo).unwrap();
            let r2 = scale.reward(hi).unwrap();
            prop_assert!(r1 <= r2);
            if scale.is_correct(r1) {
                prop_assert!(scale.is_correct(r2));
            }
        }
    }
}
