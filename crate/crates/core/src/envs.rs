//! Synthetic prompt/grading environments producing ordinal rewards.
//!
//! Two desk-scale tasks stand in for graded verification work:
//!
//! * `SequenceMatchEnv` — each prompt hides a target token sequence; a
//!   rollout is graded by the fraction of positions it matches, mapped onto
//!   the ordinal scale. Targets are drawn from a shared first-order chain so
//!   a single unconditioned policy can actually learn the task: the
//!   `target_similarity` knob interpolates between identical targets (1.0)
//!   and i.i.d. uniform targets (0.0).
//! * `PairRatingEnv` — each prompt hides two binary labels; the policy emits
//!   two rating tokens in 0..=10 and is scored by the binary cross-entropy
//!   between the normalized rating difference and the label comparison.
//!
//! Grading is pure and deterministic; environments are immutable after
//! construction and safe to share across threads.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::Trajectory;
use crate::reward_scale::{GradedOutcome, OrdinalScale};

/// Rating tokens for `PairRatingEnv` are integers 0..=10.
pub const RATING_MAX: usize = 10;
/// Clip for the BCE probability, avoiding infinite loss at saturation.
pub const BCE_CLIP: f64 = 1e-6;

/// Environment-specific hidden grading data for one prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PromptPayload {
    SequenceTarget { tokens: Vec<usize> },
    PairLabels { label_a: bool, label_b: bool },
}

/// One dataset entry: a unique id plus the hidden payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub id: u64,
    #[serde(flatten)]
    pub payload: PromptPayload,
}

/// Hidden-target matching task.
#[derive(Debug, Clone)]
pub struct SequenceMatchEnv {
    vocab_size: usize,
    seq_len: usize,
    scale: OrdinalScale,
    target_similarity: f64,
}

impl SequenceMatchEnv {
    pub fn new(vocab_size: usize, seq_len: usize, scale: OrdinalScale, target_similarity: f64) -> Result<Self> {
        if vocab_size < 2 {
            return Err(Error::config(format!("sequence_match: vocab_size must be >= 2, got {vocab_size}")));
        }
        if seq_len < 1 {
            return Err(Error::config("sequence_match: seq_len must be >= 1".to_string()));
        }
        if !(0.0..=1.0).contains(&target_similarity) {
            return Err(Error::config(format!(
                "sequence_match: target_similarity must be in [0, 1], got {target_similarity}"
            )));
        }
        Ok(SequenceMatchEnv { vocab_size, seq_len, scale, target_similarity })
    }

    /// Count of positions where the trajectory matches the target.
    pub fn match_count(&self, tokens: &[usize], target: &[usize]) -> usize {
        tokens.iter().zip(target).filter(|(a, b)| a == b).count()
    }

    pub fn grade(&self, prompt: &Prompt, trajectory: &Trajectory) -> Result<GradedOutcome> {
        let PromptPayload::SequenceTarget { tokens: target } = &prompt.payload else {
            return Err(Error::domain(format!(
                "prompt {} does not carry a sequence target",
                prompt.id
            )));
        };
        if trajectory.tokens.len() != self.seq_len {
            return Err(Error::domain(format!(
                "trajectory length {} does not match seq_len {}",
                trajectory.tokens.len(),
                self.seq_len
            )));
        }
        let match_fraction = self.match_count(&trajectory.tokens, target) as f64 / self.seq_len as f64;
        let level_index = (match_fraction * (self.scale.len() - 1) as f64).floor() as usize;
        Ok(GradedOutcome { level_index, scale_id: self.scale.name().to_string() })
    }

    /// Draw `n_prompts` hidden targets from a shared preferred-transition
    /// chain: at each position the target follows the chain's preferred next
    /// token with probability `target_similarity`, otherwise a uniform token.
    pub fn make_dataset(&self, n_prompts: usize, rng: &mut impl Rng) -> Result<Vec<Prompt>> {
        if n_prompts < 1 {
            return Err(Error::domain("make_dataset: n_prompts must be >= 1".to_string()));
        }
        // preferred next token for the start state and each previous token
        let preferred: Vec<usize> =
            (0..=self.vocab_size).map(|_| rng.gen_range(0..self.vocab_size)).collect();
        let mut prompts = Vec::with_capacity(n_prompts);
        for id in 0..n_prompts {
            let mut tokens = Vec::with_capacity(self.seq_len);
            for pos in 0..self.seq_len {
                let state = if pos == 0 { 0 } else { 1 + tokens[pos - 1] };
                let token = if rng.gen::<f64>() < self.target_similarity {
                    preferred[state]
                } else {
                    rng.gen_range(0..self.vocab_size)
                };
                tokens.push(token);
            }
            prompts.push(Prompt { id: id as u64, payload: PromptPayload::SequenceTarget { tokens } });
        }
        Ok(prompts)
    }
}

/// Pairwise-rating task scored by binary cross-entropy.
#[derive(Debug, Clone)]
pub struct PairRatingEnv {
    scale: OrdinalScale,
}

impl PairRatingEnv {
    /// The loss-to-level buckets are equal-width over [0, 2 ln 2], so the
    /// correctness boundary (loss = ln 2, i.e. the rating difference points
    /// the right way) falls on a bucket edge only when the scale has an even
    /// number of levels with the threshold exactly halfway.
    pub fn new(scale: OrdinalScale) -> Result<Self> {
        if scale.len() % 2 != 0 || scale.correct_index() != scale.len() / 2 {
            return Err(Error::config(format!(
                "pair_rating: scale `{}` must have an even level count with correct_index at the midpoint \
                 so that correctness means the pair is ranked the right way",
                scale.name()
            )));
        }
        Ok(PairRatingEnv { scale })
    }

    /// BCE between the normalized rating difference and the label comparison.
    pub fn bce_loss(v_a: usize, v_b: usize, label: bool) -> Result<f64> {
        if v_a > RATING_MAX || v_b > RATING_MAX {
            return Err(Error::domain(format!(
                "ratings must be in 0..={RATING_MAX}, got ({v_a}, {v_b})"
            )));
        }
        let p = ((v_b as f64 - v_a as f64 + 10.0) / 20.0).clamp(BCE_CLIP, 1.0 - BCE_CLIP);
        let target = if label { 1.0 } else { 0.0 };
        Ok(-(target * p.ln() + (1.0 - target) * (1.0 - p).ln()))
    }

    pub fn grade_ratings(&self, v_a: usize, v_b: usize, prompt: &Prompt) -> Result<GradedOutcome> {
        let PromptPayload::PairLabels { label_a, label_b } = &prompt.payload else {
            return Err(Error::domain(format!("prompt {} does not carry pair labels", prompt.id)));
        };
        let label = *label_b && !*label_a;
        let loss = Self::bce_loss(v_a, v_b, label)?;
        let levels = self.scale.len();
        let span = 2.0 * std::f64::consts::LN_2;
        let level_index = if loss >= span {
            0
        } else {
            levels - 1 - (loss / (span / levels as f64)).floor() as usize
        };
        Ok(GradedOutcome { level_index, scale_id: self.scale.name().to_string() })
    }

    pub fn grade(&self, prompt: &Prompt, trajectory: &Trajectory) -> Result<GradedOutcome> {
        if trajectory.tokens.len() != 2 {
            return Err(Error::domain(format!(
                "pair_rating expects exactly two rating tokens, got {}",
                trajectory.tokens.len()
            )));
        }
        self.grade_ratings(trajectory.tokens[0], trajectory.tokens[1], prompt)
    }

    /// Labels are drawn so exactly one response is correct, mirroring
    /// pairwise verification.
    pub fn make_dataset(&self, n_prompts: usize, rng: &mut impl Rng) -> Result<Vec<Prompt>> {
        if n_prompts < 1 {
            return Err(Error::domain("make_dataset: n_prompts must be >= 1".to_string()));
        }
        Ok((0..n_prompts)
            .map(|id| {
                let label_b = rng.gen::<bool>();
                Prompt {
                    id: id as u64,
                    payload: PromptPayload::PairLabels { label_a: !label_b, label_b },
                }
            })
            .collect())
    }
}

/// The environment an experiment runs against.
#[derive(Debug, Clone)]
pub enum Environment {
    SequenceMatch(SequenceMatchEnv),
    PairRating(PairRatingEnv),
}

impl Environment {
    pub fn vocab_size(&self) -> usize {
        match self {
            Environment::SequenceMatch(env) => env.vocab_size,
            Environment::PairRating(_) => RATING_MAX + 1,
        }
    }

    pub fn seq_len(&self) -> usize {
        match self {
            Environment::SequenceMatch(env) => env.seq_len,
            Environment::PairRating(_) => 2,
        }
    }

    /// The scale grading is expressed in.
    pub fn scale(&self) -> &OrdinalScale {
        match self {
            Environment::SequenceMatch(env) => &env.scale,
            Environment::PairRating(env) => &env.scale,
        }
    }

    pub fn grade(&self, prompt: &Prompt, trajectory: &Trajectory) -> Result<GradedOutcome> {
        match self {
            Environment::SequenceMatch(env) => env.grade(prompt, trajectory),
            Environment::PairRating(env) => env.grade(prompt, trajectory),
        }
    }

    pub fn make_dataset(&self, n_prompts: usize, rng: &mut impl Rng) -> Result<Vec<Prompt>> {
        match self {
            Environment::SequenceMatch(env) => env.make_dataset(n_prompts, rng),
            Environment::PairRating(env) => env.make_dataset(n_prompts, rng),
        }
    }

    /// Check a loaded dataset against this environment's shape.
    pub fn validate_dataset(&self, prompts: &[Prompt]) -> Result<()> {
        for prompt in prompts {
            match (self, &prompt.payload) {
                (Environment::SequenceMatch(env), PromptPayload::SequenceTarget { tokens }) => {
                    if tokens.len() != env.seq_len {
                        return Err(Error::config(format!(
                            "prompt {}: target length {} does not match seq_len {}",
                            prompt.id,
                            tokens.len(),
                            env.seq_len
                        )));
                    }
                    if tokens.iter().any(|&t| t >= env.vocab_size) {
                        return Err(Error::config(format!(
                            "prompt {}: target token outside vocabulary of size {}",
                            prompt.id, env.vocab_size
                        )));
                    }
                }
                (Environment::PairRating(_), PromptPayload::PairLabels { .. }) => {}
                _ => {
                    return Err(Error::config(format!(
                        "prompt {}: payload does not match environment kind",
                        prompt.id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Write one JSON record per prompt.
pub fn write_dataset(path: &Path, prompts: &[Prompt]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = std::io::BufWriter::new(file);
    for prompt in prompts {
        let line = serde_json::to_string(prompt)
            .map_err(|e| Error::format(path, format!("serialize prompt {}: {e}", prompt.id)))?;
        writeln!(writer, "{line}").map_err(|e| Error::io(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

/// Read a line-delimited dataset file.
pub fn read_dataset(path: &Path) -> Result<Vec<Prompt>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut prompts = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let prompt: Prompt = serde_json::from_str(&line)
            .map_err(|e| Error::format(path, format!("line {}: {e}", lineno + 1)))?;
        prompts.push(prompt);
    }
    Ok(prompts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reward_scale::{four_point_default, ten_point_default};
    use crate::rng::{stream_rng, Stream};

    fn seq_env() -> SequenceMatchEnv {
        SequenceMatchEnv::new(6, 5, ten_point_default(), 0.75).unwrap()
    }

    fn traj(tokens: Vec<usize>) -> Trajectory {
        Trajectory { prompt_id: 0, tokens, logprobs: vec![], reward: 0.0, correct: false }
    }

    fn target_prompt(tokens: Vec<usize>) -> Prompt {
        Prompt { id: 0, payload: PromptPayload::SequenceTarget { tokens } }
    }

    #[test]
    fn perfect_and_zero_match_grades() {
        let env = seq_env();
        let prompt = target_prompt(vec![1, 2, 3, 4, 5]);
        let top = env.grade(&prompt, &traj(vec![1, 2, 3, 4, 5])).unwrap();
        assert_eq!(top.level_index, 9);
        let bottom = env.grade(&prompt, &traj(vec![0, 0, 0, 0, 0])).unwrap();
        assert_eq!(bottom.level_index, 0);
        assert!(env.grade(&prompt, &traj(vec![1, 2])).is_err());
    }

    #[test]
    fn grade_matches_counting_oracle() {
        let env = seq_env();
        let mut rng = stream_rng(21, Stream::Dataset, &[0]);
        let prompts = env.make_dataset(16, &mut rng).unwrap();
        for prompt in &prompts {
            let PromptPayload::SequenceTarget { tokens: target } = &prompt.payload else { panic!() };
            for _ in 0..20 {
                let tokens: Vec<usize> = (0..5).map(|_| rand::Rng::gen_range(&mut rng, 0..6)).collect();
                // independent position-by-position count
                let mut matches = 0;
                for i in 0..5 {
                    if tokens[i] == target[i] {
                        matches += 1;
                    }
                }
                let expected = (matches as f64 / 5.0 * 9.0).floor() as usize;
                let outcome = env.grade(prompt, &traj(tokens)).unwrap();
                assert_eq!(outcome.level_index, expected);
            }
        }
    }

    #[test]
    fn grade_is_monotone_in_matches() {
        let env = seq_env();
        let prompt = target_prompt(vec![0, 1, 2, 3, 4]);
        let mut last = 0;
        for matches in 0..=5usize {
            // build a trajectory with exactly `matches` matching positions
            let tokens: Vec<usize> =
                (0..5).map(|i| if i < matches { i } else { (i + 1) % 6 }).collect();
            let level = env.grade(&prompt, &traj(tokens)).unwrap().level_index;
            assert!(level >= last);
            last = level;
        }
        assert_eq!(last, 9);
    }

    #[test]
    fn multiple_distinct_sequences_reach_correctness() {
        let env = seq_env();
        let prompt = target_prompt(vec![0, 1, 2, 3, 4]);
        let scale = ten_point_default();
        // 4/5 matches in different positions: distinct correct sequences
        let a = env.grade(&prompt, &traj(vec![0, 1, 2, 3, 5])).unwrap();
        let b = env.grade(&prompt, &traj(vec![5, 1, 2, 3, 4])).unwrap();
        assert!(scale.is_correct(scale.reward(a.level_index).unwrap()));
        assert!(scale.is_correct(scale.reward(b.level_index).unwrap()));
    }

    #[test]
    fn dataset_determinism_and_ids() {
        let env = seq_env();
        let a = env.make_dataset(16, &mut stream_rng(5, Stream::Dataset, &[0])).unwrap();
        let b = env.make_dataset(16, &mut stream_rng(5, Stream::Dataset, &[0])).unwrap();
        assert_eq!(a, b);
        let ids: Vec<u64> = a.iter().map(|p| p.id).collect();
        assert_eq!(ids, (0..16).collect::<Vec<_>>());
        let single = env.make_dataset(1, &mut stream_rng(5, Stream::Dataset, &[0])).unwrap();
        assert_eq!(single.len(), 1);
    }

    fn pair_env() -> PairRatingEnv {
        PairRatingEnv::new(ten_point_default()).unwrap()
    }

    fn pair_prompt(label_a: bool, label_b: bool) -> Prompt {
        Prompt { id: 0, payload: PromptPayload::PairLabels { label_a, label_b } }
    }

    #[test]
    fn perfect_separation_hits_top_level() {
        let env = pair_env();
        let prompt = pair_prompt(false, true); // label = 1
        let outcome = env.grade_ratings(0, 10, &prompt).unwrap();
        assert_eq!(outcome.level_index, 9);
    }

    #[test]
    fn equal_ratings_are_indifferent() {
        // v_a == v_b: p = 0.5, loss = ln 2 regardless of label, just below
        // the correctness boundary.
        for labels in [(false, true), (true, false)] {
            let env = pair_env();
            let prompt = pair_prompt(labels.0, labels.1);
            let PromptPayload::PairLabels { label_a, label_b } = prompt.payload else { panic!() };
            let loss = PairRatingEnv::bce_loss(4, 4, label_b && !label_a).unwrap();
            assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
            let outcome = env.grade_ratings(4, 4, &prompt).unwrap();
            assert_eq!(outcome.level_index, 4);
            let scale = ten_point_default();
            assert!(!scale.is_correct(scale.reward(outcome.level_index).unwrap()));
        }
    }

    #[test]
    fn bce_matches_direct_formula() {
        let mut rng = stream_rng(22, Stream::Dataset, &[1]);
        for _ in 0..500 {
            let v_a = rand::Rng::gen_range(&mut rng, 0..=10usize);
            let v_b = rand::Rng::gen_range(&mut rng, 0..=10usize);
            let label = rand::Rng::gen::<bool>(&mut rng);
            let loss = PairRatingEnv::bce_loss(v_a, v_b, label).unwrap();
            // direct evaluation
            let p = ((v_b as f64 - v_a as f64 + 10.0) / 20.0).clamp(1e-6, 1.0 - 1e-6);
            let direct = if label { -p.ln() } else { -(1.0 - p).ln() };
            assert!((loss - direct).abs() < 1e-12);
        }
        assert!(PairRatingEnv::bce_loss(11, 0, true).is_err());
    }

    #[test]
    fn ratings_correctness_means_right_direction() {
        let env = pair_env();
        let scale = ten_point_default();
        let prompt = pair_prompt(false, true); // label 1: b should beat a
        for v_a in 0..=10usize {
            for v_b in 0..=10usize {
                let outcome = env.grade_ratings(v_a, v_b, &prompt).unwrap();
                let reward = scale.reward(outcome.level_index).unwrap();
                assert_eq!(scale.is_correct(reward), v_b > v_a, "ratings ({v_a}, {v_b})");
            }
        }
    }

    #[test]
    fn pair_env_rejects_misaligned_scale() {
        let odd = OrdinalScale::new("odd", vec![-1.0, 0.0, 1.0], 1).unwrap();
        assert!(PairRatingEnv::new(odd).is_err());
        assert!(PairRatingEnv::new(four_point_default()).is_ok());
    }

    #[test]
    fn dataset_round_trip() {
        let env = Environment::SequenceMatch(seq_env());
        let prompts = env.make_dataset(8, &mut stream_rng(6, Stream::Dataset, &[0])).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dataset.jsonl");
        write_dataset(&path, &prompts).unwrap();
        let loaded = read_dataset(&path).unwrap();
        assert_eq!(prompts, loaded);
        env.validate_dataset(&loaded).unwrap();

        let pair = Environment::PairRating(pair_env());
        assert!(pair.validate_dataset(&loaded).is_err());
    }
}
