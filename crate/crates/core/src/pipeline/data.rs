use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assemble::greedy_tokens;
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

/// Synthetic sequence task for the toy model: each position predicts a token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    #[default]
    Copy,
    Reverse,
}

impl Task {
    pub fn targets(self, tokens: &[usize]) -> Vec<usize> {
        match self {
            Task::Copy => tokens.to_vec(),
            Task::Reverse => tokens.iter().rev().copied().collect(),
        }
    }
}

/// Input distributions for capture and evaluation.
///
/// Narrow inputs draw from the first `narrow_alphabet` tokens at one fixed
/// length; broad inputs use the whole vocabulary and lengths in
/// `broad_min_len..=broad_max_len`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub narrow_alphabet: usize,
    pub narrow_len: usize,
    pub broad_min_len: usize,
    pub broad_max_len: usize,
    /// Sequences captured per layer for fine-tuning.
    pub capture_samples: usize,
    /// Sequences per evaluation distribution.
    pub eval_samples: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            narrow_alphabet: 6,
            narrow_len: 8,
            broad_min_len: 4,
            broad_max_len: 12,
            capture_samples: 200,
            eval_samples: 64,
        }
    }
}

impl DataSection {
    pub fn validate(&self, vocab: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.narrow_alphabet == 0 || self.narrow_alphabet > vocab {
            return bad(format!("narrow_alphabet {} must be in 1..={vocab}", self.narrow_alphabet));
        }
        if self.narrow_len == 0 || self.broad_min_len == 0 || self.broad_min_len > self.broad_max_len {
            return bad(format!(
                "sequence lengths must be positive with broad_min_len ≤ broad_max_len: {self:?}"
            ));
        }
        if self.capture_samples == 0 || self.eval_samples == 0 {
            return bad("capture_samples and eval_samples must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputDistribution {
    Narrow,
    Broad,
}

impl InputDistribution {
    pub fn label(self) -> &'static str {
        match self {
            InputDistribution::Narrow => "narrow",
            InputDistribution::Broad => "broad",
        }
    }
}

/// RNG stream for one named use of the run seed.
pub fn purpose_rng(seed: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Odd/even streams below this are taken by per-layer init and shuffling.
    rng.set_stream(1 << 32 | purpose);
    rng
}

pub fn sample_sequence(data: &DataSection, vocab: usize, dist: InputDistribution, rng: &mut impl Rng) -> Vec<usize> {
    match dist {
        InputDistribution::Narrow => (0..data.narrow_len)
            .map(|_| rng.random_range(0..data.narrow_alphabet))
            .collect(),
        InputDistribution::Broad => {
            let n = rng.random_range(data.broad_min_len..=data.broad_max_len);
            (0..n).map(|_| rng.random_range(0..vocab)).collect()
        }
    }
}

pub fn sample_inputs(
    data: &DataSection,
    vocab: usize,
    dist: InputDistribution,
    count: usize,
    rng: &mut impl Rng,
) -> Vec<Vec<usize>> {
    (0..count).map(|_| sample_sequence(data, vocab, dist, rng)).collect()
}

/// Levenshtein distance over token sequences.
pub fn edit_distance(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Total edit distance between greedy outputs and task targets, over total
/// target length.
pub fn token_error_rate(task: Task, inputs: &[Vec<usize>], logits: &[DenseMatrix]) -> f64 {
    let mut errors = 0usize;
    let mut total = 0usize;
    for (tokens, l) in inputs.iter().zip(logits) {
        let target = task.targets(tokens);
        errors += edit_distance(&greedy_tokens(l), &target);
        total += target.len();
    }
    if total == 0 {
        0.0
    } else {
        errors as f64 / total as f64
    }
}

/// Fraction of positions whose greedy token equals the task target.
pub fn token_accuracy(task: Task, inputs: &[Vec<usize>], logits: &[DenseMatrix]) -> f64 {
    let mut right = 0usize;
    let mut total = 0usize;
    for (tokens, l) in inputs.iter().zip(logits) {
        let target = task.targets(tokens);
        right += greedy_tokens(l).iter().zip(&target).filter(|(a, b)| a == b).count();
        total += target.len();
    }
    if total == 0 {
        0.0
    } else {
        right as f64 / total as f64
    }
}
