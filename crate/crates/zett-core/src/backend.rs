//! Scoring backends: the interface the decoder uses to ask a model for
//! next-token log-probabilities.
//!
//! The decoder never touches a model directly. It sees a [`ScoringBackend`],
//! which turns (input ids, output prefix) into a full next-token
//! log-distribution. This keeps the search code independent of the network
//! and lets tests substitute scripted or uniform distributions.
//!
//! Sequence scores are *sums* of token log-probabilities (not length
//! averages), including sentinel and terminator tokens. The default
//! [`ScoringBackend::sequence_logprob`] accumulates exactly the same
//! per-step values a beam search would, so a brute-force enumeration using
//! it ranks identically to the search, down to floating-point ties.

use std::collections::HashMap;
use std::sync::Mutex;

use ndarray::Array2;

use crate::model::Seq2Seq;
use crate::rng::{fnv1a64, mix};
use crate::{Result, ZettError};

/// A conditional next-token distribution provider.
///
/// Implementations must be deterministic: the same (input, prefix) pair
/// always yields the same distribution.
pub trait ScoringBackend: Sync {
    /// Size of the output vocabulary (length of every returned vector).
    fn vocab_size(&self) -> usize;

    /// Log-probabilities over the whole vocabulary for the token following
    /// `prefix_ids` given the encoder input `input_ids`. Must be normalized:
    /// `logsumexp(result) == 0` up to rounding.
    fn next_token_logprobs(&self, input_ids: &[u32], prefix_ids: &[u32]) -> Result<Vec<f64>>;

    /// Total log-probability of `output_ids` given `input_ids`: the sum of
    /// per-step log-probabilities of each output token conditioned on the
    /// tokens before it. The empty output scores 0.
    fn sequence_logprob(&self, input_ids: &[u32], output_ids: &[u32]) -> Result<f64> {
        let mut total = 0.0;
        for t in 0..output_ids.len() {
            let dist = self.next_token_logprobs(input_ids, &output_ids[..t])?;
            let id = output_ids[t] as usize;
            if id >= dist.len() {
                return Err(ZettError::model(format!(
                    "token id {id} out of range for vocabulary of {}",
                    dist.len()
                )));
            }
            total += dist[id];
        }
        Ok(total)
    }
}

impl<B: ScoringBackend + ?Sized> ScoringBackend for &B {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }

    fn next_token_logprobs(&self, input_ids: &[u32], prefix_ids: &[u32]) -> Result<Vec<f64>> {
        (**self).next_token_logprobs(input_ids, prefix_ids)
    }

    fn sequence_logprob(&self, input_ids: &[u32], output_ids: &[u32]) -> Result<f64> {
        (**self).sequence_logprob(input_ids, output_ids)
    }
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&x| x - lse).collect()
}

/// Backend over the built-in sequence-to-sequence model.
///
/// During search the input is fixed while prefixes vary, so encoder outputs
/// are cached per input and reused across steps. The cache holds a handful
/// of recent inputs so concurrent decodes of different prompts do not evict
/// each other; it only affects speed, never results.
pub struct MicroBackend {
    model: Seq2Seq,
    cache: Mutex<Vec<(Vec<u32>, Array2<f64>)>>,
}

const ENCODER_CACHE_CAP: usize = 8;

impl MicroBackend {
    pub fn new(model: Seq2Seq) -> Self {
        MicroBackend { model, cache: Mutex::new(Vec::new()) }
    }

    pub fn model(&self) -> &Seq2Seq {
        &self.model
    }

    pub fn into_model(self) -> Seq2Seq {
        self.model
    }

    fn encoded(&self, input_ids: &[u32]) -> Result<Array2<f64>> {
        {
            let mut guard = self.cache.lock().expect("encoder cache poisoned");
            if let Some(pos) = guard.iter().position(|(ids, _)| ids == input_ids) {
                let hit = guard.remove(pos);
                let enc = hit.1.clone();
                guard.push(hit);
                return Ok(enc);
            }
        }
        let enc = self.model.encode_input(input_ids)?;
        let mut guard = self.cache.lock().expect("encoder cache poisoned");
        if guard.iter().all(|(ids, _)| ids != input_ids) {
            if guard.len() == ENCODER_CACHE_CAP {
                guard.remove(0);
            }
            guard.push((input_ids.to_vec(), enc.clone()));
        }
        Ok(enc)
    }
}

impl ScoringBackend for MicroBackend {
    fn vocab_size(&self) -> usize {
        self.model.config().vocab_size
    }

    fn next_token_logprobs(&self, input_ids: &[u32], prefix_ids: &[u32]) -> Result<Vec<f64>> {
        let enc = self.encoded(input_ids)?;
        let logits = self.model.next_logits_with_enc(&enc, prefix_ids)?;
        Ok(log_softmax(&logits))
    }
}

/// Uniform distribution over the vocabulary regardless of input. Useful for
/// tests that only care about search mechanics, not scores.
pub struct UniformBackend {
    pub vocab_size: usize,
}

impl ScoringBackend for UniformBackend {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn next_token_logprobs(&self, _input_ids: &[u32], _prefix_ids: &[u32]) -> Result<Vec<f64>> {
        let lp = -(self.vocab_size as f64).ln();
        Ok(vec![lp; self.vocab_size])
    }
}

/// Deterministic pseudo-random distributions derived by hashing
/// (seed, input, prefix). Every conditional distribution is fixed but
/// arbitrary, which makes exhaustive-search oracles meaningful without
/// training a model.
pub struct HashBackend {
    pub vocab_size: usize,
    pub seed: u64,
}

impl HashBackend {
    pub fn new(vocab_size: usize, seed: u64) -> Self {
        HashBackend { vocab_size, seed }
    }
}

impl ScoringBackend for HashBackend {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn next_token_logprobs(&self, input_ids: &[u32], prefix_ids: &[u32]) -> Result<Vec<f64>> {
        let mut h = self.seed ^ fnv1a64(b"hash-backend");
        for &id in input_ids {
            h = mix(h ^ (id as u64));
        }
        h = mix(h ^ 0xA5A5_A5A5_A5A5_A5A5);
        for &id in prefix_ids {
            h = mix(h ^ (id as u64));
        }
        // Logits in [-3, 3): wide enough that distributions are far from
        // uniform, narrow enough to avoid degenerate near-one-hot rows.
        let logits: Vec<f64> = (0..self.vocab_size)
            .map(|v| {
                let bits = mix(h ^ (v as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                let unit = (bits >> 11) as f64 / (1u64 << 53) as f64;
                unit * 6.0 - 3.0
            })
            .collect();
        Ok(log_softmax(&logits))
    }
}

/// Fully scripted backend: an explicit table from output prefix to logits,
/// with a uniform fallback for prefixes not listed. Input ids are ignored.
/// Lets tests pin down exact rankings, ties, and terminator behavior.
pub struct TableBackend {
    vocab_size: usize,
    rules: HashMap<Vec<u32>, Vec<f64>>,
}

impl TableBackend {
    pub fn new(vocab_size: usize) -> Self {
        TableBackend { vocab_size, rules: HashMap::new() }
    }

    /// Sets the logits produced after `prefix`. Normalized internally.
    pub fn rule(mut self, prefix: &[u32], logits: &[f64]) -> Self {
        assert_eq!(logits.len(), self.vocab_size, "logit row must cover the vocabulary");
        self.rules.insert(prefix.to_vec(), logits.to_vec());
        self
    }
}

impl ScoringBackend for TableBackend {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn next_token_logprobs(&self, _input_ids: &[u32], prefix_ids: &[u32]) -> Result<Vec<f64>> {
        match self.rules.get(prefix_ids) {
            Some(logits) => Ok(log_softmax(logits)),
            None => Ok(vec![-(self.vocab_size as f64).ln(); self.vocab_size]),
        }
    }
}
