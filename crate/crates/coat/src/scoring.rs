//! Teacher-forced likelihood of the correct prediction.
//!
//! The score of a prompt is the product over target tokens (including the
//! terminal end-of-sequence) of the model's probability of that token
//! given the encoded prompt and all preceding gold target tokens. The
//! demonstration selector minimizes this quantity.

use std::cell::RefCell;

use crate::error::{CoatError, Result};
use crate::model::{KvCache, Scalar, TinyLm};
use crate::prompts::{encode_demo_prefix, tokenize, training_sequence, PromptInstance, Vocabulary};

/// Probability of the correct prediction with its per-token factors.
/// Scores are carried in log space; `value` may underflow to zero for
/// long targets, in which case comparisons should use `log_value`.
#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodScore {
    pub value: f64,
    pub per_token: Vec<f64>,
    pub log_value: f64,
}

impl LikelihoodScore {
    pub fn from_log_probs(log_probs: Vec<f64>) -> Self {
        let log_value: f64 = log_probs.iter().sum();
        LikelihoodScore {
            value: log_value.exp(),
            per_token: log_probs.iter().map(|lp| lp.exp()).collect(),
            log_value,
        }
    }
}

/// Anything that can score a prompt. Implementations must be pure with
/// respect to a fixed model snapshot: the same instance always yields the
/// same score.
pub trait Scorer {
    fn score(&self, p: &PromptInstance) -> Result<LikelihoodScore>;
}

fn log_prob_row<S: Scalar>(logits: &[S], index: usize) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for v in logits {
        max = max.max(v.as_f64());
    }
    let mut sum = 0.0f64;
    for v in logits {
        sum += (v.as_f64() - max).exp();
    }
    logits[index].as_f64() - max - sum.ln()
}

fn check_scoring_args<S: Scalar>(
    m: &TinyLm<S>,
    v: &Vocabulary,
    p: &PromptInstance,
) -> Result<(Vec<u32>, usize)> {
    if p.predicted_target().is_empty() {
        return Err(CoatError::InvalidArgument(
            "cannot score an instance without a predicted target".to_string(),
        ));
    }
    let (ids, target_start) = training_sequence(v, p)?;
    if ids.len() > m.config().max_seq_len {
        return Err(CoatError::InvalidArgument(format!(
            "encoded prompt plus target is {} tokens, over max_seq_len {}",
            ids.len(),
            m.config().max_seq_len
        )));
    }
    Ok((ids, target_start))
}

/// Teacher-forced likelihood of the predicted target (including the
/// terminal end-of-sequence) under the model.
pub fn target_likelihood<S: Scalar>(
    m: &TinyLm<S>,
    v: &Vocabulary,
    p: &PromptInstance,
) -> Result<LikelihoodScore> {
    let (ids, target_start) = check_scoring_args(m, v, p)?;
    let logits = m.forward_logits(&ids)?;
    let log_probs = (target_start..ids.len())
        .map(|pos| log_prob_row(&logits[pos - 1], ids[pos] as usize))
        .collect();
    Ok(LikelihoodScore::from_log_probs(log_probs))
}

/// Scores candidates independently, preserving order. Element errors are
/// reported with the candidate's index.
pub fn batch_scores<S: Scalar>(
    m: &TinyLm<S>,
    v: &Vocabulary,
    candidates: &[PromptInstance],
) -> Result<Vec<LikelihoodScore>> {
    candidates
        .iter()
        .enumerate()
        .map(|(i, p)| {
            target_likelihood(m, v, p).map_err(|e| match e {
                CoatError::InvalidArgument(msg) => {
                    CoatError::InvalidArgument(format!("candidate {i}: {msg}"))
                }
                other => other,
            })
        })
        .collect()
}

/// Plain model-backed scorer.
pub struct ModelScorer<'a, S: Scalar> {
    model: &'a TinyLm<S>,
    vocab: &'a Vocabulary,
}

impl<'a, S: Scalar> ModelScorer<'a, S> {
    pub fn new(model: &'a TinyLm<S>, vocab: &'a Vocabulary) -> Self {
        ModelScorer { model, vocab }
    }
}

impl<S: Scalar> Scorer for ModelScorer<'_, S> {
    fn score(&self, p: &PromptInstance) -> Result<LikelihoodScore> {
        target_likelihood(self.model, self.vocab, p)
    }
}

/// Model-backed scorer that memoizes the key/value cache of the
/// demonstration prefix. Greedy selection scores every remaining
/// candidate against the same already-selected demonstrations, so the
/// prefix forward pass is shared; results are bit-identical to
/// [`target_likelihood`].
pub struct CachedPrefixScorer<'a, S: Scalar> {
    model: &'a TinyLm<S>,
    vocab: &'a Vocabulary,
    memo: RefCell<Option<(Vec<u32>, KvCache<S>)>>,
}

impl<'a, S: Scalar> CachedPrefixScorer<'a, S> {
    pub fn new(model: &'a TinyLm<S>, vocab: &'a Vocabulary) -> Self {
        CachedPrefixScorer {
            model,
            vocab,
            memo: RefCell::new(None),
        }
    }
}

impl<S: Scalar> Scorer for CachedPrefixScorer<'_, S> {
    fn score(&self, p: &PromptInstance) -> Result<LikelihoodScore> {
        let (ids, target_start) = check_scoring_args(self.model, self.vocab, p)?;
        if p.k() < 2 {
            // Nothing worth caching ahead of the last demonstration.
            let logits = self.model.forward_logits(&ids)?;
            let log_probs = (target_start..ids.len())
                .map(|pos| log_prob_row(&logits[pos - 1], ids[pos] as usize))
                .collect();
            return Ok(LikelihoodScore::from_log_probs(log_probs));
        }
        // Shared prefix: every demonstration line except the last one.
        let prefix_ids = tokenize(self.vocab, &encode_demo_prefix(&p.demonstrations()[..p.k() - 1]));
        debug_assert_eq!(&ids[..prefix_ids.len()], &prefix_ids[..]);
        let mut cache = {
            let mut memo = self.memo.borrow_mut();
            match memo.as_ref() {
                Some((cached_ids, cache)) if *cached_ids == prefix_ids => cache.clone(),
                _ => {
                    let mut fresh = self.model.cache();
                    self.model.forward_logits_cached(&mut fresh, &prefix_ids)?;
                    *memo = Some((prefix_ids.clone(), fresh.clone()));
                    fresh
                }
            }
        };
        let suffix = &ids[prefix_ids.len()..];
        let logits = self.model.forward_logits_cached(&mut cache, suffix)?;
        let log_probs = (target_start..ids.len())
            .map(|pos| {
                let row = &logits[pos - 1 - prefix_ids.len()];
                log_prob_row(row, ids[pos] as usize)
            })
            .collect();
        Ok(LikelihoodScore::from_log_probs(log_probs))
    }
}
