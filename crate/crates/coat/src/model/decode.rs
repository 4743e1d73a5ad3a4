//! Greedy decoding.

use crate::error::{CoatError, Result};
use crate::model::scalar::Scalar;
use crate::model::transformer::TinyLm;
use crate::prompts::EOS_ID;

impl<S: Scalar> TinyLm<S> {
    /// Emits the argmax token at each step until end-of-sequence or
    /// `max_new` tokens. Ties break toward the lowest token id, so
    /// decoding is deterministic. The returned sequence excludes the
    /// terminating end-of-sequence token.
    pub fn greedy_decode(&self, prompt_ids: &[u32], max_new: usize) -> Result<Vec<u32>> {
        if prompt_ids.is_empty() {
            return Err(CoatError::InvalidArgument(
                "prompt must contain at least one token".to_string(),
            ));
        }
        if prompt_ids.len() + max_new > self.config.max_seq_len {
            return Err(CoatError::InvalidArgument(format!(
                "prompt of {} tokens leaves no room for {max_new} new tokens within max_seq_len {}",
                prompt_ids.len(),
                self.config.max_seq_len
            )));
        }
        let mut cache = self.cache();
        let mut logits = self
            .forward_logits_cached(&mut cache, prompt_ids)?
            .pop()
            .expect("nonempty prompt");
        let mut out = Vec::new();
        for _ in 0..max_new {
            let next = argmax_lowest_id(&logits);
            if next == EOS_ID {
                break;
            }
            out.push(next);
            logits = self
                .forward_logits_cached(&mut cache, &[next])?
                .pop()
                .expect("one new position");
        }
        Ok(out)
    }
}

/// Index of the maximal entry; earlier (lower) ids win ties.
pub fn argmax_lowest_id<S: Scalar>(row: &[S]) -> u32 {
    let mut best = 0usize;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best as u32
}
