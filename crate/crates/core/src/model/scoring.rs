//! Sequence scoring shared by the transformer and small table models.

use super::transformer::LanguageModel;
use crate::error::{Error, Result};

/// Anything that assigns next-token probabilities to a token sequence.
pub trait CausalLm {
    fn vocab_size(&self) -> usize;

    /// Longest sequence scoreable in one pass.
    fn max_len(&self) -> usize;

    /// For each sequence, `log P(x_t | x_<t)` for `t = 1..len`.
    fn log_probs_batch(&self, seqs: &[&[u32]]) -> Result<Vec<Vec<f64>>>;
}

impl CausalLm for LanguageModel {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn max_len(&self) -> usize {
        self.config.context_length
    }

    fn log_probs_batch(&self, seqs: &[&[u32]]) -> Result<Vec<Vec<f64>>> {
        LanguageModel::log_probs_batch(self, seqs)
    }
}

pub fn sequence_log_prob(model: &dyn CausalLm, tokens: &[u32]) -> Result<Vec<f64>> {
    if tokens.len() < 2 {
        return Err(Error::DegenerateSequence(tokens.len()));
    }
    Ok(model.log_probs_batch(&[tokens])?.remove(0))
}

/// `exp(-(1/n) Σ log P(x_t | x_<t))` over the `n = len - 1` predictions.
pub fn perplexity(model: &dyn CausalLm, tokens: &[u32]) -> Result<f64> {
    let lp = sequence_log_prob(model, tokens)?;
    Ok((-lp.iter().sum::<f64>() / lp.len() as f64).exp())
}

/// Every token equally likely.
#[derive(Clone, Debug)]
pub struct UniformModel {
    pub vocab_size: usize,
}

impl CausalLm for UniformModel {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn max_len(&self) -> usize {
        usize::MAX
    }

    fn log_probs_batch(&self, seqs: &[&[u32]]) -> Result<Vec<Vec<f64>>> {
        let lp = -(self.vocab_size as f64).ln();
        seqs.iter()
            .map(|s| {
                if s.len() < 2 {
                    return Err(Error::DegenerateSequence(s.len()));
                }
                Ok(vec![lp; s.len() - 1])
            })
            .collect()
    }
}

/// Next-token table conditioned on the previous token only.
#[derive(Clone, Debug)]
pub struct BigramModel {
    pub vocab_size: usize,
    /// Row-major `[V × V]`, row = previous token.
    pub probs: Vec<f64>,
}

impl CausalLm for BigramModel {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn max_len(&self) -> usize {
        usize::MAX
    }

    fn log_probs_batch(&self, seqs: &[&[u32]]) -> Result<Vec<Vec<f64>>> {
        let v = self.vocab_size;
        seqs.iter()
            .map(|s| {
                if s.len() < 2 {
                    return Err(Error::DegenerateSequence(s.len()));
                }
                if let Some(&id) = s.iter().find(|&&id| id as usize >= v) {
                    return Err(Error::Vocab { id, vocab: v });
                }
                Ok(s.windows(2)
                    .map(|w| self.probs[w[0] as usize * v + w[1] as usize].ln())
                    .collect())
            })
            .collect()
    }
}
