use rand::seq::SliceRandom;

use super::corpus::Corpus;
use super::tokenizer::PAD;
use crate::error::{Error, Result};
use crate::seeds;

/// `rows × (T+1)` token ids; row `r` feeds `tokens[r][..T]` and predicts
/// `tokens[r][1..]`. `mask[r][t]` is false where target `t` is padding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub tokens: Vec<Vec<u32>>,
    pub mask: Vec<Vec<bool>>,
}

impl Batch {
    pub fn rows(&self) -> usize {
        self.tokens.len()
    }

    pub fn unmasked_targets(&self) -> usize {
        self.mask.iter().flatten().filter(|&&m| m).count()
    }
}

/// Splits each document into windows of at most `T+1` tokens that overlap
/// by one, so every non-BOS token is predicted exactly once per epoch.
fn windows(corpus: &Corpus, context_len: usize) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    for doc in &corpus.documents {
        let mut start = 0;
        while start + 1 < doc.len() {
            let end = (start + context_len + 1).min(doc.len());
            out.push(doc[start..end].to_vec());
            start += context_len;
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct BatchIterator {
    windows: Vec<Vec<u32>>,
    batch_size: usize,
    context_len: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchIterator {
    pub fn new(corpus: &Corpus, batch_size: usize, context_len: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 || context_len == 0 {
            return Err(Error::Config("batch size and context length must be positive".into()));
        }
        let windows = windows(corpus, context_len);
        if windows.is_empty() {
            return Err(Error::DegenerateBatch);
        }
        let mut it = Self {
            windows,
            batch_size,
            context_len,
            seed,
            epoch: 0,
            order: Vec::new(),
            cursor: 0,
        };
        it.shuffle();
        Ok(it)
    }

    fn shuffle(&mut self) {
        self.order = (0..self.windows.len()).collect();
        let mut rng = seeds::rng(self.seed, &[seeds::stream::SHUFFLE, self.epoch]);
        self.order.shuffle(&mut rng);
        self.cursor = 0;
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.windows.len().div_ceil(self.batch_size)
    }

    /// Next batch of the current epoch, or `None` once it is exhausted.
    /// The final batch of an epoch may have fewer rows.
    pub fn next_batch(&mut self) -> Option<Batch> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let width = self.context_len + 1;
        let mut tokens = Vec::with_capacity(end - self.cursor);
        let mut mask = Vec::with_capacity(end - self.cursor);
        for &w in &self.order[self.cursor..end] {
            let window = &self.windows[w];
            let mut row = window.clone();
            row.resize(width, PAD);
            mask.push((1..width).map(|t| t < window.len()).collect());
            tokens.push(row);
        }
        self.cursor = end;
        Some(Batch { tokens, mask })
    }

    /// Advances to the next epoch with a fresh shuffle.
    pub fn start_next_epoch(&mut self) {
        self.epoch += 1;
        self.shuffle();
    }

    /// Never ends: rolls into the next epoch when the current one runs out.
    pub fn next_cycling(&mut self) -> Batch {
        match self.next_batch() {
            Some(b) => b,
            None => {
                self.start_next_epoch();
                self.next_batch().expect("non-empty corpus")
            }
        }
    }

    /// Fast-forwards a fresh iterator to the state after `steps` cycling draws.
    pub fn skip_cycling(&mut self, steps: u64) {
        let per_epoch = self.steps_per_epoch() as u64;
        let target_epoch = steps / per_epoch;
        if target_epoch != self.epoch {
            self.epoch = target_epoch;
            self.shuffle();
        }
        let within = (steps % per_epoch) as usize;
        self.cursor = (within * self.batch_size).min(self.order.len());
    }
}
