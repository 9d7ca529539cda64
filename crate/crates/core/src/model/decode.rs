//! Incremental decoding with a key/value cache, used for rollouts.

use rand::Rng;

use super::transformer::LanguageModel;
use crate::error::{Error, Result};
use crate::numerics::kernels;
use crate::numerics::LAYER_NORM_EPS;
use crate::seeds;
use crate::textdata::EOS;

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationSettings {
    pub max_new_tokens: usize,
    pub temperature: f64,
    pub stop_token: u32,
    pub seed: u64,
}

impl Default for GenerationSettings {
    fn default() -> Self {
        Self {
            max_new_tokens: 32,
            temperature: 1.0,
            stop_token: EOS,
            seed: 0,
        }
    }
}

/// Feeds one token at a time, keeping per-layer keys and values.
pub struct KvCache<'m> {
    model: &'m LanguageModel,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

fn vec_mat(x: &[f64], w: &[f64], bias: &[f64]) -> Vec<f64> {
    let mut out = bias.to_vec();
    kernels::matmul_acc(x, w, &mut out, 1, x.len(), bias.len());
    out
}

impl<'m> KvCache<'m> {
    pub fn new(model: &'m LanguageModel) -> Self {
        let n = model.config.n_layers;
        Self {
            model,
            keys: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Appends `token` and returns the next-token logits and `V(s_t)` at
    /// the new position.
    pub fn push(&mut self, token: u32) -> Result<(Vec<f64>, f64)> {
        let m = self.model;
        let c = &m.config;
        if self.len >= c.context_length {
            return Err(Error::ContextLength {
                len: self.len + 1,
                max: c.context_length,
            });
        }
        if token as usize >= c.vocab_size {
            return Err(Error::Vocab {
                id: token,
                vocab: c.vocab_size,
            });
        }
        let p = |i: usize| m.params.by_index(i).values();
        let ly = &m.layout;
        let d = c.d_model;
        let dh = d / c.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let tok = &p(ly.tok_emb)[token as usize * d..(token as usize + 1) * d];
        let pos = &p(ly.pos_emb)[self.len * d..(self.len + 1) * d];
        let mut x: Vec<f64> = tok.iter().zip(pos).map(|(a, b)| a + b).collect();
        let mut h = vec![0.0; d];
        let n = self.len + 1;
        let mut probs = vec![0.0; n];
        for (l, layer) in ly.layers.iter().enumerate() {
            kernels::layer_norm_row(&x, p(layer.ln1.0), p(layer.ln1.1), LAYER_NORM_EPS, &mut h);
            let qkv = vec_mat(&h, p(layer.w_qkv), p(layer.b_qkv));
            self.keys[l].extend_from_slice(&qkv[d..2 * d]);
            self.values[l].extend_from_slice(&qkv[2 * d..]);
            let mut att = vec![0.0; d];
            for head in 0..c.n_heads {
                let o = head * dh;
                let keys = (0..n).map(|j| &self.keys[l][j * d + o..j * d + o + dh]);
                let vals = (0..n).map(|j| &self.values[l][j * d + o..j * d + o + dh]);
                kernels::attend_row(&qkv[o..o + dh], keys, vals, scale, &mut probs, &mut att[o..o + dh]);
            }
            let att = vec_mat(&att, p(layer.w_o), p(layer.b_o));
            x.iter_mut().zip(&att).for_each(|(a, b)| *a += b);
            kernels::layer_norm_row(&x, p(layer.ln2.0), p(layer.ln2.1), LAYER_NORM_EPS, &mut h);
            let mut f = vec_mat(&h, p(layer.w_fc), p(layer.b_fc));
            kernels::gelu_in_place(&mut f);
            let f = vec_mat(&f, p(layer.w_proj), p(layer.b_proj));
            x.iter_mut().zip(&f).for_each(|(a, b)| *a += b);
        }
        kernels::layer_norm_row(&x, p(ly.ln_f.0), p(ly.ln_f.1), LAYER_NORM_EPS, &mut h);
        let emb = p(ly.tok_emb);
        let logits = (0..c.vocab_size).map(|v| kernels::dot(&h, &emb[v * d..(v + 1) * d])).collect();
        let value = kernels::dot(&h, p(ly.value_w)) + p(ly.value_b)[0];
        self.len += 1;
        Ok((logits, value))
    }
}

/// Draws from `softmax(logits / temperature)`.
pub fn sample_token<R: Rng + ?Sized>(logits: &[f64], temperature: f64, rng: &mut R) -> u32 {
    let mut probs: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    kernels::softmax_in_place(&mut probs);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i as u32;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0) as u32
}

fn check_settings(model: &LanguageModel, prompt: &[u32], gs: &GenerationSettings) -> Result<()> {
    if prompt.is_empty() {
        return Err(Error::Generation("prompt is empty".into()));
    }
    if gs.max_new_tokens == 0 {
        return Err(Error::Generation("max_new_tokens must be at least 1".into()));
    }
    if !(gs.temperature.is_finite() && gs.temperature > 0.0) {
        return Err(Error::Generation(format!("temperature {} must be positive", gs.temperature)));
    }
    let limit = model.config.context_length;
    if prompt.len() + gs.max_new_tokens > limit {
        return Err(Error::Generation(format!(
            "prompt length {} + max_new_tokens {} exceeds context length {limit}",
            prompt.len(),
            gs.max_new_tokens
        )));
    }
    Ok(())
}

/// Samples a continuation of `prompt` (continuation tokens only), stopping
/// after the stop token or `max_new_tokens`.
pub fn sample_continuation(model: &LanguageModel, prompt: &[u32], gs: &GenerationSettings) -> Result<Vec<u32>> {
    let mut rng = seeds::rng(gs.seed, &[seeds::stream::ROLLOUT]);
    sample_continuation_with(model, prompt, gs, &mut rng)
}

pub fn sample_continuation_with<R: Rng + ?Sized>(
    model: &LanguageModel,
    prompt: &[u32],
    gs: &GenerationSettings,
    rng: &mut R,
) -> Result<Vec<u32>> {
    check_settings(model, prompt, gs)?;
    let mut cache = KvCache::new(model);
    let mut logits = Vec::new();
    for &t in prompt {
        logits = cache.push(t)?.0;
    }
    let mut out = Vec::with_capacity(gs.max_new_tokens);
    loop {
        let next = sample_token(&logits, gs.temperature, rng);
        out.push(next);
        if next == gs.stop_token || out.len() == gs.max_new_tokens {
            return Ok(out);
        }
        logits = cache.push(next)?.0;
    }
}
