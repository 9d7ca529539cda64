//! Feedback phase: sampled continuations, parent-perplexity reward, and a
//! clipped-surrogate actor-critic update.

use super::clm::{apply_update, StepIndex};
use super::config::{PpoConfig, RewardConfig};
use super::metrics::MetricsRecord;
use super::schedule::Phase;
use crate::error::{Error, Result};
use crate::model::{perplexity, sample_continuation_with, CausalLm, GenerationSettings, LanguageModel};
use crate::numerics::{surrogate_term, AdamState, BoundParams, Tape, Var};
use crate::seeds;
use crate::textdata::{Batch, CharTokenizer, BOS, EOS, PAD};

/// `min(α / (β·max(PPL − τ, δ)), R_max)`.
pub fn reward_from_ppl(ppl: f64, rc: &RewardConfig) -> f64 {
    let denom = rc.beta * (ppl - rc.tau).max(rc.ppl_floor);
    (rc.alpha / denom).min(rc.reward_cap)
}

/// Round-trips generated ids through text, as the parent only ever sees
/// what the tokenizer makes of the decoded string.
pub fn reencode(generated: &[u32], tokenizer: &CharTokenizer) -> Vec<u32> {
    tokenizer.encode(&tokenizer.decode(generated))
}

/// Reward for one generation scored by `parent`.
pub fn compute_reward(
    generated: &[u32],
    parent: &dyn CausalLm,
    rc: &RewardConfig,
    tokenizer: &CharTokenizer,
) -> Result<f64> {
    let ids = reencode(generated, tokenizer);
    if ids.len() < 2 {
        return Err(Error::ShortGeneration(ids.len()));
    }
    Ok(reward_from_ppl(perplexity(parent, &ids)?, rc))
}

/// `exp(new − old)` per action.
pub fn probability_ratio(new_logp: &[f64], old_logp: &[f64]) -> Result<Vec<f64>> {
    if new_logp.len() != old_logp.len() {
        return Err(Error::RolloutShape(format!(
            "{} new log-probs vs {} old",
            new_logp.len(),
            old_logp.len()
        )));
    }
    Ok(new_logp.iter().zip(old_logp).map(|(n, o)| (n - o).exp()).collect())
}

/// `−mean_t min(r_t·Â_t, clip(r_t, 1−ε, 1+ε)·Â_t)`.
pub fn ppo_surrogate_loss(ratios: &[f64], advantages: &[f64], eps: f64) -> Result<f64> {
    if ratios.len() != advantages.len() || ratios.is_empty() {
        return Err(Error::RolloutShape(format!(
            "{} ratios vs {} advantages",
            ratios.len(),
            advantages.len()
        )));
    }
    let total: f64 = ratios.iter().zip(advantages).map(|(&r, &a)| surrogate_term(r, a, eps)).sum();
    Ok(-total / ratios.len() as f64)
}

/// Discounted reward-to-go `G_t = Σ_{j≥t} γ^{j−t} r_j`.
pub fn returns(step_rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; step_rewards.len()];
    let mut acc = 0.0;
    for t in (0..step_rewards.len()).rev() {
        acc = step_rewards[t] + gamma * acc;
        out[t] = acc;
    }
    out
}

/// One sampled continuation and everything the update needs from it.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub prompt: Vec<u32>,
    pub actions: Vec<u32>,
    /// `log π_old(a_t | s_t)`, fixed at collection time.
    pub old_log_probs: Vec<f64>,
    /// `V(s_t)` for the state before each action.
    pub values: Vec<f64>,
    pub reward: f64,
    /// Zero except the final entry, which is `reward`.
    pub step_rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    pub parent_ppl: Option<f64>,
}

impl Rollout {
    pub fn new(
        prompt: Vec<u32>,
        actions: Vec<u32>,
        old_log_probs: Vec<f64>,
        values: Vec<f64>,
        reward: f64,
        gamma: f64,
    ) -> Result<Self> {
        let n = actions.len();
        if n == 0 || old_log_probs.len() != n {
            return Err(Error::RolloutShape(format!(
                "{n} actions vs {} old log-probs",
                old_log_probs.len()
            )));
        }
        let mut step_rewards = vec![0.0; n];
        step_rewards[n - 1] = reward;
        let mut r = Self {
            prompt,
            actions,
            old_log_probs,
            values,
            reward,
            step_rewards,
            advantages: Vec::new(),
            parent_ppl: None,
        };
        r.advantages = advantages(&r, gamma)?;
        Ok(r)
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Order-sensitive digest of every stored number.
    pub fn checksum(&self) -> u64 {
        let floats = self
            .old_log_probs
            .iter()
            .chain(&self.values)
            .chain(&self.step_rewards)
            .chain(&self.advantages)
            .chain(std::iter::once(&self.reward));
        let ids = self.prompt.iter().chain(&self.actions).map(|&t| t as u64);
        floats
            .map(|f| f.to_bits())
            .chain(ids)
            .fold(0xcbf2_9ce4_8422_2325u64, |h, x| (h ^ x).wrapping_mul(0x0000_0100_0000_01b3))
    }
}

/// `Â_t = r_t + γV(s_{t+1}) − V(s_t)` with `V(s_{n+1}) = 0`.
pub fn advantages(rollout: &Rollout, gamma: f64) -> Result<Vec<f64>> {
    let n = rollout.actions.len();
    if rollout.values.len() != n || rollout.step_rewards.len() != n {
        return Err(Error::RolloutShape(format!(
            "{n} actions vs {} values and {} step rewards",
            rollout.values.len(),
            rollout.step_rewards.len()
        )));
    }
    let v = &rollout.values;
    Ok((0..n)
        .map(|t| {
            let next = if t + 1 < n { v[t + 1] } else { 0.0 };
            rollout.step_rewards[t] + gamma * next - v[t]
        })
        .collect())
}

/// Mean squared error between `values_new` and the rollout's returns.
pub fn value_loss(values_new: &[f64], rollout: &Rollout, gamma: f64) -> Result<f64> {
    let g = returns(&rollout.step_rewards, gamma);
    if values_new.len() != g.len() || g.is_empty() {
        return Err(Error::RolloutShape(format!(
            "{} values vs {} returns",
            values_new.len(),
            g.len()
        )));
    }
    Ok(values_new.iter().zip(&g).map(|(v, g)| (v - g).powi(2)).sum::<f64>() / g.len() as f64)
}

/// What a reward source made of one continuation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Scored {
    Reward { reward: f64, ppl: Option<f64> },
    /// Too short to score; the rollout is dropped.
    Discarded { len: usize },
}

pub trait RewardSource {
    fn name(&self) -> &str;

    fn score(&self, continuations: &[&[u32]]) -> Result<Vec<Scored>>;
}

/// The parent's perplexity on the decoded and re-encoded continuation,
/// mapped through [`reward_from_ppl`].
pub struct ParentPerplexity<'a> {
    pub parent: &'a dyn CausalLm,
    pub tokenizer: &'a CharTokenizer,
    pub config: RewardConfig,
}

impl RewardSource for ParentPerplexity<'_> {
    fn name(&self) -> &str {
        "parent_perplexity"
    }

    fn score(&self, continuations: &[&[u32]]) -> Result<Vec<Scored>> {
        let encoded: Vec<Vec<u32>> = continuations.iter().map(|c| reencode(c, self.tokenizer)).collect();
        let scoreable: Vec<&[u32]> = encoded.iter().filter(|e| e.len() >= 2).map(Vec::as_slice).collect();
        let mut lps = if scoreable.is_empty() {
            Vec::new()
        } else {
            self.parent.log_probs_batch(&scoreable)?
        }
        .into_iter();
        Ok(encoded
            .iter()
            .map(|e| {
                if e.len() < 2 {
                    return Scored::Discarded { len: e.len() };
                }
                let lp = lps.next().expect("one score per scoreable continuation");
                let ppl = (-lp.iter().sum::<f64>() / lp.len() as f64).exp();
                Scored::Reward {
                    reward: reward_from_ppl(ppl, &self.config),
                    ppl: Some(ppl),
                }
            })
            .collect())
    }
}

/// Pays `bonus` for any continuation containing `marker`, `base` otherwise.
/// A deliberately hackable reward for probing the update direction.
pub struct MarkerReward {
    pub marker: u32,
    pub bonus: f64,
    pub base: f64,
}

impl RewardSource for MarkerReward {
    fn name(&self) -> &str {
        "marker"
    }

    fn score(&self, continuations: &[&[u32]]) -> Result<Vec<Scored>> {
        Ok(continuations
            .iter()
            .map(|c| Scored::Reward {
                reward: if c.contains(&self.marker) { self.bonus } else { self.base },
                ppl: None,
            })
            .collect())
    }
}

/// `BOS` plus the first `k` content tokens of each row long enough to leave
/// at least one more token, up to `limit` prompts.
pub fn prompts_from_batch(batch: &Batch, k: usize, limit: usize) -> Vec<Vec<u32>> {
    batch
        .tokens
        .iter()
        .filter_map(|row| {
            let real: Vec<u32> = row.iter().copied().take_while(|&t| t != PAD).collect();
            let content = if real.first() == Some(&BOS) { &real[1..] } else { &real[..] };
            (content.len() + 1 >= k + 2).then(|| std::iter::once(BOS).chain(content[..k].iter().copied()).collect())
        })
        .take(limit)
        .collect()
}

/// Per-action log-probs and per-state values of `rollouts` under the
/// current parameters, recorded on `tape`.
fn evaluate_actions(
    model: &LanguageModel,
    tape: &mut Tape,
    bound: &BoundParams,
    rollouts: &[Rollout],
) -> Result<(Var, Var)> {
    let seqs: Vec<Vec<u32>> = rollouts
        .iter()
        .map(|r| r.prompt.iter().chain(&r.actions[..r.len() - 1]).copied().collect())
        .collect();
    let refs: Vec<&[u32]> = seqs.iter().map(Vec::as_slice).collect();
    let out = model.forward_padded(tape, bound, &refs)?;
    let width = out.seq_len;
    let mut picks = Vec::new();
    let mut states = Vec::new();
    for (i, r) in rollouts.iter().enumerate() {
        for (j, &a) in r.actions.iter().enumerate() {
            let row = i * width + r.prompt.len() - 1 + j;
            picks.push((row, a));
            states.push(row);
        }
    }
    let logp = tape.pick_log_probs(out.logits, &picks)?;
    let values = tape.gather(out.values, &states)?;
    Ok((logp, values))
}

fn split_by_rollout(flat: &[f64], rollouts: &[Rollout]) -> Vec<Vec<f64>> {
    let mut at = 0;
    rollouts
        .iter()
        .map(|r| {
            let part = flat[at..at + r.len()].to_vec();
            at += r.len();
            part
        })
        .collect()
}

pub struct Collected {
    pub rollouts: Vec<Rollout>,
    pub discarded: usize,
}

/// Samples continuations of every prompt, scores them, and freezes the
/// current policy's log-probs and values into each kept rollout.
/// Sampling for prompt `p`, sample `s` at step `step` draws from the stream
/// `(seed, ROLLOUT, step, p, s)`.
pub fn collect_rollouts(
    model: &LanguageModel,
    prompts: &[Vec<u32>],
    cfg: &PpoConfig,
    reward: &dyn RewardSource,
    seed: u64,
    step: u64,
) -> Result<Collected> {
    let mut samples = Vec::new();
    for (p, prompt) in prompts.iter().enumerate() {
        let room = model.context_length().saturating_sub(prompt.len());
        let gs = GenerationSettings {
            max_new_tokens: cfg.max_new_tokens.min(room),
            temperature: cfg.temperature,
            stop_token: EOS,
            seed,
        };
        for s in 0..cfg.rollouts_per_prompt {
            let mut rng = seeds::rng(seed, &[seeds::stream::ROLLOUT, step, p as u64, s as u64]);
            samples.push((p, sample_continuation_with(model, prompt, &gs, &mut rng)?));
        }
    }
    let refs: Vec<&[u32]> = samples.iter().map(|(_, c)| c.as_slice()).collect();
    let scores = reward.score(&refs)?;

    let mut kept = Vec::new();
    let mut discarded = 0;
    for ((p, actions), score) in samples.into_iter().zip(scores) {
        match score {
            Scored::Reward { reward, ppl } => kept.push((p, actions, reward, ppl)),
            Scored::Discarded { .. } => discarded += 1,
        }
    }
    if kept.is_empty() {
        return Ok(Collected {
            rollouts: Vec::new(),
            discarded,
        });
    }

    // Provisional rollouts carry the shapes; log-probs and values are filled
    // from one batched pass of the current (old) policy.
    let provisional: Vec<Rollout> = kept
        .iter()
        .map(|(p, a, _, _)| Rollout::new(prompts[*p].clone(), a.clone(), vec![0.0; a.len()], vec![0.0; a.len()], 0.0, 1.0))
        .collect::<Result<_>>()?;
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let (logp, values) = evaluate_actions(model, &mut tape, &bound, &provisional)?;
    let logp = split_by_rollout(tape.values(logp), &provisional);
    let values = split_by_rollout(tape.values(values), &provisional);

    let rollouts = kept
        .into_iter()
        .zip(logp.into_iter().zip(values))
        .map(|((p, actions, reward, ppl), (lp, v))| {
            let mut r = Rollout::new(prompts[p].clone(), actions, lp, v, reward, cfg.gamma)?;
            r.parent_ppl = ppl;
            Ok(r)
        })
        .collect::<Result<_>>()?;
    Ok(Collected { rollouts, discarded })
}

pub struct UpdateStats {
    pub surrogate_loss: f64,
    pub value_loss: f64,
    pub grad_norm: f64,
}

/// One gradient step on `surrogate + c_v · value_mse` over all actions of
/// all rollouts.
pub fn ppo_update(
    model: &mut LanguageModel,
    opt: &mut AdamState,
    rollouts: &[Rollout],
    cfg: &PpoConfig,
    grad_clip: f64,
) -> Result<UpdateStats> {
    if rollouts.is_empty() {
        return Err(Error::RolloutShape("no rollouts to update on".into()));
    }
    let old: Vec<f64> = rollouts.iter().flat_map(|r| r.old_log_probs.iter().copied()).collect();
    let adv: Vec<f64> = rollouts.iter().flat_map(|r| r.advantages.iter().copied()).collect();
    let ret: Vec<f64> = rollouts
        .iter()
        .flat_map(|r| returns(&r.step_rewards, cfg.gamma))
        .collect();
    let n = old.len();

    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let (logp, values) = evaluate_actions(model, &mut tape, &bound, rollouts)?;
    let old_v = tape.constant(vec![n], old)?;
    let diff = tape.sub(logp, old_v)?;
    let ratio = tape.exp(diff)?;
    let surr = tape.clipped_surrogate(ratio, &adv, cfg.clip_epsilon)?;
    let objective = tape.mean(surr)?;
    let policy_loss = tape.scale(objective, -1.0)?;
    let ret_v = tape.constant(vec![n], ret)?;
    let err = tape.sub(values, ret_v)?;
    let sq = tape.mul(err, err)?;
    let vloss = tape.mean(sq)?;
    let weighted = tape.scale(vloss, cfg.value_coef)?;
    let total = tape.add(policy_loss, weighted)?;
    tape.backward(total)?;

    model.params.zero_grads();
    model.params.absorb_grads(&tape, &bound);
    let grad_norm = apply_update(model, opt, grad_clip)?;
    Ok(UpdateStats {
        surrogate_loss: tape.value(policy_loss).item(),
        value_loss: tape.value(vloss).item(),
        grad_norm,
    })
}

/// One feedback-phase step: prompts from `batch`, rollouts, reward, update.
/// If every rollout is discarded, the step is recorded with no update.
#[allow(clippy::too_many_arguments)]
pub fn ppo_step(
    model: &mut LanguageModel,
    reward: &dyn RewardSource,
    batch: &Batch,
    cfg: &PpoConfig,
    opt: &mut AdamState,
    grad_clip: f64,
    seed: u64,
    at: StepIndex,
) -> Result<MetricsRecord> {
    let prompts = prompts_from_batch(batch, cfg.prompt_len, cfg.rollout_batch_size);
    let collected = collect_rollouts(model, &prompts, cfg, reward, seed, at.step)?;
    let mut rec = MetricsRecord::new(at.step, at.epoch, Phase::Ppo);
    rec.rollouts = Some(collected.rollouts.len());
    rec.discarded = Some(collected.discarded);
    if collected.rollouts.is_empty() {
        return Ok(rec);
    }
    let rs = &collected.rollouts;
    rec.mean_reward = Some(rs.iter().map(|r| r.reward).sum::<f64>() / rs.len() as f64);
    let ppls: Vec<f64> = rs.iter().filter_map(|r| r.parent_ppl).collect();
    if !ppls.is_empty() {
        rec.mean_parent_ppl = Some(ppls.iter().sum::<f64>() / ppls.len() as f64);
    }
    let stats = ppo_update(model, opt, rs, cfg, grad_clip)?;
    rec.loss = Some(stats.surrogate_loss);
    rec.value_loss = Some(stats.value_loss);
    rec.grad_norm = Some(stats.grad_norm);
    Ok(rec)
}
