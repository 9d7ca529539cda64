use crate::error::{Error, Result};
use crate::kv::KvDoc;
use crate::numerics::AdamConfig;

/// Constants of the parent-perplexity reward
/// `min(α / (β·max(PPL − τ, δ)), R_max)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RewardConfig {
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub ppl_floor: f64,
    pub reward_cap: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.1,
            tau: 1.0,
            ppl_floor: 0.1,
            reward_cap: 10.0,
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be positive, got {v}")))
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        positive("reward.alpha", self.alpha)?;
        positive("reward.beta", self.beta)?;
        positive("reward.ppl_floor", self.ppl_floor)?;
        positive("reward.reward_cap", self.reward_cap)?;
        if !(self.tau.is_finite() && self.tau >= 0.0) {
            return Err(Error::Config(format!("reward.tau must be non-negative, got {}", self.tau)));
        }
        Ok(())
    }

    pub fn write_kv(&self, doc: &mut KvDoc, prefix: &str) {
        doc.set_f64(format!("{prefix}alpha"), self.alpha);
        doc.set_f64(format!("{prefix}beta"), self.beta);
        doc.set_f64(format!("{prefix}tau"), self.tau);
        doc.set_f64(format!("{prefix}ppl_floor"), self.ppl_floor);
        doc.set_f64(format!("{prefix}reward_cap"), self.reward_cap);
    }

    pub fn read_kv(doc: &KvDoc, prefix: &str) -> Result<Self> {
        let d = Self::default();
        let c = Self {
            alpha: doc.parse_or(&format!("{prefix}alpha"), d.alpha)?,
            beta: doc.parse_or(&format!("{prefix}beta"), d.beta)?,
            tau: doc.parse_or(&format!("{prefix}tau"), d.tau)?,
            ppl_floor: doc.parse_or(&format!("{prefix}ppl_floor"), d.ppl_floor)?,
            reward_cap: doc.parse_or(&format!("{prefix}reward_cap"), d.reward_cap)?,
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PpoConfig {
    pub clip_epsilon: f64,
    pub gamma: f64,
    pub value_coef: f64,
    /// Content tokens taken from each training example as the prompt.
    pub prompt_len: usize,
    /// Prompts drawn from the current batch per feedback step.
    pub rollout_batch_size: usize,
    /// Sampled continuations per prompt.
    pub rollouts_per_prompt: usize,
    pub learning_rate: f64,
    pub max_new_tokens: usize,
    pub temperature: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip_epsilon: 0.2,
            gamma: 1.0,
            value_coef: 0.5,
            prompt_len: 5,
            rollout_batch_size: 16,
            rollouts_per_prompt: 1,
            learning_rate: 3e-4,
            max_new_tokens: 32,
            temperature: 1.0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return Err(Error::Config(format!("ppo.clip_epsilon must lie in (0, 1), got {}", self.clip_epsilon)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("ppo.gamma must lie in (0, 1], got {}", self.gamma)));
        }
        if !(self.value_coef.is_finite() && self.value_coef >= 0.0) {
            return Err(Error::Config(format!("ppo.value_coef must be non-negative, got {}", self.value_coef)));
        }
        if self.prompt_len == 0 || self.rollout_batch_size == 0 || self.rollouts_per_prompt == 0 || self.max_new_tokens == 0 {
            return Err(Error::Config(
                "ppo.prompt_len, rollout_batch_size, rollouts_per_prompt and max_new_tokens must be at least 1".into(),
            ));
        }
        positive("ppo.learning_rate", self.learning_rate)?;
        positive("ppo.temperature", self.temperature)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            ..AdamConfig::default()
        }
    }

    pub fn write_kv(&self, doc: &mut KvDoc, prefix: &str) {
        doc.set_f64(format!("{prefix}clip_epsilon"), self.clip_epsilon);
        doc.set_f64(format!("{prefix}gamma"), self.gamma);
        doc.set_f64(format!("{prefix}value_coef"), self.value_coef);
        doc.set(format!("{prefix}prompt_len"), self.prompt_len);
        doc.set(format!("{prefix}rollout_batch_size"), self.rollout_batch_size);
        doc.set(format!("{prefix}rollouts_per_prompt"), self.rollouts_per_prompt);
        doc.set_f64(format!("{prefix}learning_rate"), self.learning_rate);
        doc.set(format!("{prefix}max_new_tokens"), self.max_new_tokens);
        doc.set_f64(format!("{prefix}temperature"), self.temperature);
    }

    pub fn read_kv(doc: &KvDoc, prefix: &str) -> Result<Self> {
        let d = Self::default();
        let key = |k: &str| format!("{prefix}{k}");
        let c = Self {
            clip_epsilon: doc.parse_or(&key("clip_epsilon"), d.clip_epsilon)?,
            gamma: doc.parse_or(&key("gamma"), d.gamma)?,
            value_coef: doc.parse_or(&key("value_coef"), d.value_coef)?,
            prompt_len: doc.parse_or(&key("prompt_len"), d.prompt_len)?,
            rollout_batch_size: doc.parse_or(&key("rollout_batch_size"), d.rollout_batch_size)?,
            rollouts_per_prompt: doc.parse_or(&key("rollouts_per_prompt"), d.rollouts_per_prompt)?,
            learning_rate: doc.parse_or(&key("learning_rate"), d.learning_rate)?,
            max_new_tokens: doc.parse_or(&key("max_new_tokens"), d.max_new_tokens)?,
            temperature: doc.parse_or(&key("temperature"), d.temperature)?,
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub r_clm: usize,
    pub r_ppo: usize,
    /// Name of a registered schedule, see [`super::schedule::registry`].
    pub mode: String,
    pub block_split_fraction: f64,
    pub epochs: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            r_clm: 10,
            r_ppo: 2,
            mode: "interleaved".into(),
            block_split_fraction: 0.85,
            epochs: 10,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.r_clm == 0 {
            return Err(Error::Config("schedule.r_clm must be at least 1".into()));
        }
        if !(self.block_split_fraction > 0.0 && self.block_split_fraction < 1.0) {
            return Err(Error::Config(format!(
                "schedule.block_split_fraction must lie in (0, 1), got {}",
                self.block_split_fraction
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("schedule.epochs must be at least 1".into()));
        }
        super::schedule::registry().resolve(&self.mode)?;
        Ok(())
    }

    pub fn write_kv(&self, doc: &mut KvDoc, prefix: &str) {
        doc.set(format!("{prefix}r_clm"), self.r_clm);
        doc.set(format!("{prefix}r_ppo"), self.r_ppo);
        doc.set(format!("{prefix}mode"), &self.mode);
        doc.set_f64(format!("{prefix}block_split_fraction"), self.block_split_fraction);
        doc.set(format!("{prefix}epochs"), self.epochs);
    }

    pub fn read_kv(doc: &KvDoc, prefix: &str) -> Result<Self> {
        let d = Self::default();
        let key = |k: &str| format!("{prefix}{k}");
        let c = Self {
            r_clm: doc.parse_or(&key("r_clm"), d.r_clm)?,
            r_ppo: doc.parse_or(&key("r_ppo"), d.r_ppo)?,
            mode: doc.parse_or(&key("mode"), d.mode)?,
            block_split_fraction: doc.parse_or(&key("block_split_fraction"), d.block_split_fraction)?,
            epochs: doc.parse_or(&key("epochs"), d.epochs)?,
        };
        c.validate()?;
        Ok(c)
    }
}
