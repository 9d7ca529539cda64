//! The step loop shared by pre-training and continual training.

use std::path::{Path, PathBuf};
use std::time::Instant;

use super::clm::{clm_step, StepIndex};
use super::config::{PpoConfig, RewardConfig, ScheduleConfig};
use super::metrics::{MetricsLog, MetricsRecord};
use super::ppo::{ppo_step, ParentPerplexity, RewardSource};
use super::schedule::{registry, ClmOnly, Phase, PhaseSchedule};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::evalkit::corpus_perplexity;
use crate::model::LanguageModel;
use crate::numerics::{AdamConfig, AdamState};
use crate::textdata::{BatchIterator, CharTokenizer, Corpus};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub grad_clip: f64,
    pub seed: u64,
    /// Adds `wall_ms` to each record. Off by default so logs stay
    /// byte-reproducible.
    pub record_wall_clock: bool,
    /// Stored in checkpoints as `meta.label` when non-empty.
    pub label: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            adam: AdamConfig::default(),
            grad_clip: 1.0,
            seed: 0,
            record_wall_clock: false,
            label: String::new(),
        }
    }
}

/// Everything that changes from step to step.
#[derive(Clone, Debug)]
pub struct TrainerState {
    pub model: LanguageModel,
    pub clm_opt: AdamState,
    pub ppo_opt: AdamState,
    /// Steps completed so far.
    pub step: u64,
}

impl TrainerState {
    pub fn fresh(model: LanguageModel, clm: AdamConfig, ppo: AdamConfig) -> Self {
        Self {
            clm_opt: AdamState::new(&model.params, clm),
            ppo_opt: AdamState::new(&model.params, ppo),
            model,
            step: 0,
        }
    }

    pub fn to_checkpoint(&self, seed: u64, schedule: &str) -> Checkpoint {
        let mut ck = Checkpoint::new(self.model.clone());
        ck.optimizers.insert("clm".into(), self.clm_opt.clone());
        ck.optimizers.insert("ppo".into(), self.ppo_opt.clone());
        ck.meta.insert("step".into(), self.step.to_string());
        // All sampling is keyed by (seed, step, ...), so these two values
        // are the complete random state.
        ck.meta.insert("seed".into(), seed.to_string());
        ck.meta.insert("schedule".into(), schedule.to_string());
        ck
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let step = ck.meta_value("step")?;
        let get = |name: &str| {
            ck.optimizers
                .get(name)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("no {name} optimizer state")))
        };
        Ok(Self {
            clm_opt: get("clm")?,
            ppo_opt: get("ppo")?,
            model: ck.model,
            step,
        })
    }
}

/// Held-out corpora measured at each epoch end.
#[derive(Clone, Copy)]
pub struct EvalSets<'a> {
    pub l1: &'a Corpus,
    pub l2: &'a Corpus,
}

pub struct Trainer<'a> {
    pub corpus: &'a Corpus,
    pub schedule: &'a dyn PhaseSchedule,
    pub reward: Option<&'a dyn RewardSource>,
    pub ppo: PpoConfig,
    pub run: RunConfig,
    pub total_steps: u64,
    pub eval: Option<EvalSets<'a>>,
    /// Receives `epoch-NNN` after each full epoch and `final` at the end.
    pub checkpoint_dir: Option<PathBuf>,
    pub metrics_path: Option<PathBuf>,
    /// Called with each record after it is logged.
    pub progress: Option<&'a dyn Fn(&MetricsRecord)>,
}

pub struct RunOutcome {
    pub state: TrainerState,
    /// Records produced by this invocation (not those before a resume).
    pub records: Vec<MetricsRecord>,
}

pub fn epoch_dir(root: &Path, epoch: u64) -> PathBuf {
    root.join(format!("epoch-{epoch:03}"))
}

impl Trainer<'_> {
    pub fn steps_per_epoch(&self, context_len: usize) -> Result<usize> {
        Ok(BatchIterator::new(self.corpus, self.run.batch_size, context_len, 0)?.steps_per_epoch())
    }

    /// Runs from `state.step` up to `total_steps`.
    pub fn run(&self, mut state: TrainerState) -> Result<RunOutcome> {
        let context = state.model.context_length();
        let mut batches = BatchIterator::new(self.corpus, self.run.batch_size, context, self.run.seed)?;
        let spe = batches.steps_per_epoch();
        if self.schedule.uses_feedback(spe) && self.reward.is_none() {
            return Err(Error::Config(format!(
                "schedule {} has feedback steps but no parent model was given",
                self.schedule.name()
            )));
        }
        if state.step > self.total_steps {
            return Err(Error::Checkpoint(format!(
                "checkpoint is at step {} but the run has only {} steps",
                state.step, self.total_steps
            )));
        }
        batches.skip_cycling(state.step);
        let mut log = match &self.metrics_path {
            Some(p) => Some(MetricsLog::open(p, state.step)?),
            None => None,
        };
        let mut records = Vec::new();
        while state.step < self.total_steps {
            let started = Instant::now();
            let at = StepIndex {
                step: state.step,
                epoch: state.step / spe as u64,
            };
            let batch = batches.next_cycling();
            let mut rec = match self.schedule.phase(state.step, spe) {
                Phase::Clm => clm_step(&mut state.model, &batch, &mut state.clm_opt, self.run.grad_clip, at)?,
                Phase::Ppo => ppo_step(
                    &mut state.model,
                    self.reward.expect("checked above"),
                    &batch,
                    &self.ppo,
                    &mut state.ppo_opt,
                    self.run.grad_clip,
                    self.run.seed,
                    at,
                )?,
            };
            state.step += 1;
            let epoch_done = state.step % spe as u64 == 0;
            let finished = state.step == self.total_steps;
            if epoch_done || finished {
                if let Some(ev) = self.eval {
                    rec.eval_l1_ppl = Some(corpus_perplexity(&state.model, ev.l1)?);
                    rec.eval_l2_ppl = Some(corpus_perplexity(&state.model, ev.l2)?);
                }
            }
            if self.run.record_wall_clock {
                rec.wall_ms = Some(started.elapsed().as_secs_f64() * 1e3);
            }
            if let Some(log) = &mut log {
                log.append(&rec)?;
            }
            if let Some(report) = self.progress {
                report(&rec);
            }
            records.push(rec);
            if let Some(dir) = &self.checkpoint_dir {
                let mut ck = state.to_checkpoint(self.run.seed, self.schedule.name());
                if !self.run.label.is_empty() {
                    ck.meta.insert("label".into(), self.run.label.clone());
                }
                if epoch_done {
                    ck.save(&epoch_dir(dir, state.step / spe as u64 - 1))?;
                }
                if finished {
                    ck.save(&dir.join("final"))?;
                }
            }
        }
        Ok(RunOutcome { state, records })
    }
}

/// Loads a checkpoint written by [`Trainer::run`] and checks it belongs to
/// a run with `seed`.
pub fn load_resume_state(dir: &Path, seed: u64) -> Result<TrainerState> {
    let ck = Checkpoint::load(dir)?;
    let saved: u64 = ck.meta_value("seed")?;
    if saved != seed {
        return Err(Error::Checkpoint(format!(
            "checkpoint was written with seed {saved}, run uses {seed}"
        )));
    }
    TrainerState::from_checkpoint(ck)
}

/// Pure next-token training for `steps` steps.
pub struct Pretrain<'a> {
    pub corpus: &'a Corpus,
    pub run: RunConfig,
    pub steps: u64,
    pub eval: Option<EvalSets<'a>>,
    pub checkpoint_dir: Option<PathBuf>,
    pub metrics_path: Option<PathBuf>,
    pub progress: Option<&'a dyn Fn(&MetricsRecord)>,
}

impl Pretrain<'_> {
    pub fn run(&self, state: TrainerState) -> Result<RunOutcome> {
        Trainer {
            corpus: self.corpus,
            schedule: &ClmOnly,
            reward: None,
            ppo: PpoConfig::default(),
            run: self.run.clone(),
            total_steps: self.steps,
            eval: self.eval,
            checkpoint_dir: self.checkpoint_dir.clone(),
            metrics_path: self.metrics_path.clone(),
            progress: self.progress,
        }
        .run(state)
    }
}

/// Continual training of `state.model` on the L2 corpus under the named
/// schedule, with the parent's perplexity as the feedback reward.
pub struct Continual<'a> {
    pub corpus: &'a Corpus,
    pub parent: Option<&'a LanguageModel>,
    pub tokenizer: &'a CharTokenizer,
    pub schedule: ScheduleConfig,
    pub ppo: PpoConfig,
    pub reward: RewardConfig,
    pub run: RunConfig,
    pub eval: Option<EvalSets<'a>>,
    pub checkpoint_dir: Option<PathBuf>,
    pub metrics_path: Option<PathBuf>,
    pub progress: Option<&'a dyn Fn(&MetricsRecord)>,
}

impl Continual<'_> {
    pub fn run(&self, state: TrainerState) -> Result<RunOutcome> {
        self.schedule.validate()?;
        self.ppo.validate()?;
        self.reward.validate()?;
        let schedule = registry().build(&self.schedule)?;
        let source = self.parent.map(|p| ParentPerplexity {
            parent: p,
            tokenizer: self.tokenizer,
            config: self.reward,
        });
        let trainer = Trainer {
            corpus: self.corpus,
            schedule: schedule.as_ref(),
            reward: source.as_ref().map(|s| s as &dyn RewardSource),
            ppo: self.ppo,
            run: self.run.clone(),
            total_steps: 0,
            eval: self.eval,
            checkpoint_dir: self.checkpoint_dir.clone(),
            metrics_path: self.metrics_path.clone(),
            progress: self.progress,
        };
        let spe = trainer.steps_per_epoch(state.model.context_length())? as u64;
        Trainer {
            total_steps: spe * self.schedule.epochs as u64,
            ..trainer
        }
        .run(state)
    }
}

/// Runs the continual-training loop from a fresh optimizer state.
#[allow(clippy::too_many_arguments)]
pub fn run_bambino(
    corpus: &Corpus,
    baby: LanguageModel,
    parent: Option<&LanguageModel>,
    tokenizer: &CharTokenizer,
    schedule: &ScheduleConfig,
    ppo: &PpoConfig,
    reward: &RewardConfig,
    run: &RunConfig,
) -> Result<RunOutcome> {
    let state = TrainerState::fresh(baby, run.adam, ppo.adam());
    Continual {
        corpus,
        parent,
        tokenizer,
        schedule: schedule.clone(),
        ppo: *ppo,
        reward: *reward,
        run: run.clone(),
        eval: None,
        checkpoint_dir: None,
        metrics_path: None,
        progress: None,
    }
    .run(state)
}
