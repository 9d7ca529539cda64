//! Learning and feedback phases and the loop that alternates them.

pub mod clm;
pub mod config;
pub mod driver;
pub mod metrics;
pub mod ppo;
pub mod schedule;

pub use clm::{clm_step, StepIndex};
pub use config::{PpoConfig, RewardConfig, ScheduleConfig};
pub use driver::{epoch_dir, load_resume_state, run_bambino, Continual, EvalSets, Pretrain, RunConfig, RunOutcome, Trainer, TrainerState};
pub use metrics::{read_metrics, MetricsLog, MetricsRecord};
pub use ppo::{
    advantages, collect_rollouts, compute_reward, ppo_step, ppo_surrogate_loss, ppo_update, probability_ratio,
    prompts_from_batch, reencode, returns, reward_from_ppl, value_loss, MarkerReward, ParentPerplexity,
    RewardSource, Rollout, Scored,
};
pub use schedule::{registry, BlockSplit, ClmOnly, Interleaved, Phase, PhaseSchedule, ScheduleRegistry};
