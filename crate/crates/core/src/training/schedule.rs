//! Which objective each optimizer step uses, as named, swappable strategies.

use std::fmt;

use serde::Serialize;

use super::config::ScheduleConfig;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Clm,
    Ppo,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Clm => "clm",
            Phase::Ppo => "ppo",
        })
    }
}

pub trait PhaseSchedule {
    /// Registered name of the strategy.
    fn name(&self) -> &'static str;

    /// Phase of global step `step` in a run with `steps_per_epoch` steps
    /// per pass over the data.
    fn phase(&self, step: u64, steps_per_epoch: usize) -> Phase;

    /// Whether any step can be a feedback step (and so needs a parent).
    fn uses_feedback(&self, steps_per_epoch: usize) -> bool {
        (0..steps_per_epoch as u64).any(|i| self.phase(i, steps_per_epoch) == Phase::Ppo)
    }
}

/// `r_clm` learning steps then `r_ppo` feedback steps, repeated.
#[derive(Clone, Copy, Debug)]
pub struct Interleaved {
    pub r_clm: usize,
    pub r_ppo: usize,
}

impl PhaseSchedule for Interleaved {
    fn name(&self) -> &'static str {
        "interleaved"
    }

    fn phase(&self, step: u64, _steps_per_epoch: usize) -> Phase {
        let cycle = (self.r_clm + self.r_ppo) as u64;
        if step % cycle < self.r_clm as u64 {
            Phase::Clm
        } else {
            Phase::Ppo
        }
    }
}

/// Every step is a learning step.
#[derive(Clone, Copy, Debug)]
pub struct ClmOnly;

impl PhaseSchedule for ClmOnly {
    fn name(&self) -> &'static str {
        "clm_only"
    }

    fn phase(&self, _step: u64, _steps_per_epoch: usize) -> Phase {
        Phase::Clm
    }
}

/// Learning for the leading `fraction` of each epoch, feedback for the rest.
#[derive(Clone, Copy, Debug)]
pub struct BlockSplit {
    pub fraction: f64,
}

impl BlockSplit {
    pub fn boundary(&self, steps_per_epoch: usize) -> usize {
        ((steps_per_epoch as f64 * self.fraction).round() as usize).min(steps_per_epoch)
    }
}

impl PhaseSchedule for BlockSplit {
    fn name(&self) -> &'static str {
        "block_split"
    }

    fn phase(&self, step: u64, steps_per_epoch: usize) -> Phase {
        let within = (step % steps_per_epoch.max(1) as u64) as usize;
        if within < self.boundary(steps_per_epoch) {
            Phase::Clm
        } else {
            Phase::Ppo
        }
    }
}

type Builder = fn(&ScheduleConfig) -> Box<dyn PhaseSchedule>;

pub struct ScheduleEntry {
    pub name: &'static str,
    pub aliases: &'static [&'static str],
    build: Builder,
}

#[derive(Default)]
pub struct ScheduleRegistry {
    entries: Vec<ScheduleEntry>,
}

impl ScheduleRegistry {
    pub fn register(&mut self, name: &'static str, aliases: &'static [&'static str], build: Builder) {
        self.entries.push(ScheduleEntry { name, aliases, build });
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.entries.iter().map(|e| e.name)
    }

    pub fn resolve(&self, name: &str) -> Result<&ScheduleEntry> {
        self.entries
            .iter()
            .find(|e| e.name == name || e.aliases.contains(&name))
            .ok_or_else(|| {
                let known: Vec<String> = self
                    .entries
                    .iter()
                    .flat_map(|e| std::iter::once(e.name).chain(e.aliases.iter().copied()))
                    .map(str::to_string)
                    .collect();
                Error::Config(format!("unknown schedule mode {name:?} (known: {})", known.join(", ")))
            })
    }

    pub fn build(&self, cfg: &ScheduleConfig) -> Result<Box<dyn PhaseSchedule>> {
        Ok((self.resolve(&cfg.mode)?.build)(cfg))
    }
}

/// The built-in schedules. The command-line mode names are aliases.
pub fn registry() -> ScheduleRegistry {
    let mut r = ScheduleRegistry::default();
    r.register("interleaved", &["bambino"], |c| {
        Box::new(Interleaved {
            r_clm: c.r_clm,
            r_ppo: c.r_ppo,
        })
    });
    r.register("clm_only", &["no-ppo"], |_| Box::new(ClmOnly));
    r.register("block_split", &["no-alternating"], |c| {
        Box::new(BlockSplit {
            fraction: c.block_split_fraction,
        })
    });
    r
}
