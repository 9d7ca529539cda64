//! Perplexity, zero-shot classification and before/after reports.

pub mod ablation;
pub mod perplexity;
pub mod report;
pub mod tasks;

pub use ablation::{median, AblationReport, SeedResult, Violation};
pub use perplexity::{corpus_nll, corpus_perplexity, sequence_nlls};
pub use report::{forgetting_report, measure, Deltas, EvalReport, Measurement, ReportInputs};
pub use tasks::{
    builtin_tasks, language_id_task, plausibility_task, zero_shot_classify, Classification, EvalTask, TaskItem, SLOT,
};
