//! Experiment configuration and the subcommands behind the `bambino` binary.

pub mod commands;
pub mod config;

pub use commands::{continual, eval, gen_data, mode_label, pretrain, report, CorpusFile, Workspace, REFERENCE_MODE};
pub use config::{DataConfig, ExperimentConfig, GrammarSource, ModelShape, Paths, Stage, TrainConfig};

/// Keeps freed memory in the process heap. Training allocates and frees
/// megabyte-sized buffers every step, and by default glibc hands those
/// back to the kernel, which then has to fault fresh pages in again.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // SAFETY: mallopt only adjusts allocator thresholds.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
        libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
    }
}
