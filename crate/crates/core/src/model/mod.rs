//! Decoder-only transformer with a tied output head and a scalar value head.

pub mod decode;
pub mod gradcheck;
pub mod scoring;
pub mod transformer;

pub use decode::{sample_continuation, sample_continuation_with, sample_token, GenerationSettings, KvCache};
pub use scoring::{perplexity, sequence_log_prob, BigramModel, CausalLm, UniformModel};
pub use transformer::{ForwardOutput, LanguageModel, Role, TransformerConfig};
