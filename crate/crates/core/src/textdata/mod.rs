//! Corpora, the shared character vocabulary, synthetic languages and batching.

pub mod batch;
pub mod corpus;
pub mod grammar;
pub mod tokenizer;

pub use batch::{Batch, BatchIterator};
pub use corpus::{load_corpus, Corpus};
pub use grammar::{generate_synthetic, LengthDistribution, SyntheticGrammar};
pub use tokenizer::{build_tokenizer, normalize_text, CharTokenizer, BOS, EOS, NUM_SPECIALS, PAD, UNK};
