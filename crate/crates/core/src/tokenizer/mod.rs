//! Byte-level BPE tokenizer and prompt construction.

pub mod prompt;
pub mod vocab;

pub use prompt::{build_prompt, encode_prompt, truncate_to_budget, PromptInput};
pub use vocab::{train_vocab, Vocabulary, BOS, EOS, NEWLINE, PAD};
