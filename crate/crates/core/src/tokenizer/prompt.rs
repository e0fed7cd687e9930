//! Instruction prompt and the display-length budget.

use serde::{Deserialize, Serialize};

use super::vocab::{Vocabulary, BOS, NEWLINE};

/// One request: a query against a titled document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptInput {
    pub query: String,
    #[serde(default)]
    pub title: String,
    pub content: String,
}

/// Renders the instruction prompt. Fields are inserted verbatim; `---`
/// inside a field is not escaped. The `\n` in the instruction is the two
/// characters backslash and `n`.
pub fn build_prompt(input: &PromptInput) -> String {
    format!(
        "Please extract relevant summaries for the article content based on the query. \
         Please use \\n to separate multi-viewpoint and step-by-step summaries\
         ---Query:{}---Title:{}---Content:{}---",
        input.query, input.title, input.content
    )
}

/// `BOS` followed by the encoded prompt: the context a completion is
/// generated from.
pub fn encode_prompt(vocab: &Vocabulary, input: &PromptInput) -> Vec<u32> {
    let mut t = vec![BOS];
    t.extend(vocab.encode(&build_prompt(input)));
    t
}

/// How far back from `k` a NEWLINE may be used as the cut point.
pub const BOUNDARY_WINDOW: usize = 20;

/// Limits a summary to `k` tokens. When it is longer, the cut lands on the
/// last NEWLINE within the final [`BOUNDARY_WINDOW`] tokens before `k`
/// (dropping the NEWLINE itself), otherwise exactly at `k`.
pub fn truncate_to_budget(tokens: &[u32], k: usize) -> Vec<u32> {
    if tokens.len() <= k {
        return tokens.to_vec();
    }
    let lo = k.saturating_sub(BOUNDARY_WINDOW).max(1);
    match (lo..=k).rev().find(|&i| tokens[i] == NEWLINE) {
        Some(i) => tokens[..i].to_vec(),
        None => tokens[..k].to_vec(),
    }
}
