//! Teacher-labelled training data.

use crate::data::SummaryRecord;
use crate::decode::{summarize, DecodeConfig, Strategy};
use crate::error::{Error, Result};
use crate::model::ForwardWeights;
use crate::tokenizer::{PromptInput, Vocabulary};

/// Labels every input with the teacher's greedy summary cut to `budget`
/// tokens. Inputs the teacher cannot decode are logged and skipped.
pub fn generate_distillation_set<W: ForwardWeights + ?Sized>(
    teacher: &W,
    vocab: &Vocabulary,
    inputs: &[PromptInput],
    cfg: &DecodeConfig,
    budget: usize,
) -> Result<Vec<SummaryRecord>> {
    if matches!(cfg.strategy, Strategy::Sample { .. }) {
        return Err(Error::Config(
            "distillation labels come from greedy or lookahead decoding".into(),
        ));
    }
    let mut out = Vec::with_capacity(inputs.len());
    for (i, input) in inputs.iter().enumerate() {
        match summarize(teacher, vocab, input, cfg, budget) {
            Ok(s) => out.push(SummaryRecord::new(input, s.text)),
            Err(e) => log::warn!("distillation input {i} skipped: {e}"),
        }
    }
    Ok(out)
}
