//! Line-delimited JSON records shared by the training, preference and
//! serving commands.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{encode_prompt, PromptInput, Vocabulary, EOS};
use crate::train::{PreferencePair, SftExample};

/// `{query, title, content, summary}`: supervised and distillation data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SummaryRecord {
    pub query: String,
    #[serde(default)]
    pub title: String,
    pub content: String,
    pub summary: String,
}

impl SummaryRecord {
    pub fn new(input: &PromptInput, summary: String) -> Self {
        Self {
            query: input.query.clone(),
            title: input.title.clone(),
            content: input.content.clone(),
            summary,
        }
    }

    pub fn input(&self) -> PromptInput {
        PromptInput {
            query: self.query.clone(),
            title: self.title.clone(),
            content: self.content.clone(),
        }
    }

    /// Encoded prompt and EOS-terminated target.
    pub fn to_example(&self, vocab: &Vocabulary) -> SftExample {
        let mut target = vocab.encode(&self.summary);
        target.push(EOS);
        SftExample {
            prompt_tokens: encode_prompt(vocab, &self.input()),
            target_tokens: target,
        }
    }
}

/// `{query, title, content, chosen, rejected}`: preference data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceRecord {
    pub query: String,
    #[serde(default)]
    pub title: String,
    pub content: String,
    pub chosen: String,
    pub rejected: String,
}

impl PreferenceRecord {
    pub fn input(&self) -> PromptInput {
        PromptInput {
            query: self.query.clone(),
            title: self.title.clone(),
            content: self.content.clone(),
        }
    }

    pub fn to_pair(&self, vocab: &Vocabulary) -> PreferencePair {
        let complete = |s: &str| {
            let mut t = vocab.encode(s);
            t.push(EOS);
            t
        };
        PreferencePair {
            prompt_tokens: encode_prompt(vocab, &self.input()),
            y_plus: complete(&self.chosen),
            y_minus: complete(&self.rejected),
        }
    }
}

/// Parses every non-blank line, keeping per-line failures so callers can
/// count and skip them. Items carry their 1-based line number.
pub fn parse_jsonl<T: DeserializeOwned>(text: &str) -> Vec<(usize, Result<T>)> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, serde_json::from_str(l).map_err(Error::from)))
        .collect()
}

/// Reads a whole file, failing on the first malformed line.
pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(item);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trip_and_bad_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let recs = vec![SummaryRecord {
            query: "q".into(),
            title: String::new(),
            content: "c\nd".into(),
            summary: "s".into(),
        }];
        write_jsonl(&path, &recs).unwrap();
        assert_eq!(read_jsonl::<SummaryRecord>(&path).unwrap(), recs);

        let parsed = parse_jsonl::<SummaryRecord>(
            "{\"query\":\"a\",\"content\":\"b\",\"summary\":\"c\"}\n\nnot json\n",
        );
        assert_eq!(parsed.len(), 2);
        assert!(parsed[0].1.is_ok());
        assert_eq!(parsed[1].0, 3);
        assert!(parsed[1].1.is_err());
    }

    #[test]
    fn examples_end_with_eos() {
        let v = Vocabulary::bytes_only();
        let r = SummaryRecord {
            query: "q".into(),
            title: "t".into(),
            content: "c".into(),
            summary: "ab".into(),
        };
        let ex = r.to_example(&v);
        assert_eq!(ex.target_tokens, vec![b'a' as u32, b'b' as u32, EOS]);
        assert_eq!(ex.prompt_tokens[0], crate::tokenizer::BOS);
    }
}
