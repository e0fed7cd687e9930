//! Byte-level BPE vocabulary.
//!
//! Ids 0..256 are raw bytes, followed by the four special tokens, followed
//! by learned merges in rank order. A newline in the text always encodes to
//! [`NEWLINE`], so summary points stay structurally visible; every other
//! byte sequence is encodable through the byte fallback.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const PAD: u32 = 258;
pub const NEWLINE: u32 = 259;
pub const N_SPECIAL: usize = 4;
pub const FIRST_MERGE: u32 = 260;

const HEADER: &str = "qdgs-vocab v1";
const SPECIAL_NAMES: [(&str, u32); N_SPECIAL] = [
    ("BOS", BOS),
    ("EOS", EOS),
    ("PAD", PAD),
    ("NEWLINE", NEWLINE),
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    merges: Vec<(u32, u32)>,
    ranks: HashMap<(u32, u32), u32>,
    pieces: Vec<Vec<u8>>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::bytes_only()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Class {
    Letter,
    Wide,
    Digit,
    Space,
    Newline,
    Punct,
}

fn class(b: u8) -> Class {
    match b {
        b'\n' => Class::Newline,
        b' ' | b'\t' | b'\r' | 0x0B | 0x0C => Class::Space,
        b'0'..=b'9' => Class::Digit,
        b'a'..=b'z' | b'A'..=b'Z' => Class::Letter,
        0x80..=0xFF => Class::Wide,
        _ => Class::Punct,
    }
}

/// Length of the UTF-8 sequence led by byte `b`.
fn utf8_len(b: u8) -> usize {
    match b {
        0xF0..=0xFF => 4,
        0xE0..=0xEF => 3,
        0xC0..=0xDF => 2,
        _ => 1,
    }
}

/// End of the run of class `c` starting at `i`. Non-ASCII characters never
/// form runs: each one is its own chunk, so a CJK character tokenizes the
/// same way whatever surrounds it.
fn run_end(bytes: &[u8], mut i: usize, c: Class) -> usize {
    if c == Class::Wide {
        return (i + utf8_len(bytes[i])).min(bytes.len());
    }
    while i < bytes.len() && class(bytes[i]) == c {
        i += 1;
    }
    i
}

/// Splits text bytes into merge-isolated chunks: runs of one character
/// class (single characters for non-ASCII), optionally led by a single
/// space, with every newline alone.
fn pre_tokenize(bytes: &[u8]) -> Vec<&[u8]> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let start = i;
        let c = class(bytes[i]);
        match c {
            Class::Newline => i += 1,
            Class::Space => {
                while i < bytes.len() && class(bytes[i]) == Class::Space {
                    i += 1;
                }
                let next_is_word =
                    i < bytes.len() && !matches!(class(bytes[i]), Class::Space | Class::Newline);
                if next_is_word && bytes[i - 1] == b' ' {
                    if i - 1 > start {
                        out.push(&bytes[start..i - 1]);
                    }
                    let lead = i - 1;
                    i = run_end(bytes, i, class(bytes[i]));
                    out.push(&bytes[lead..i]);
                    continue;
                }
            }
            _ => i = run_end(bytes, i, c),
        }
        out.push(&bytes[start..i]);
    }
    out
}

impl Vocabulary {
    /// 256 byte tokens plus the specials, no merges.
    pub fn bytes_only() -> Self {
        let mut pieces: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        pieces.push(Vec::new());
        pieces.push(Vec::new());
        pieces.push(Vec::new());
        pieces.push(b"\n".to_vec());
        Self {
            merges: Vec::new(),
            ranks: HashMap::new(),
            pieces,
        }
    }

    fn from_merges(merges: Vec<(u32, u32)>) -> Result<Self> {
        let mut v = Self::bytes_only();
        for (rank, &(a, b)) in merges.iter().enumerate() {
            let id = FIRST_MERGE + rank as u32;
            for x in [a, b] {
                if x >= id || (BOS..FIRST_MERGE).contains(&x) {
                    return Err(Error::Vocabulary(format!(
                        "merge {rank} refers to invalid id {x}"
                    )));
                }
            }
            if v.ranks.insert((a, b), rank as u32).is_some() {
                return Err(Error::Vocabulary(format!("duplicate merge ({a}, {b})")));
            }
            let mut piece = v.pieces[a as usize].clone();
            piece.extend_from_slice(&v.pieces[b as usize]);
            v.pieces.push(piece);
        }
        v.merges = merges;
        Ok(v)
    }

    pub fn size(&self) -> usize {
        self.pieces.len()
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    /// Byte string of a token (empty for BOS/EOS/PAD).
    pub fn piece(&self, id: u32) -> Option<&[u8]> {
        self.pieces.get(id as usize).map(|p| p.as_slice())
    }

    pub fn is_special(id: u32) -> bool {
        (BOS..FIRST_MERGE).contains(&id)
    }

    fn merge_chunk(&self, chunk: &[u8], out: &mut Vec<u32>) {
        let mut ids: Vec<u32> = chunk.iter().map(|&b| b as u32).collect();
        while ids.len() > 1 {
            let best = ids
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| self.ranks.get(&(w[0], w[1])).map(|&r| (r, i)))
                .min();
            let Some((rank, _)) = best else { break };
            let (a, b) = self.merges[rank as usize];
            let id = FIRST_MERGE + rank;
            let mut merged = Vec::with_capacity(ids.len());
            let mut i = 0;
            while i < ids.len() {
                if i + 1 < ids.len() && ids[i] == a && ids[i + 1] == b {
                    merged.push(id);
                    i += 2;
                } else {
                    merged.push(ids[i]);
                    i += 1;
                }
            }
            ids = merged;
        }
        out.extend(ids);
    }

    pub fn encode(&self, s: &str) -> Vec<u32> {
        let mut out = Vec::with_capacity(s.len());
        for chunk in pre_tokenize(s.as_bytes()) {
            if chunk == b"\n" {
                out.push(NEWLINE);
            } else {
                self.merge_chunk(chunk, &mut out);
            }
        }
        out
    }

    /// Concatenates token bytes, skipping BOS/EOS/PAD. Invalid UTF-8 (only
    /// possible for sequences that did not come from `encode`) is replaced
    /// lossily.
    pub fn decode(&self, tokens: &[u32]) -> Result<String> {
        let mut bytes = Vec::with_capacity(tokens.len() * 2);
        for &t in tokens {
            let p = self.pieces.get(t as usize).ok_or_else(|| {
                Error::Vocabulary(format!(
                    "token id {t} outside vocabulary of {}",
                    self.size()
                ))
            })?;
            bytes.extend_from_slice(p);
        }
        Ok(match String::from_utf8(bytes) {
            Ok(s) => s,
            Err(e) => String::from_utf8_lossy(e.as_bytes()).into_owned(),
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{HEADER}\nvocab_size {}\nmerges {}\nspecials {N_SPECIAL}\n",
            self.size(),
            self.merges.len()
        );
        for (a, b) in &self.merges {
            s.push_str(&format!("merge {a} {b}\n"));
        }
        for (name, id) in SPECIAL_NAMES {
            s.push_str(&format!("special {name} {id}\n"));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |m: String| Error::Format(format!("vocabulary file: {m}"));
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        if lines.next().map(str::trim) != Some(HEADER) {
            return Err(bad(format!("missing '{HEADER}' header")));
        }
        let mut field = |key: &str| -> Result<usize> {
            let line = lines.next().ok_or_else(|| bad(format!("missing {key}")))?;
            let mut it = line.split_whitespace();
            match (it.next(), it.next().map(str::parse::<usize>)) {
                (Some(k), Some(Ok(v))) if k == key => Ok(v),
                _ => Err(bad(format!("expected '{key} <n>', got '{line}'"))),
            }
        };
        let size = field("vocab_size")?;
        let n_merges = field("merges")?;
        let n_special = field("specials")?;
        if n_special != N_SPECIAL || size != 256 + N_SPECIAL + n_merges {
            return Err(bad(format!(
                "inconsistent sizes {size}/{n_merges}/{n_special}"
            )));
        }
        let mut merges = Vec::with_capacity(n_merges);
        let mut specials = Vec::new();
        for line in lines {
            let parts: Vec<&str> = line.split_whitespace().collect();
            match parts.as_slice() {
                ["merge", a, b] => {
                    let a = a
                        .parse()
                        .map_err(|_| bad(format!("bad merge line '{line}'")))?;
                    let b = b
                        .parse()
                        .map_err(|_| bad(format!("bad merge line '{line}'")))?;
                    merges.push((a, b));
                }
                ["special", name, id] => specials.push((name.to_string(), id.parse::<u32>().ok())),
                _ => return Err(bad(format!("unrecognized line '{line}'"))),
            }
        }
        if merges.len() != n_merges {
            return Err(bad(format!(
                "header says {n_merges} merges, found {}",
                merges.len()
            )));
        }
        for (name, id) in SPECIAL_NAMES {
            if !specials.iter().any(|(n, i)| n == name && *i == Some(id)) {
                return Err(bad(format!("special {name} must be assigned id {id}")));
            }
        }
        if specials.len() != N_SPECIAL {
            return Err(bad("unexpected special token entries".into()));
        }
        Self::from_merges(merges)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

/// Learns merges until the vocabulary reaches `target_size`, or until no
/// pair occurs at least twice. The most frequent pair wins; ties go to the
/// lexicographically smallest concatenated-byte pair.
pub fn train_vocab<'a>(
    corpus: impl IntoIterator<Item = &'a str>,
    target_size: usize,
) -> Result<Vocabulary> {
    let floor = 256 + N_SPECIAL;
    if target_size < floor {
        return Err(Error::Config(format!(
            "target vocabulary size {target_size} is below {floor}"
        )));
    }
    let mut counts: HashMap<Vec<u8>, u64> = HashMap::new();
    for text in corpus {
        for chunk in pre_tokenize(text.as_bytes()) {
            if chunk != b"\n" && chunk.len() > 1 {
                *counts.entry(chunk.to_vec()).or_default() += 1;
            }
        }
    }
    let mut words: Vec<(Vec<u32>, u64)> = counts
        .into_iter()
        .map(|(w, c)| (w.into_iter().map(u32::from).collect(), c))
        .collect();
    words.sort();

    let mut vocab = Vocabulary::bytes_only();
    while vocab.size() < target_size {
        let mut pairs: HashMap<(u32, u32), u64> = HashMap::new();
        for (w, c) in &words {
            for p in w.windows(2) {
                *pairs.entry((p[0], p[1])).or_default() += c;
            }
        }
        let best = pairs
            .into_iter()
            .filter(|&(_, c)| c >= 2)
            .max_by(|(pa, ca), (pb, cb)| {
                ca.cmp(cb).then_with(|| {
                    let ka = (vocab.piece(pa.0).unwrap(), vocab.piece(pa.1).unwrap());
                    let kb = (vocab.piece(pb.0).unwrap(), vocab.piece(pb.1).unwrap());
                    kb.cmp(&ka)
                })
            });
        let Some(((a, b), _)) = best else { break };
        let id = vocab.size() as u32;
        let mut piece = vocab.pieces[a as usize].clone();
        piece.extend_from_slice(&vocab.pieces[b as usize]);
        vocab.ranks.insert((a, b), vocab.merges.len() as u32);
        vocab.merges.push((a, b));
        vocab.pieces.push(piece);
        for (w, _) in words.iter_mut() {
            let mut i = 0;
            let mut out = Vec::with_capacity(w.len());
            while i < w.len() {
                if i + 1 < w.len() && w[i] == a && w[i + 1] == b {
                    out.push(id);
                    i += 2;
                } else {
                    out.push(w[i]);
                    i += 1;
                }
            }
            *w = out;
        }
    }
    Ok(vocab)
}
