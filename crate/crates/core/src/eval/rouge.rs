//! ROUGE-N with clipped multi-reference counts and recall ROUGE-L.

use std::collections::HashMap;
use std::hash::Hash;

fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x3040..=0x30FF      // kana
        | 0x3400..=0x4DBF    // CJK extension A
        | 0x4E00..=0x9FFF    // CJK unified
        | 0xAC00..=0xD7AF    // hangul syllables
        | 0xF900..=0xFAFF    // compatibility ideographs
        | 0x20000..=0x2FA1F)
}

/// Lowercased word tokens. Whitespace and punctuation separate words and
/// every CJK character is a token of its own.
pub fn rouge_tokenize(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for c in s.chars() {
        if is_cjk(c) {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            out.push(c.to_string());
        } else if c.is_alphanumeric() {
            word.extend(c.to_lowercase());
        } else if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

fn ngram_counts<T: Hash + Eq>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for g in tokens.windows(n) {
            *m.entry(g).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped n-gram recall summed over all references:
/// `Σ_ref Σ_g min(c_cand(g), c_ref(g)) / Σ_ref Σ_g c_ref(g)`, 0 when the
/// references hold no n-grams.
pub fn rouge_n<T, R>(candidate: &[T], references: &[R], n: usize) -> f64
where
    T: Hash + Eq,
    R: AsRef<[T]>,
{
    assert!(n >= 1, "ROUGE-N needs n >= 1");
    let cand = ngram_counts(candidate, n);
    let (mut hit, mut total) = (0usize, 0usize);
    for r in references {
        for (g, c) in ngram_counts(r.as_ref(), n) {
            total += c;
            hit += c.min(cand.get(g).copied().unwrap_or(0));
        }
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

/// Length of the longest common subsequence.
pub fn lcs_len<T: Eq>(x: &[T], y: &[T]) -> usize {
    let mut prev = vec![0usize; y.len() + 1];
    let mut cur = vec![0usize; y.len() + 1];
    for a in x {
        for (j, b) in y.iter().enumerate() {
            cur[j + 1] = if a == b {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[y.len()]
}

/// `LCS(X, Y) / |Y|`, 0 for an empty reference.
pub fn rouge_l<T: Eq>(candidate: &[T], reference: &[T]) -> f64 {
    if reference.is_empty() {
        return 0.0;
    }
    lcs_len(candidate, reference) as f64 / reference.len() as f64
}

/// Best recall ROUGE-L over several references.
pub fn rouge_l_multi<T: Eq, R: AsRef<[T]>>(candidate: &[T], references: &[R]) -> f64 {
    references
        .iter()
        .map(|r| rouge_l(candidate, r.as_ref()))
        .fold(0.0, f64::max)
}

/// LCS-based F-measure with recall weight `beta`.
pub fn rouge_l_f<T: Eq>(candidate: &[T], reference: &[T], beta: f64) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let l = lcs_len(candidate, reference) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let r = l / reference.len() as f64;
    let p = l / candidate.len() as f64;
    let b2 = beta * beta;
    (1.0 + b2) * r * p / (r + b2 * p)
}

/// ROUGE-1, ROUGE-2 and ROUGE-L of one candidate.
#[derive(Debug, Clone, Copy, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RougeScores {
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
}

/// Scores raw text after [`rouge_tokenize`].
pub fn score_text<S: AsRef<str>>(candidate: &str, references: &[S]) -> RougeScores {
    let cand = rouge_tokenize(candidate);
    let refs: Vec<Vec<String>> = references
        .iter()
        .map(|r| rouge_tokenize(r.as_ref()))
        .collect();
    RougeScores {
        rouge1: rouge_n(&cand, &refs, 1),
        rouge2: rouge_n(&cand, &refs, 2),
        rouge_l: rouge_l_multi(&cand, &refs),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenization_rules() {
        assert_eq!(rouge_tokenize("Hello, World"), vec!["hello", "world"]);
        assert!(rouge_tokenize("").is_empty());
        assert_eq!(rouge_tokenize("摘要句").len(), 3);
        assert_eq!(
            rouge_tokenize("GPU加速x2。ok"),
            vec!["gpu", "加", "速", "x2", "ok"]
        );
    }

    #[test]
    fn worked_examples() {
        let c = ["a", "b", "c", "d"];
        assert_eq!(rouge_n(&c, &[["a", "b", "x", "y"]], 1), 0.5);
        assert_eq!(rouge_n(&c, &[c], 1), 1.0);
        assert_eq!(rouge_n(&c, &[["p", "q"]], 2), 0.0);
        assert_eq!(rouge_l(&c, &["a", "c", "d"]), 1.0);
        assert_eq!(rouge_l(&c, &["x"]), 0.0);
        let empty: [&str; 0] = [];
        assert_eq!(rouge_l(&c, &empty), 0.0);
        assert_eq!(rouge_n(&c, &[empty], 1), 0.0);
    }

    #[test]
    fn clipping_and_multi_reference() {
        // candidate repeats "a" three times but each reference holds it once
        let c = ["a", "a", "a"];
        assert_eq!(rouge_n(&c, &[["a", "b"], ["a", "c"]], 1), 2.0 / 4.0);
    }

    #[test]
    fn f_measure_is_harmonic_at_beta_one() {
        let c = ["a", "b", "c", "d"];
        let r = ["a", "c"];
        // recall 1, precision 0.5
        assert!((rouge_l_f(&c, &r, 1.0) - 2.0 / 3.0).abs() < 1e-12);
    }
}
