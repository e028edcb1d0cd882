//! Character tokenizer, dataset records, JSONL ingestion and synthetic generators.

mod jsonl;
mod synth;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use jsonl::{export_jsonl, load_jsonl, load_pairs, load_paraphrases, load_tasks, parse_jsonl, to_jsonl, Records, Schema};
pub use synth::{
    all_exprs, gen_synthetic_suite, negated_sentiment, paraphrase_templates, sentiment_pool, Expr, SuiteSpec,
    SyntheticSuite, PARAPHRASE_TEMPLATES,
};

use crate::error::{Error, Result};
use crate::seeds;

pub const UNK_ID: usize = 0;
pub const UNK_GLYPH: char = '\u{FFFD}';
const FIRST_PRINTABLE: u8 = 32;
const LAST_PRINTABLE: u8 = 126;

/// Fixed character vocabulary: id 0 is UNK, then printable ASCII.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Tokenizer;

impl Tokenizer {
    pub fn vocab_size(&self) -> usize {
        1 + (LAST_PRINTABLE - FIRST_PRINTABLE + 1) as usize
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        text.chars()
            .map(|c| match u8::try_from(c) {
                Ok(b) if (FIRST_PRINTABLE..=LAST_PRINTABLE).contains(&b) => (b - FIRST_PRINTABLE) as usize + 1,
                _ => UNK_ID,
            })
            .collect()
    }

    pub fn detokenize(&self, tokens: &[usize]) -> String {
        tokens
            .iter()
            .map(|&t| {
                if t == UNK_ID || t >= self.vocab_size() {
                    UNK_GLYPH
                } else {
                    (FIRST_PRINTABLE + (t - 1) as u8) as char
                }
            })
            .collect()
    }
}

pub fn tokenize(text: &str) -> Vec<usize> {
    Tokenizer.tokenize(text)
}

pub fn detokenize(tokens: &[usize]) -> String {
    Tokenizer.detokenize(tokens)
}

/// One prompt/answer pair.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaskSample {
    pub prompt: Vec<usize>,
    pub answer: Vec<usize>,
    pub tag: String,
    /// Token range `[start, end)` of the subject inside the prompt.
    #[serde(default)]
    pub subject: Option<(usize, usize)>,
}

impl TaskSample {
    pub fn from_text(prompt: &str, answer: &str, tag: &str) -> Result<Self> {
        let s = TaskSample {
            prompt: tokenize(prompt),
            answer: tokenize(answer),
            tag: tag.to_string(),
            subject: None,
        };
        s.validate()?;
        Ok(s)
    }

    /// As [`TaskSample::from_text`], marking the first occurrence of `subject` in the prompt.
    pub fn with_subject(prompt: &str, answer: &str, tag: &str, subject: &str) -> Result<Self> {
        let mut s = Self::from_text(prompt, answer, tag)?;
        let start = prompt
            .find(subject)
            .ok_or_else(|| Error::Contract(format!("subject {subject:?} not in prompt {prompt:?}")))?;
        // ASCII prompts: byte offsets equal char offsets; fall back to counting chars otherwise
        let start = prompt[..start].chars().count();
        s.subject = Some((start, start + subject.chars().count()));
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.answer.is_empty() {
            return Err(Error::Contract("answer must be nonempty".into()));
        }
        if self.prompt.is_empty() {
            return Err(Error::Contract("prompt must be nonempty".into()));
        }
        if let Some((s, e)) = self.subject {
            if s >= e || e > self.prompt.len() {
                return Err(Error::Range(format!(
                    "subject span [{s}, {e}) outside prompt of {}",
                    self.prompt.len()
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.prompt.len() + self.answer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Prompt followed by the full answer.
    pub fn full(&self) -> Vec<usize> {
        let mut v = self.prompt.clone();
        v.extend_from_slice(&self.answer);
        v
    }

    /// Context `x ⊕ y_{<m}` and its next target `y_m`, for `m` in `0..answer.len()`.
    pub fn context(&self, m: usize) -> (Vec<usize>, usize) {
        let mut z = self.prompt.clone();
        z.extend_from_slice(&self.answer[..m]);
        (z, self.answer[m])
    }

    pub fn prompt_text(&self) -> String {
        detokenize(&self.prompt)
    }

    pub fn answer_text(&self) -> String {
        detokenize(&self.answer)
    }
}

/// Five prompts sharing one answer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParaphraseGroup {
    pub group_id: String,
    pub members: Vec<TaskSample>,
}

pub const GROUP_SIZE: usize = 5;

impl ParaphraseGroup {
    pub fn validate(&self) -> Result<()> {
        if self.members.len() != GROUP_SIZE {
            return Err(Error::Schema(format!(
                "paraphrase group {} has {} members, expected {GROUP_SIZE}",
                self.group_id,
                self.members.len()
            )));
        }
        let ans = &self.members[0].answer;
        if self.members.iter().any(|m| &m.answer != ans) {
            return Err(Error::Schema(format!("paraphrase group {} mixes answers", self.group_id)));
        }
        for (i, a) in self.members.iter().enumerate() {
            if self.members[i + 1..].iter().any(|b| b.prompt == a.prompt) {
                return Err(Error::Schema(format!("paraphrase group {} repeats a prompt", self.group_id)));
            }
        }
        Ok(())
    }
}

/// Same expression in a direct-answer and a code framing.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComparativePair {
    pub main_part: String,
    pub sub1: TaskSample,
    pub sub2: TaskSample,
}

impl ComparativePair {
    pub fn validate(&self) -> Result<()> {
        let main = tokenize(&self.main_part);
        for (name, s) in [("sub1", &self.sub1), ("sub2", &self.sub2)] {
            if !contains_subsequence(&s.prompt, &main) {
                return Err(Error::Schema(format!("{name} does not embed {:?}", self.main_part)));
            }
        }
        Ok(())
    }
}

pub fn contains_subsequence(hay: &[usize], needle: &[usize]) -> bool {
    needle.is_empty() || hay.windows(needle.len()).any(|w| w == needle)
}

/// Seeded partition into `(first, rest)` with `round(ratio · n)` items first.
pub fn split<T: Clone>(items: &[T], ratio: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Contract(format!("split ratio {ratio} outside [0, 1]")));
    }
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.shuffle(&mut seeds::substream(seed, "split"));
    let k = (ratio * items.len() as f64).round() as usize;
    let pick = |ids: &[usize]| ids.iter().map(|&i| items[i].clone()).collect();
    Ok((pick(&idx[..k]), pick(&idx[k..])))
}

/// SHA-256 of the canonical JSON encoding of the samples.
pub fn fingerprint(samples: &[TaskSample]) -> String {
    let mut h = Sha256::new();
    for s in samples {
        h.update(serde_json::to_vec(s).expect("sample serialises"));
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_roundtrip() {
        assert!(tokenize("").is_empty());
        assert_eq!(detokenize(&[]), "");
        assert_eq!(detokenize(&tokenize("1+1=")), "1+1=");
        assert_eq!(detokenize(&tokenize("a\u{e9}b")), "a\u{FFFD}b");
        assert_eq!(Tokenizer.vocab_size(), 96);
        assert!(tokenize("~ ").iter().all(|&t| t < 96 && t != UNK_ID));
    }

    #[test]
    fn contexts_walk_the_answer() {
        let s = TaskSample::from_text("ab", "xyz", "t").unwrap();
        let (z, y) = s.context(2);
        assert_eq!(detokenize(&z), "abxy");
        assert_eq!(detokenize(&[y]), "z");
    }

    #[test]
    fn empty_answer_rejected() {
        assert!(TaskSample::from_text("ab", "", "t").is_err());
    }

    #[test]
    fn subject_span_located() {
        let s = TaskSample::with_subject("calc 3+4=? ", "7", "arith", "3+4=?").unwrap();
        assert_eq!(s.subject, Some((5, 10)));
    }

    #[test]
    fn split_partitions_and_is_stable() {
        let items: Vec<u32> = (0..50).collect();
        let (a, b) = split(&items, 0.3, 9).unwrap();
        assert_eq!(a.len(), 15);
        let mut all: Vec<u32> = a.iter().chain(&b).copied().collect();
        all.sort();
        assert_eq!(all, items);
        assert_eq!(split(&items, 0.3, 9).unwrap(), (a, b));
    }
}
