use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{ComparativePair, ParaphraseGroup, TaskSample};
use crate::error::{Error, Result};
use crate::seeds;

/// Sizes and seed for [`gen_synthetic_suite`].
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct SuiteSpec {
    pub arith: usize,
    pub code: usize,
    pub sentiment: usize,
    pub pairs: usize,
    pub paraphrase_groups: usize,
    /// Operands range over `0..=max_operand`.
    pub max_operand: u32,
    pub seed: u64,
}

impl Default for SuiteSpec {
    fn default() -> Self {
        SuiteSpec {
            arith: 1000,
            code: 500,
            sentiment: 500,
            pairs: 200,
            paraphrase_groups: 50,
            max_operand: 39,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticSuite {
    pub arith: Vec<TaskSample>,
    pub code: Vec<TaskSample>,
    pub sentiment: Vec<TaskSample>,
    pub pairs: Vec<ComparativePair>,
    pub paraphrases: Vec<ParaphraseGroup>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Expr {
    pub a: u32,
    pub b: u32,
    pub minus: bool,
}

impl Expr {
    pub fn main_part(&self) -> String {
        format!("{}{}{}=?", self.a, if self.minus { '-' } else { '+' }, self.b)
    }

    pub fn body(&self) -> String {
        format!("{}{}{}", self.a, if self.minus { '-' } else { '+' }, self.b)
    }

    pub fn value(&self) -> u32 {
        if self.minus {
            self.a - self.b
        } else {
            self.a + self.b
        }
    }

    pub fn arith(&self) -> TaskSample {
        let main = self.main_part();
        TaskSample::with_subject(&format!("calc {main} "), &self.value().to_string(), "arith", &main)
            .expect("arith template is valid")
    }

    pub fn code(&self) -> TaskSample {
        let main = self.main_part();
        TaskSample::with_subject(&format!("code {main} "), &format!("print({})", self.body()), "code", &main)
            .expect("code template is valid")
    }
}

/// Every addition `a+b` and every non-negative subtraction `a-b`.
pub fn all_exprs(max_operand: u32) -> Vec<Expr> {
    let mut v = Vec::new();
    for a in 0..=max_operand {
        for b in 0..=max_operand {
            v.push(Expr { a, b, minus: false });
            if a >= b {
                v.push(Expr { a, b, minus: true });
            }
        }
    }
    v
}

/// `(prefix, between operands, suffix)` for the five addition paraphrases.
pub const PARAPHRASE_TEMPLATES: [(&str, &str, &str); 5] = [
    ("calc ", "+", "=? "),
    ("what is ", " plus ", "? "),
    ("add ", " and ", ": "),
    ("sum of ", ",", " is "),
    ("", " and ", " make "),
];

/// The five prompts for `a + b`, each with its operand span marked.
pub fn paraphrase_templates(a: u32, b: u32) -> Vec<TaskSample> {
    PARAPHRASE_TEMPLATES
        .iter()
        .map(|(pre, mid, suf)| {
            let subj = format!("{a}{mid}{b}");
            TaskSample::with_subject(&format!("{pre}{subj}{suf}"), &(a + b).to_string(), "paraphrase", &subj)
                .expect("paraphrase template is valid")
        })
        .collect()
}

const SUBJECTS: [&str; 24] = [
    "film", "meal", "trip", "book", "song", "game", "show", "room", "park", "cake", "ride", "play", "tour", "class",
    "party", "hotel", "movie", "story", "dance", "drink", "visit", "album", "coffee", "lesson",
];
const POSITIVE: [&str; 12] = [
    "great", "lovely", "superb", "fun", "nice", "happy", "good", "bright", "warm", "sweet", "fine", "grand",
];
const NEGATIVE: [&str; 12] = [
    "awful", "boring", "bad", "sad", "dull", "poor", "grim", "cold", "harsh", "weak", "rude", "bleak",
];

pub fn sentiment_pool() -> Vec<TaskSample> {
    let mut v = Vec::new();
    for s in SUBJECTS {
        for (adjs, label) in [(&POSITIVE, "pos"), (&NEGATIVE, "neg")] {
            for adj in adjs.iter() {
                v.push(
                    TaskSample::with_subject(&format!("the {s} was {adj}: "), label, "sentiment", adj)
                        .expect("sentiment template is valid"),
                );
            }
        }
    }
    v
}

/// "not"-negated sentiment prompts whose label is the flip of the adjective's polarity.
pub fn negated_sentiment() -> Vec<TaskSample> {
    let mut v = Vec::new();
    for s in SUBJECTS {
        for (adjs, label) in [(&POSITIVE, "neg"), (&NEGATIVE, "pos")] {
            for adj in adjs.iter() {
                v.push(
                    TaskSample::with_subject(&format!("the {s} was not {adj}: "), label, "negation", adj)
                        .expect("negation template is valid"),
                );
            }
        }
    }
    v
}

fn take<T: Clone>(pool: &[T], n: usize, seed: u64, stream: &str, what: &str) -> Result<Vec<T>> {
    if n > pool.len() {
        return Err(Error::Capacity(format!(
            "requested {n} {what} samples but the template space holds {}",
            pool.len()
        )));
    }
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    idx.shuffle(&mut seeds::substream(seed, stream));
    Ok(idx[..n].iter().map(|&i| pool[i].clone()).collect())
}

/// Deterministic synthetic datasets for every experiment shape.
pub fn gen_synthetic_suite(spec: &SuiteSpec) -> Result<SyntheticSuite> {
    let exprs = all_exprs(spec.max_operand);
    let additions: Vec<Expr> = exprs.iter().copied().filter(|e| !e.minus).collect();
    let arith = take(&exprs, spec.arith, spec.seed, "arith", "arith")?
        .iter()
        .map(Expr::arith)
        .collect();
    let code = take(&exprs, spec.code, spec.seed, "code", "code")?
        .iter()
        .map(Expr::code)
        .collect();
    let sentiment = take(&sentiment_pool(), spec.sentiment, spec.seed, "sentiment", "sentiment")?;
    let pairs = take(&exprs, spec.pairs, spec.seed, "pairs", "pair")?
        .iter()
        .map(|e| ComparativePair {
            main_part: e.main_part(),
            sub1: e.arith(),
            sub2: e.code(),
        })
        .collect();
    let paraphrases = take(&additions, spec.paraphrase_groups, spec.seed, "paraphrases", "paraphrase")?
        .iter()
        .map(|e| ParaphraseGroup {
            group_id: format!("{}+{}", e.a, e.b),
            members: paraphrase_templates(e.a, e.b),
        })
        .collect();
    Ok(SyntheticSuite {
        arith,
        code,
        sentiment,
        pairs,
        paraphrases,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{contains_subsequence, detokenize, tokenize};

    fn small() -> SuiteSpec {
        SuiteSpec {
            arith: 60,
            code: 40,
            sentiment: 30,
            pairs: 20,
            paraphrase_groups: 10,
            max_operand: 9,
            seed: 4,
        }
    }

    #[test]
    fn one_plus_one_pair() {
        let e = Expr { a: 1, b: 1, minus: false };
        assert_eq!(e.main_part(), "1+1=?");
        assert_eq!(e.arith().answer_text(), "2");
        assert_eq!(e.code().answer_text(), "print(1+1)");
    }

    #[test]
    fn suite_is_deterministic_and_self_consistent() {
        let s = gen_synthetic_suite(&small()).unwrap();
        assert_eq!(s, gen_synthetic_suite(&small()).unwrap());
        for a in &s.arith {
            let p = a.prompt_text();
            let expr = p.trim_start_matches("calc ").trim_end_matches("=? ");
            let v: i64 = if let Some((x, y)) = expr.split_once('+') {
                x.parse::<i64>().unwrap() + y.parse::<i64>().unwrap()
            } else {
                let (x, y) = expr.split_once('-').unwrap();
                x.parse::<i64>().unwrap() - y.parse::<i64>().unwrap()
            };
            assert_eq!(v.to_string(), a.answer_text());
        }
        for p in &s.pairs {
            p.validate().unwrap();
            let main = tokenize(&p.main_part);
            assert!(contains_subsequence(&p.sub1.prompt, &main) && contains_subsequence(&p.sub2.prompt, &main));
            assert_ne!(p.sub1.prompt, p.sub2.prompt);
        }
        for g in &s.paraphrases {
            g.validate().unwrap();
        }
        let sub = s.sentiment[0].subject.unwrap();
        assert!(!detokenize(&s.sentiment[0].prompt[sub.0..sub.1]).is_empty());
    }

    #[test]
    fn oversized_request_is_capacity_error() {
        let spec = SuiteSpec {
            arith: 10_000,
            ..small()
        };
        assert!(matches!(gen_synthetic_suite(&spec), Err(Error::Capacity(_))));
    }
}
