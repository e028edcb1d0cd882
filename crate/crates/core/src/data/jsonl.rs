use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{detokenize, ComparativePair, ParaphraseGroup, TaskSample};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Schema {
    Task,
    Paraphrase,
    Pair,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Records {
    Tasks(Vec<TaskSample>),
    Paraphrases(Vec<ParaphraseGroup>),
    Pairs(Vec<ComparativePair>),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskLine {
    prompt: String,
    answer: String,
    tag: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    subject: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParaphraseLine {
    group_id: String,
    prompt: String,
    answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    subject: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PairLine {
    main: String,
    prompt1: String,
    answer1: String,
    prompt2: String,
    answer2: String,
    #[serde(default = "default_tag1")]
    tag1: String,
    #[serde(default = "default_tag2")]
    tag2: String,
}

fn default_tag1() -> String {
    "arith".into()
}

fn default_tag2() -> String {
    "code".into()
}

fn sample(prompt: &str, answer: &str, tag: &str, subject: Option<&str>, line: usize) -> Result<TaskSample> {
    let s = match subject {
        Some(sub) => TaskSample::with_subject(prompt, answer, tag, sub),
        None => TaskSample::from_text(prompt, answer, tag),
    };
    s.map_err(|e| Error::Parse {
        line,
        msg: e.to_string(),
    })
}

fn lines<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<(usize, T)>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map(|v| (i + 1, v))
                .map_err(|e| Error::Parse {
                    line: i + 1,
                    msg: e.to_string(),
                })
        })
        .collect()
}

/// Parses JSONL text under `schema`.
pub fn parse_jsonl(text: &str, schema: Schema) -> Result<Records> {
    match schema {
        Schema::Task => lines::<TaskLine>(text)?
            .into_iter()
            .map(|(n, l)| sample(&l.prompt, &l.answer, &l.tag, l.subject.as_deref(), n))
            .collect::<Result<_>>()
            .map(Records::Tasks),
        Schema::Paraphrase => {
            let mut order = Vec::new();
            let mut groups: BTreeMap<String, Vec<TaskSample>> = BTreeMap::new();
            for (n, l) in lines::<ParaphraseLine>(text)? {
                let s = sample(&l.prompt, &l.answer, "paraphrase", l.subject.as_deref(), n)?;
                if !groups.contains_key(&l.group_id) {
                    order.push(l.group_id.clone());
                }
                groups.entry(l.group_id).or_default().push(s);
            }
            let out: Vec<ParaphraseGroup> = order
                .into_iter()
                .map(|id| ParaphraseGroup {
                    members: groups.remove(&id).unwrap_or_default(),
                    group_id: id,
                })
                .collect();
            for g in &out {
                g.validate()?;
            }
            Ok(Records::Paraphrases(out))
        }
        Schema::Pair => lines::<PairLine>(text)?
            .into_iter()
            .map(|(n, l)| {
                let p = ComparativePair {
                    sub1: sample(&l.prompt1, &l.answer1, &l.tag1, Some(&l.main), n)?,
                    sub2: sample(&l.prompt2, &l.answer2, &l.tag2, Some(&l.main), n)?,
                    main_part: l.main,
                };
                p.validate().map_err(|e| Error::Parse {
                    line: n,
                    msg: e.to_string(),
                })?;
                Ok(p)
            })
            .collect::<Result<_>>()
            .map(Records::Pairs),
    }
}

pub fn load_jsonl(path: &Path, schema: Schema) -> Result<Records> {
    parse_jsonl(&std::fs::read_to_string(path)?, schema)
}

pub fn load_tasks(path: &Path) -> Result<Vec<TaskSample>> {
    match load_jsonl(path, Schema::Task)? {
        Records::Tasks(v) => Ok(v),
        _ => unreachable!("task schema yields tasks"),
    }
}

pub fn load_paraphrases(path: &Path) -> Result<Vec<ParaphraseGroup>> {
    match load_jsonl(path, Schema::Paraphrase)? {
        Records::Paraphrases(v) => Ok(v),
        _ => unreachable!("paraphrase schema yields groups"),
    }
}

pub fn load_pairs(path: &Path) -> Result<Vec<ComparativePair>> {
    match load_jsonl(path, Schema::Pair)? {
        Records::Pairs(v) => Ok(v),
        _ => unreachable!("pair schema yields pairs"),
    }
}

fn subject_text(s: &TaskSample) -> Option<String> {
    s.subject.map(|(a, b)| detokenize(&s.prompt[a..b]))
}

/// Renders records in the same JSONL schemas the loader accepts.
pub fn to_jsonl(records: &Records) -> String {
    let mut out = String::new();
    let mut push = |v: serde_json::Result<String>| {
        let _ = writeln!(out, "{}", v.expect("record serialises"));
    };
    match records {
        Records::Tasks(v) => {
            for s in v {
                push(serde_json::to_string(&TaskLine {
                    prompt: s.prompt_text(),
                    answer: s.answer_text(),
                    tag: s.tag.clone(),
                    subject: subject_text(s),
                }));
            }
        }
        Records::Paraphrases(v) => {
            for g in v {
                for m in &g.members {
                    push(serde_json::to_string(&ParaphraseLine {
                        group_id: g.group_id.clone(),
                        prompt: m.prompt_text(),
                        answer: m.answer_text(),
                        subject: subject_text(m),
                    }));
                }
            }
        }
        Records::Pairs(v) => {
            for p in v {
                push(serde_json::to_string(&PairLine {
                    main: p.main_part.clone(),
                    prompt1: p.sub1.prompt_text(),
                    answer1: p.sub1.answer_text(),
                    prompt2: p.sub2.prompt_text(),
                    answer2: p.sub2.answer_text(),
                    tag1: p.sub1.tag.clone(),
                    tag2: p.sub2.tag.clone(),
                }));
            }
        }
    }
    out
}

pub fn export_jsonl(path: &Path, records: &Records) -> Result<()> {
    std::fs::write(path, to_jsonl(records))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic_suite, SuiteSpec};

    #[test]
    fn task_line_parses() {
        let r = parse_jsonl(r#"{"prompt":"1+1=","answer":"2","tag":"arith"}"#, Schema::Task).unwrap();
        let Records::Tasks(v) = r else { panic!() };
        assert_eq!(v[0].answer_text(), "2");
        assert_eq!(parse_jsonl("", Schema::Task).unwrap(), Records::Tasks(vec![]));
    }

    #[test]
    fn errors_cite_line_numbers() {
        let text = "{\"prompt\":\"a\",\"answer\":\"b\",\"tag\":\"t\"}\n{\"prompt\":\"a\",\"tag\":\"t\"}\n";
        match parse_jsonl(text, Schema::Task) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        match parse_jsonl("{not json", Schema::Task) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("{other:?}"),
        }
        let empty_answer = r#"{"prompt":"a","answer":"","tag":"t"}"#;
        assert!(matches!(parse_jsonl(empty_answer, Schema::Task), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn short_group_is_schema_error() {
        let text: String = (0..4)
            .map(|i| format!("{{\"group_id\":\"g7\",\"prompt\":\"p{i}\",\"answer\":\"x\"}}\n"))
            .collect();
        match parse_jsonl(&text, Schema::Paraphrase) {
            Err(Error::Schema(msg)) => assert!(msg.contains("g7")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn export_roundtrips_all_schemas() {
        let s = gen_synthetic_suite(&SuiteSpec {
            arith: 10,
            code: 5,
            sentiment: 5,
            pairs: 5,
            paraphrase_groups: 3,
            max_operand: 9,
            seed: 1,
        })
        .unwrap();
        for (rec, schema) in [
            (Records::Tasks(s.arith.clone()), Schema::Task),
            (Records::Tasks(s.sentiment.clone()), Schema::Task),
            (Records::Paraphrases(s.paraphrases.clone()), Schema::Paraphrase),
            (Records::Pairs(s.pairs.clone()), Schema::Pair),
        ] {
            assert_eq!(parse_jsonl(&to_jsonl(&rec), schema).unwrap(), rec);
        }
    }
}
