use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::artifact::json_hash;
use crate::data::{all_exprs, negated_sentiment, sentiment_pool, ComparativePair, Expr, ParaphraseGroup, TaskSample};
use crate::data::paraphrase_templates;
use crate::error::{Error, Result};
use crate::metrics::accuracy;
use crate::model::{train_masked, Checkpoint, Model, ModelConfig, TrainConfig, TrainReport};
use crate::seeds;

/// Everything that determines the pretrained toy model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyRecipe {
    pub seed: u64,
    pub max_operand: u32,
    pub code: usize,
    pub sentiment: usize,
    /// Share of every family seen in pretraining; the rest is split evenly into tune and eval.
    pub pretrain_frac: f64,
    pub paraphrase_groups: usize,
    pub pairs: usize,
    pub train: TrainConfig,
}

impl Default for ToyRecipe {
    fn default() -> Self {
        ToyRecipe {
            seed: 0,
            max_operand: 29,
            code: 400,
            sentiment: 400,
            pretrain_frac: 0.75,
            paraphrase_groups: 100,
            pairs: 200,
            train: TrainConfig {
                epochs: 30,
                lr: 1e-3,
                seed: 0,
                batch_size: 32,
                clip_norm: Some(1.0),
                warmup_steps: 100,
                cosine_decay: true,
            },
        }
    }
}

impl ToyRecipe {
    pub fn checksum(&self) -> String {
        json_hash(self)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Family {
    pub pretrain: Vec<TaskSample>,
    /// Held out from pretraining; used to fine-tune.
    pub tune: Vec<TaskSample>,
    /// Held out from pretraining and fine-tuning.
    pub eval: Vec<TaskSample>,
}

impl Family {
    fn from_pool(pool: Vec<TaskSample>, frac: f64) -> Self {
        let k = (frac * pool.len() as f64).round() as usize;
        let h = k + (pool.len() - k) / 2;
        Family {
            pretrain: pool[..k].to_vec(),
            tune: pool[k..h].to_vec(),
            eval: pool[h..].to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyData {
    pub arith: Family,
    pub code: Family,
    pub sentiment: Family,
    /// Additions drawn from pretraining arith, five framings each.
    pub paraphrases: Vec<ParaphraseGroup>,
    /// Arith/code framings of pretraining expressions.
    pub pairs: Vec<ComparativePair>,
    /// A task the pretrained model has never seen.
    pub negation: Vec<TaskSample>,
}

impl ToyData {
    pub fn family(&self, name: &str) -> Result<&Family> {
        match name {
            "arith" => Ok(&self.arith),
            "code" => Ok(&self.code),
            "sentiment" => Ok(&self.sentiment),
            _ => Err(Error::Contract(format!("unknown dataset family {name}"))),
        }
    }

    pub fn pretrain_set(&self) -> Vec<TaskSample> {
        let mut v = self.arith.pretrain.clone();
        v.extend(self.code.pretrain.iter().cloned());
        v.extend(self.sentiment.pretrain.iter().cloned());
        for g in &self.paraphrases {
            v.extend(g.members.iter().cloned());
        }
        v
    }
}

fn shuffled<T: Clone>(items: &[T], seed: u64, stream: &str) -> Vec<T> {
    let mut v = items.to_vec();
    v.shuffle(&mut seeds::substream(seed, stream));
    v
}

pub fn toy_data(r: &ToyRecipe) -> Result<ToyData> {
    if !(0.0..=1.0).contains(&r.pretrain_frac) {
        return Err(Error::Contract(format!("pretrain fraction {} outside [0, 1]", r.pretrain_frac)));
    }
    let exprs = shuffled(&all_exprs(r.max_operand), r.seed, "toy-arith");
    let code_exprs = shuffled(&all_exprs(r.max_operand), r.seed, "toy-code");
    let sentiment = shuffled(&sentiment_pool(), r.seed, "toy-sentiment");
    if r.code > code_exprs.len() || r.sentiment > sentiment.len() {
        return Err(Error::Capacity(format!(
            "requested {} code and {} sentiment samples from pools of {} and {}",
            r.code,
            r.sentiment,
            code_exprs.len(),
            sentiment.len()
        )));
    }
    let k = (r.pretrain_frac * exprs.len() as f64).round() as usize;
    let seen: Vec<Expr> = exprs[..k].to_vec();
    let additions: Vec<&Expr> = seen.iter().filter(|e| !e.minus).collect();
    if r.paraphrase_groups > additions.len() || r.pairs > seen.len() {
        return Err(Error::Capacity(format!(
            "requested {} paraphrase groups and {} pairs from {} seen additions and {} seen expressions",
            r.paraphrase_groups,
            r.pairs,
            additions.len(),
            seen.len()
        )));
    }
    Ok(ToyData {
        arith: Family::from_pool(exprs.iter().map(Expr::arith).collect(), r.pretrain_frac),
        code: Family::from_pool(code_exprs[..r.code].iter().map(Expr::code).collect(), r.pretrain_frac),
        sentiment: Family::from_pool(sentiment[..r.sentiment].to_vec(), r.pretrain_frac),
        paraphrases: additions[..r.paraphrase_groups]
            .iter()
            .map(|e| ParaphraseGroup {
                group_id: format!("{}+{}", e.a, e.b),
                members: paraphrase_templates(e.a, e.b),
            })
            .collect(),
        pairs: seen[..r.pairs]
            .iter()
            .map(|e| ComparativePair {
                main_part: e.main_part(),
                sub1: e.arith(),
                sub2: e.code(),
            })
            .collect(),
        negation: shuffled(&negated_sentiment(), r.seed, "toy-negation"),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub recipe: String,
    pub train: TrainReport,
    /// Greedy exact match on the pretraining arith split.
    pub arith_accuracy: f64,
    pub arith_eval_accuracy: f64,
}

pub fn pretrain(r: &ToyRecipe, data: &ToyData) -> Result<(Model, PretrainReport)> {
    let mut model = Model::init(ModelConfig::toy(crate::data::Tokenizer.vocab_size(), r.seed))?;
    let train = train_masked(&mut model, &data.pretrain_set(), None, false, &r.train)?;
    let report = PretrainReport {
        recipe: r.checksum(),
        train,
        arith_accuracy: accuracy(&model, &data.arith.pretrain)?,
        arith_eval_accuracy: accuracy(&model, &data.arith.eval)?,
    };
    Ok((model, report))
}

pub fn cache_path(dir: &Path, r: &ToyRecipe) -> PathBuf {
    dir.join(format!("toy-{}.nlck", &r.checksum()[..16]))
}

/// Loads the pretrained model for `r` from `dir`, training and saving it on a miss.
pub fn load_or_pretrain(r: &ToyRecipe, dir: &Path) -> Result<(Model, ToyData, PretrainReport)> {
    let data = toy_data(r)?;
    let path = cache_path(dir, r);
    if path.exists() {
        let ck = Checkpoint::load(&path)?;
        let report = ck
            .provenance
            .and_then(|p| serde_json::from_value::<PretrainReport>(p).ok())
            .filter(|p| p.recipe == r.checksum());
        if let Some(report) = report {
            return Ok((ck.model, data, report));
        }
    }
    let (model, report) = pretrain(r, &data)?;
    std::fs::create_dir_all(dir)?;
    let tmp = path.with_extension("tmp");
    Checkpoint::new(model.clone(), Some(serde_json::to_value(&report)?)).save(&tmp)?;
    std::fs::rename(&tmp, &path)?;
    Ok((model, data, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_are_disjoint_and_cover_the_pool() {
        let r = ToyRecipe::default();
        let d = toy_data(&r).unwrap();
        let a = &d.arith;
        assert_eq!(a.pretrain.len() + a.tune.len() + a.eval.len(), all_exprs(29).len());
        for s in a.tune.iter().chain(&a.eval) {
            assert!(!a.pretrain.contains(s));
        }
        for g in &d.paraphrases {
            assert!(a.pretrain.iter().any(|s| s.prompt == g.members[0].prompt));
        }
        assert_eq!(d, toy_data(&r).unwrap());
    }
}
