//! Enhance, erase, random-control and without-located interventions.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::data::TaskSample;
use crate::error::{Error, Result};
use crate::metrics::accuracy;
use crate::model::{train_masked, Model, TrainConfig, TrainReport};
use crate::neurons::{NeuronId, NeuronMask};
use crate::seeds;

/// Zeroes every parameter owned by the masked neurons.
pub fn erase(model: &Model, mask: &NeuronMask) -> Result<Model> {
    let mut m = model.clone();
    m.zero_neurons(mask)?;
    Ok(m)
}

/// Uniform sample of `cardinality` neurons, disjoint from `exclude`.
pub fn random_mask(
    cardinality: usize,
    dims: (usize, usize),
    seed: u64,
    exclude: Option<&NeuronMask>,
) -> Result<NeuronMask> {
    let (layers, width) = dims;
    let pool: Vec<usize> = match exclude {
        Some(ex) => {
            if ex.dims() != dims {
                return Err(Error::dim("random_mask", format!("exclude {:?} vs {dims:?}", ex.dims())));
            }
            (0..layers * width).filter(|&i| !ex.bits()[i]).collect()
        }
        None => (0..layers * width).collect(),
    };
    if cardinality > pool.len() {
        return Err(Error::Contract(format!(
            "cannot draw {cardinality} neurons from {} candidates",
            pool.len()
        )));
    }
    let mut rng = seeds::substream(seed, "random-mask");
    let mut picked: Vec<usize> = index::sample(&mut rng, pool.len(), cardinality)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    picked.sort_unstable();
    NeuronMask::from_ids(layers, width, picked.into_iter().map(|i| NeuronId::new(i / width, i % width)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum InterventionKind {
    Enhance,
    Erase,
    RandomEnhance,
    RandomErase,
    WoLocated,
}

impl InterventionKind {
    pub fn trains(self) -> bool {
        !matches!(self, InterventionKind::Erase | InterventionKind::RandomErase)
    }

    pub fn is_random(self) -> bool {
        matches!(self, InterventionKind::RandomEnhance | InterventionKind::RandomErase)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterventionSpec {
    pub kind: InterventionKind,
    /// Located mask, or for random kinds the reference whose cardinality is matched.
    pub mask: NeuronMask,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Random kinds draw outside the reference mask.
    #[serde(default = "default_true")]
    pub exclude_reference: bool,
}

fn default_batch() -> usize {
    16
}

fn default_true() -> bool {
    true
}

impl InterventionSpec {
    pub fn new(kind: InterventionKind, mask: NeuronMask, epochs: usize, lr: f64, seed: u64) -> Self {
        InterventionSpec {
            kind,
            mask,
            epochs,
            lr,
            seed,
            batch_size: default_batch(),
            exclude_reference: true,
        }
    }

    /// The mask the intervention actually acts on.
    pub fn resolve_mask(&self) -> Result<NeuronMask> {
        if self.kind.is_random() {
            let ex = self.exclude_reference.then_some(&self.mask);
            random_mask(self.mask.count(), self.mask.dims(), self.seed, ex)
        } else {
            Ok(self.mask.clone())
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            lr: self.lr,
            seed: self.seed,
            batch_size: self.batch_size,
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalDelta {
    pub name: String,
    pub before: f64,
    pub after: f64,
}

impl EvalDelta {
    pub fn delta(&self) -> f64 {
        self.after - self.before
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamDiff {
    pub changed: usize,
    /// L2 norm of the change per transformer block.
    pub layer_l2: Vec<f64>,
    /// L2 norm of the change outside the blocks.
    pub other_l2: f64,
}

pub fn param_diff(before: &Model, after: &Model) -> ParamDiff {
    let mut layer_sq = vec![0.0; before.config().n_layers];
    let mut other_sq = 0.0;
    let mut changed = 0;
    for ((name, a), b) in before.param_names().iter().zip(before.params()).zip(after.params()) {
        let layer = name
            .strip_prefix("blocks.")
            .and_then(|r| r.split('.').next())
            .and_then(|l| l.parse::<usize>().ok());
        for (x, y) in a.data().iter().zip(b.data()) {
            if x != y {
                changed += 1;
                let d = (y - x) * (y - x);
                match layer {
                    Some(l) => layer_sq[l] += d,
                    None => other_sq += d,
                }
            }
        }
    }
    ParamDiff {
        changed,
        layer_l2: layer_sq.into_iter().map(f64::sqrt).collect(),
        other_l2: other_sq.sqrt(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterventionResult {
    pub spec: InterventionSpec,
    pub applied_neurons: usize,
    pub evals: Vec<EvalDelta>,
    pub diff: ParamDiff,
    pub train: Option<TrainReport>,
}

/// Applies an intervention to a private copy of the model and evaluates before and after.
pub fn run_intervention_model(
    model: &Model,
    spec: &InterventionSpec,
    train: &[TaskSample],
    evals: &[(String, Vec<TaskSample>)],
) -> Result<(InterventionResult, Model)> {
    model.check_mask(&spec.mask)?;
    if spec.kind.trains() && train.is_empty() {
        return Err(Error::Contract("training interventions need a nonempty train set".into()));
    }
    let mask = spec.resolve_mask()?;
    let before: Vec<f64> = evals.iter().map(|(_, d)| accuracy(model, d)).collect::<Result<_>>()?;
    let mut edited = model.clone();
    let report = match spec.kind {
        InterventionKind::Erase | InterventionKind::RandomErase => {
            edited.zero_neurons(&mask)?;
            None
        }
        InterventionKind::Enhance | InterventionKind::RandomEnhance => {
            Some(train_masked(&mut edited, train, Some(&mask), false, &spec.train_config())?)
        }
        InterventionKind::WoLocated => Some(train_masked(&mut edited, train, Some(&mask), true, &spec.train_config())?),
    };
    let evals = evals
        .iter()
        .zip(before)
        .map(|((name, d), before)| {
            Ok(EvalDelta {
                name: name.clone(),
                before,
                after: accuracy(&edited, d)?,
            })
        })
        .collect::<Result<_>>()?;
    let result = InterventionResult {
        spec: spec.clone(),
        applied_neurons: mask.count(),
        evals,
        diff: param_diff(model, &edited),
        train: report,
    };
    Ok((result, edited))
}

pub fn run_intervention(
    model: &Model,
    spec: &InterventionSpec,
    train: &[TaskSample],
    evals: &[(String, Vec<TaskSample>)],
) -> Result<InterventionResult> {
    Ok(run_intervention_model(model, spec, train, evals)?.0)
}
