use serde::{Deserialize, Serialize};

use crate::attribution::{attr_single, AttrOptions};
use crate::baselines::{calibrate_tau, circuit_extract, circuit_recall, kn_intervene, KnMode};
use crate::data::TaskSample;
use crate::error::{Error, Result};
use crate::interventions::random_mask;
use crate::metrics::accuracy;
use crate::model::{train_masked, Model, TrainConfig};
use crate::neurons::NeuronMask;
use crate::seeds;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReliabilityConfig {
    pub samples: usize,
    pub attr: AttrOptions,
    pub kn_m: usize,
    pub n_random: usize,
    pub edit_samples: usize,
    pub edit: TrainConfig,
    /// Fixed edge threshold; calibrated towards `circuit_target_fraction` when absent.
    pub circuit_tau: Option<f64>,
    pub circuit_target_fraction: f64,
    pub calibration_samples: usize,
    pub calibration_iters: usize,
    pub circuit_samples: usize,
    pub seed: u64,
}

impl Default for ReliabilityConfig {
    fn default() -> Self {
        ReliabilityConfig {
            samples: 100,
            attr: AttrOptions::default(),
            kn_m: 20,
            n_random: 20,
            edit_samples: 10,
            edit: TrainConfig {
                epochs: 20,
                lr: 1e-3,
                batch_size: 1,
                ..Default::default()
            },
            circuit_tau: None,
            circuit_target_fraction: 0.026,
            calibration_samples: 3,
            calibration_iters: 6,
            circuit_samples: 100,
            seed: 0,
        }
    }
}

/// Share of runs whose target probability rose, fell or stayed put.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RiseFall {
    pub rise: f64,
    pub fall: f64,
    pub unchanged: f64,
    pub runs: usize,
}

impl RiseFall {
    fn from_deltas(d: &[f64]) -> Self {
        let n = d.len().max(1) as f64;
        RiseFall {
            rise: d.iter().filter(|&&x| x > 0.0).count() as f64 / n,
            fall: d.iter().filter(|&&x| x < 0.0).count() as f64 / n,
            unchanged: d.iter().filter(|&&x| x == 0.0).count() as f64 / n,
            runs: d.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnArm {
    pub amplify_located: RiseFall,
    pub amplify_random: RiseFall,
    pub suppress_located: RiseFall,
    pub suppress_random: RiseFall,
    pub mean_located_size: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerArm {
    /// Edit success rate per layer when only that layer's neurons are trained.
    pub success: Vec<f64>,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CircuitArm {
    pub tau: f64,
    pub success_rate: f64,
    pub mean_param_fraction: f64,
    pub ranks: Vec<Option<usize>>,
}

/// A sub-report that either ran or failed on its own.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Outcome<T> {
    pub value: Option<T>,
    pub error: Option<String>,
}

impl<T> From<Result<T>> for Outcome<T> {
    fn from(r: Result<T>) -> Self {
        match r {
            Ok(v) => Outcome {
                value: Some(v),
                error: None,
            },
            Err(e) => Outcome {
                value: None,
                error: Some(e.to_string()),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityResult {
    pub kn: Outcome<KnArm>,
    pub layers: Outcome<LayerArm>,
    pub circuit: Outcome<CircuitArm>,
}

pub fn kn_arm(model: &Model, data: &[TaskSample], cfg: &ReliabilityConfig) -> Result<KnArm> {
    if data.is_empty() {
        return Err(Error::Contract("KN arm needs samples".into()));
    }
    let c = model.config();
    let (mut al, mut ar, mut sl, mut sr) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut sizes = 0usize;
    for (i, s) in data.iter().enumerate() {
        let located = attr_single(model, s, &cfg.attr)?.top_mask(cfg.kn_m);
        sizes += located.count();
        al.push(kn_intervene(model, s, &located, KnMode::Amplify)?.delta);
        sl.push(kn_intervene(model, s, &located, KnMode::Suppress)?.delta);
        for r in 0..cfg.n_random {
            let seed = seeds::derive(cfg.seed, &format!("kn-random-{i}-{r}"));
            let m = random_mask(located.count(), (c.n_layers, c.d_ff), seed, Some(&located))?;
            ar.push(kn_intervene(model, s, &m, KnMode::Amplify)?.delta);
            sr.push(kn_intervene(model, s, &m, KnMode::Suppress)?.delta);
        }
    }
    Ok(KnArm {
        amplify_located: RiseFall::from_deltas(&al),
        amplify_random: RiseFall::from_deltas(&ar),
        suppress_located: RiseFall::from_deltas(&sl),
        suppress_random: RiseFall::from_deltas(&sr),
        mean_located_size: sizes as f64 / data.len() as f64,
    })
}

/// Each sample re-targeted to the next sample's answer that differs from its own.
pub fn flipped(data: &[TaskSample]) -> Vec<TaskSample> {
    let n = data.len();
    (0..n)
        .filter_map(|i| {
            let other = (1..n).map(|k| &data[(i + k) % n]).find(|o| o.answer != data[i].answer)?;
            Some(TaskSample {
                answer: other.answer.clone(),
                ..data[i].clone()
            })
        })
        .collect()
}

pub fn layer_arm(model: &Model, data: &[TaskSample], cfg: &ReliabilityConfig) -> Result<LayerArm> {
    let edits = flipped(&data[..cfg.edit_samples.min(data.len())]);
    if edits.is_empty() {
        return Err(Error::Contract("no sample can be re-targeted".into()));
    }
    let c = model.config();
    let mut success = Vec::with_capacity(c.n_layers);
    for l in 0..c.n_layers {
        let mask = NeuronMask::from_layers(c.n_layers, c.d_ff, &[l])?;
        let mut hits = 0.0;
        for e in &edits {
            let mut m = model.clone();
            train_masked(&mut m, std::slice::from_ref(e), Some(&mask), false, &cfg.edit)?;
            hits += accuracy(&m, std::slice::from_ref(e))?;
        }
        success.push(hits / edits.len() as f64);
    }
    Ok(LayerArm {
        success,
        samples: edits.len(),
    })
}

pub fn circuit_arm(model: &Model, data: &[TaskSample], cfg: &ReliabilityConfig) -> Result<CircuitArm> {
    let data = &data[..cfg.circuit_samples.min(data.len())];
    if data.is_empty() {
        return Err(Error::Contract("circuit arm needs samples".into()));
    }
    let tau = match cfg.circuit_tau {
        Some(t) => t,
        None => calibrate_tau(
            model,
            &data[..cfg.calibration_samples.clamp(1, data.len())],
            cfg.circuit_target_fraction,
            cfg.calibration_iters,
        )?,
    };
    let mut ranks = Vec::with_capacity(data.len());
    let mut frac = 0.0;
    for s in data {
        let circuit = circuit_extract(model, s, tau)?;
        frac += circuit.param_fraction;
        ranks.push(circuit_recall(model, &circuit, s)?);
    }
    let n = data.len() as f64;
    Ok(CircuitArm {
        tau,
        success_rate: ranks.iter().filter(|r| **r == Some(1)).count() as f64 / n,
        mean_param_fraction: frac / n,
        ranks,
    })
}

/// KN amplify/suppress against random masks, per-layer edits and circuit recall.
pub fn run_reliability(model: &Model, data: &[TaskSample], cfg: &ReliabilityConfig) -> ReliabilityResult {
    let data = &data[..cfg.samples.min(data.len())];
    ReliabilityResult {
        kn: kn_arm(model, data, cfg).into(),
        layers: layer_arm(model, data, cfg).into(),
        circuit: circuit_arm(model, data, cfg).into(),
    }
}
