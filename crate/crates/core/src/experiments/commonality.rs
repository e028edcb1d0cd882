use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::toy::Family;
use crate::attribution::{
    attr_single, cnl_from_rows, curve_from_rows, mask_from_scores, sample_score_matrix, AttrOptions, CurvePoint,
    ScoreMap, Spread,
};
use crate::data::TaskSample;
use crate::error::{Error, Result};
use crate::interventions::{random_mask, run_intervention, InterventionKind, InterventionResult, InterventionSpec};
use crate::metrics::{accuracy, ipp, neuron_ratio, random_overlap, set_metrics, MetricReport};
use crate::model::{train_masked, Model, TrainConfig, TrainReport};
use crate::neurons::{NeuronId, NeuronMask};
use crate::seeds;

fn fraction_of_params(model: &Model, mask: &NeuronMask) -> f64 {
    let c = model.config();
    (mask.count() * (2 * c.d_model + 1)) as f64 / model.n_params() as f64
}

/// CNL scores and threshold mask over `data`.
pub fn locate_cnl(
    model: &Model,
    data: &[TaskSample],
    attr: &AttrOptions,
    sigma: f64,
    spread: Spread,
) -> Result<(ScoreMap, NeuronMask)> {
    let (rows, skipped) = sample_score_matrix(model, data, attr)?;
    let scores = cnl_from_rows(model, data, &rows, skipped, attr)?;
    let mask = mask_from_scores(&scores, sigma, spread)?;
    Ok((scores, mask))
}

/// Neurons most often among the per-sample top-`m` single-prompt
/// attributions, `cardinality` of them; ties go to larger mean `|score|`.
pub fn kn_dataset_mask(
    model: &Model,
    data: &[TaskSample],
    attr: &AttrOptions,
    m: usize,
    cardinality: usize,
) -> Result<NeuronMask> {
    let c = model.config();
    let total = c.n_layers * c.d_ff;
    if cardinality > total {
        return Err(Error::Contract(format!("cannot select {cardinality} of {total} neurons")));
    }
    let mut freq = vec![0usize; total];
    let mut mag = vec![0.0; total];
    for s in data {
        let map = attr_single(model, s, attr)?;
        for id in map.top_k(m) {
            freq[id.layer * c.d_ff + id.index] += 1;
        }
        mag.iter_mut().zip(&map.scores).for_each(|(a, v)| *a += v.abs());
    }
    let mut idx: Vec<usize> = (0..total).collect();
    idx.sort_by(|&a, &b| freq[b].cmp(&freq[a]).then(mag[b].total_cmp(&mag[a])).then(a.cmp(&b)));
    NeuronMask::from_ids(
        c.n_layers,
        c.d_ff,
        idx[..cardinality].iter().map(|&i| NeuronId::new(i / c.d_ff, i % c.d_ff)),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitHalfConfig {
    pub half: usize,
    pub attr: AttrOptions,
    pub sigma: f64,
    pub spread: Spread,
    pub curve_sizes: Vec<usize>,
    pub seed: u64,
}

impl Default for SplitHalfConfig {
    fn default() -> Self {
        SplitHalfConfig {
            half: 500,
            attr: AttrOptions::default(),
            sigma: 3.0,
            spread: Spread::Stddev,
            curve_sizes: vec![10, 50, 100, 500],
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitHalfResult {
    pub half: usize,
    pub selected: [usize; 2],
    pub neuron_ratio: [f64; 2],
    pub overlap: MetricReport,
    pub iou: MetricReport,
    /// Expected overlap of two uniform masks with the same cardinalities.
    pub random_overlap: f64,
    pub curve: Vec<CurvePoint>,
    pub scores: [ScoreMap; 2],
    pub masks: [NeuronMask; 2],
}

/// Commonality of CNL masks located on two disjoint halves of `data`.
pub fn run_split_half(model: &Model, data: &[TaskSample], cfg: &SplitHalfConfig) -> Result<SplitHalfResult> {
    if cfg.half == 0 || data.len() < 2 * cfg.half {
        return Err(Error::Contract(format!(
            "split-half needs two halves of {} from {} samples",
            cfg.half,
            data.len()
        )));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut seeds::substream(cfg.seed, "split-half"));
    let a: Vec<TaskSample> = order[..cfg.half].iter().map(|&i| data[i].clone()).collect();
    let b: Vec<TaskSample> = order[cfg.half..2 * cfg.half].iter().map(|&i| data[i].clone()).collect();
    let attr = AttrOptions {
        permissive: false,
        ..cfg.attr.clone()
    };
    let (rows_a, _) = sample_score_matrix(model, &a, &attr)?;
    let (rows_b, _) = sample_score_matrix(model, &b, &attr)?;
    let sa = cnl_from_rows(model, &a, &rows_a, 0, &attr)?;
    let sb = cnl_from_rows(model, &b, &rows_b, 0, &attr)?;
    let ma = mask_from_scores(&sa, cfg.sigma, cfg.spread)?;
    let mb = mask_from_scores(&sb, cfg.sigma, cfg.spread)?;
    let c = model.config();
    let curve = curve_from_rows(&rows_a, &cfg.curve_sizes, c.n_layers, c.d_ff, cfg.sigma, cfg.spread)?;
    let inputs = format!("{} | {}", sa.fingerprint(), sb.fingerprint());
    let m = set_metrics(&ma, &mb);
    Ok(SplitHalfResult {
        half: cfg.half,
        selected: [ma.count(), mb.count()],
        neuron_ratio: [neuron_ratio(&ma), neuron_ratio(&mb)],
        overlap: MetricReport::from_result("overlap", &inputs, "mean containment", m.map(|x| x.overlap)),
        iou: MetricReport::from_result("iou", &inputs, "intersection over union", set_metrics(&ma, &mb).map(|x| x.iou)),
        random_overlap: random_overlap(ma.count(), mb.count(), c.n_layers * c.d_ff),
        curve,
        scores: [sa, sb],
        masks: [ma, mb],
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantedConfig {
    /// Share of all neurons that is trained.
    pub fraction: f64,
    /// Share of the task used for training; the rest is located and evaluated on.
    pub train_frac: f64,
    pub train: TrainConfig,
    pub attr: AttrOptions,
    pub locate_samples: usize,
    pub seed: u64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        PlantedConfig {
            fraction: 0.01,
            train_frac: 0.75,
            train: TrainConfig {
                epochs: 10,
                lr: 1e-2,
                batch_size: 16,
                ..Default::default()
            },
            attr: AttrOptions::default(),
            locate_samples: 100,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedResult {
    pub planted: NeuronMask,
    pub located: NeuronMask,
    pub recovered: usize,
    pub recovered_fraction: f64,
    /// Expected recovered fraction of a uniform mask of the same size.
    pub chance: f64,
    pub accuracy_before: f64,
    pub accuracy_after: f64,
    pub train: TrainReport,
}

/// Teaches `task` by training only a random neuron set, then checks that CNL
/// on the task finds that set at matched cardinality.
pub fn run_planted(model: &Model, task: &[TaskSample], cfg: &PlantedConfig) -> Result<PlantedResult> {
    let c = model.config();
    let total = c.n_layers * c.d_ff;
    let k = (cfg.fraction * total as f64).round() as usize;
    if k == 0 {
        return Err(Error::Contract(format!("fraction {} plants no neurons", cfg.fraction)));
    }
    let n_train = (cfg.train_frac * task.len() as f64).round() as usize;
    let (train, held) = task.split_at(n_train);
    if train.is_empty() || held.is_empty() {
        return Err(Error::Contract("planted task needs both train and held-out samples".into()));
    }
    let planted = random_mask(k, (c.n_layers, c.d_ff), seeds::derive(cfg.seed, "planted"), None)?;
    let mut tuned = model.clone();
    let accuracy_before = accuracy(model, held)?;
    let train = train_masked(&mut tuned, train, Some(&planted), false, &cfg.train)?;
    let accuracy_after = accuracy(&tuned, held)?;
    let locate = &held[..cfg.locate_samples.min(held.len())];
    let (rows, skipped) = sample_score_matrix(&tuned, locate, &cfg.attr)?;
    let located = cnl_from_rows(&tuned, locate, &rows, skipped, &cfg.attr)?.top_mask(k);
    let recovered = planted.intersection_count(&located)?;
    Ok(PlantedResult {
        recovered,
        recovered_fraction: recovered as f64 / k as f64,
        chance: k as f64 / total as f64,
        planted,
        located,
        accuracy_before,
        accuracy_after,
        train,
    })
}

/// Toy pretraining peak rate scaled by the usual 1/30 fine-tune ratio.
pub const TOY_FINETUNE_LR: f64 = 1e-3 / 30.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CapabilityConfig {
    pub attr: AttrOptions,
    pub sigma: f64,
    pub spread: Spread,
    pub locate_samples: usize,
    pub n_random: usize,
    pub epochs: Vec<usize>,
    pub lr: f64,
    pub batch_size: usize,
    /// Per-sample top-m used to build the KN comparison mask.
    pub kn_m: usize,
    pub include_kn: bool,
    pub include_wo_located: bool,
    pub seed: u64,
}

impl Default for CapabilityConfig {
    fn default() -> Self {
        CapabilityConfig {
            attr: AttrOptions::default(),
            sigma: 3.0,
            spread: Spread::Stddev,
            locate_samples: 500,
            n_random: 5,
            epochs: vec![1, 5, 10],
            lr: TOY_FINETUNE_LR,
            batch_size: 16,
            kn_m: 20,
            include_kn: true,
            include_wo_located: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErasureSummary {
    pub located_drop: f64,
    pub random_drops: Vec<f64>,
    pub mean_random_drop: f64,
    pub located: InterventionResult,
    pub random: Vec<InterventionResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnhanceRow {
    pub epochs: usize,
    pub baseline: f64,
    pub located: f64,
    pub random: Vec<f64>,
    pub kn: Option<f64>,
    pub wo_located: Option<f64>,
    pub ipp_cnl: f64,
    pub ipp_kn: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CapabilityResult {
    pub scores: ScoreMap,
    pub located: NeuronMask,
    pub kn: Option<NeuronMask>,
    /// Parameters owned by the located neurons over all model parameters.
    pub param_fraction: f64,
    /// Random reference masks, one per seed, shared by every arm.
    pub random_masks: Vec<NeuronMask>,
    pub erase: ErasureSummary,
    pub enhance: Vec<EnhanceRow>,
}

fn eval_after(r: &InterventionResult) -> f64 {
    r.evals[0].after
}

/// Erasure and enhancement of CNL-located neurons against matched random
/// neurons. Locates and erases on `family.pretrain`, fine-tunes on
/// `family.tune` and evaluates enhancement on `family.eval`.
pub fn run_capability(model: &Model, family: &Family, cfg: &CapabilityConfig) -> Result<CapabilityResult> {
    if cfg.n_random == 0 {
        return Err(Error::Contract("capability runs need at least one random arm".into()));
    }
    let locate = &family.pretrain[..cfg.locate_samples.min(family.pretrain.len())];
    let (scores, located) = locate_cnl(model, locate, &cfg.attr, cfg.sigma, cfg.spread)?;
    let c = model.config();
    let dims = (c.n_layers, c.d_ff);
    let random_masks: Vec<NeuronMask> = (0..cfg.n_random)
        .map(|i| random_mask(located.count(), dims, seeds::derive(cfg.seed, &format!("random-arm-{i}")), Some(&located)))
        .collect::<Result<_>>()?;
    let kn = if cfg.include_kn {
        Some(kn_dataset_mask(model, locate, &cfg.attr, cfg.kn_m, located.count())?)
    } else {
        None
    };

    let erase_evals = vec![("locate".to_string(), locate.to_vec())];
    let spec = |kind, mask: &NeuronMask, epochs| InterventionSpec {
        batch_size: cfg.batch_size,
        ..InterventionSpec::new(kind, mask.clone(), epochs, cfg.lr, cfg.seed)
    };
    let located_erase = run_intervention(model, &spec(InterventionKind::Erase, &located, 0), &[], &erase_evals)?;
    let random_erase: Vec<InterventionResult> = random_masks
        .iter()
        .map(|m| run_intervention(model, &spec(InterventionKind::Erase, m, 0), &[], &erase_evals))
        .collect::<Result<_>>()?;
    let drop = |r: &InterventionResult| r.evals[0].before - r.evals[0].after;
    let random_drops: Vec<f64> = random_erase.iter().map(drop).collect();
    let erase = ErasureSummary {
        located_drop: drop(&located_erase),
        mean_random_drop: random_drops.iter().sum::<f64>() / random_drops.len() as f64,
        random_drops,
        located: located_erase,
        random: random_erase,
    };

    let evals = vec![("eval".to_string(), family.eval.clone())];
    let baseline = accuracy(model, &family.eval)?;
    let mut enhance = Vec::with_capacity(cfg.epochs.len());
    for &epochs in &cfg.epochs {
        let run = |kind, mask: &NeuronMask| -> Result<f64> {
            Ok(eval_after(&run_intervention(model, &spec(kind, mask, epochs), &family.tune, &evals)?))
        };
        let located_acc = run(InterventionKind::Enhance, &located)?;
        let random: Vec<f64> = random_masks
            .iter()
            .map(|m| run(InterventionKind::Enhance, m))
            .collect::<Result<_>>()?;
        let kn_acc = kn.as_ref().map(|m| run(InterventionKind::Enhance, m)).transpose()?;
        let wo = if cfg.include_wo_located {
            Some(run(InterventionKind::WoLocated, &located)?)
        } else {
            None
        };
        enhance.push(EnhanceRow {
            epochs,
            baseline,
            located: located_acc,
            ipp_cnl: ipp(located_acc, &random)?,
            ipp_kn: kn_acc.map(|k| ipp(k, &random)).transpose()?,
            random,
            kn: kn_acc,
            wo_located: wo,
        });
    }
    Ok(CapabilityResult {
        param_fraction: fraction_of_params(model, &located),
        scores,
        located,
        kn,
        random_masks,
        erase,
        enhance,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CrossConfig {
    pub families: Vec<String>,
    pub attr: AttrOptions,
    pub sigma: f64,
    pub spread: Spread,
    pub locate_samples: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for CrossConfig {
    fn default() -> Self {
        CrossConfig {
            families: vec!["arith".into(), "code".into(), "sentiment".into()],
            attr: AttrOptions::default(),
            sigma: 3.0,
            spread: Spread::Stddev,
            locate_samples: 200,
            epochs: 1,
            lr: TOY_FINETUNE_LR,
            batch_size: 16,
            seed: 0,
        }
    }
}

/// Square matrix of optional cells, rows = intervened family, columns = evaluated family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub labels: Vec<String>,
    pub values: Vec<Vec<Option<f64>>>,
    /// Why a cell is empty, keyed by `row/col`.
    pub reasons: BTreeMap<String, String>,
}

impl Matrix {
    fn build(labels: &[String], mut cell: impl FnMut(usize, usize) -> Result<f64>) -> Self {
        let mut reasons = BTreeMap::new();
        let values = (0..labels.len())
            .map(|r| {
                (0..labels.len())
                    .map(|c| match cell(r, c) {
                        Ok(v) => Some(v),
                        Err(e) => {
                            reasons.insert(format!("{}/{}", labels[r], labels[c]), e.to_string());
                            None
                        }
                    })
                    .collect()
            })
            .collect();
        Matrix {
            labels: labels.to_vec(),
            values,
            reasons,
        }
    }

    pub fn get(&self, row: &str, col: &str) -> Option<f64> {
        let r = self.labels.iter().position(|l| l == row)?;
        let c = self.labels.iter().position(|l| l == col)?;
        self.values[r][c]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossResult {
    pub masks: Vec<NeuronMask>,
    /// Accuracy change on each evaluated family after enhancing a family's neurons.
    pub enhance: Matrix,
    /// Accuracy change on each evaluated family after erasing a family's neurons.
    pub erase: Matrix,
    pub overlap: Matrix,
}

/// Enhance and erase each family's located neurons and evaluate every family.
pub fn run_cross_dataset(model: &Model, families: &[(String, &Family)], cfg: &CrossConfig) -> Result<CrossResult> {
    if families.len() < 2 {
        return Err(Error::Contract("cross-dataset runs need at least two families".into()));
    }
    let labels: Vec<String> = families.iter().map(|(n, _)| n.clone()).collect();
    let masks: Vec<NeuronMask> = families
        .iter()
        .map(|(_, f)| {
            let locate = &f.pretrain[..cfg.locate_samples.min(f.pretrain.len())];
            Ok(locate_cnl(model, locate, &cfg.attr, cfg.sigma, cfg.spread)?.1)
        })
        .collect::<Result<_>>()?;
    let evals: Vec<(String, Vec<TaskSample>)> = families.iter().map(|(n, f)| (n.clone(), f.eval.clone())).collect();
    let arm = |kind: InterventionKind, r: usize| -> Result<InterventionResult> {
        let spec = InterventionSpec {
            batch_size: cfg.batch_size,
            ..InterventionSpec::new(kind, masks[r].clone(), cfg.epochs, cfg.lr, cfg.seed)
        };
        run_intervention(model, &spec, &families[r].1.tune, &evals)
    };
    let deltas = |kind| -> Vec<Result<Vec<f64>>> {
        (0..families.len())
            .map(|r| Ok(arm(kind, r)?.evals.iter().map(|e| e.delta()).collect()))
            .collect()
    };
    let from_rows = |rows: Vec<Result<Vec<f64>>>| {
        Matrix::build(&labels, |r, c| match &rows[r] {
            Ok(v) => Ok(v[c]),
            Err(e) => Err(Error::Contract(e.to_string())),
        })
    };
    let enhance = from_rows(deltas(InterventionKind::Enhance));
    let erase = from_rows(deltas(InterventionKind::Erase));
    let overlap = Matrix::build(&labels, |r, c| Ok(set_metrics(&masks[r], &masks[c])?.overlap));
    Ok(CrossResult {
        masks,
        enhance,
        erase,
        overlap,
    })
}
