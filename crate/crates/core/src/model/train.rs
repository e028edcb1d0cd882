use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Model, SeqBatch};
use crate::data::TaskSample;
use crate::error::{Error, Result};
use crate::neurons::NeuronMask;
use crate::seeds;
use crate::tensor::Tape;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub batch_size: usize,
    /// Global gradient-norm clip over the updated elements.
    pub clip_norm: Option<f64>,
    pub warmup_steps: usize,
    /// Cosine decay from `lr` to `lr / 10` over the run.
    pub cosine_decay: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1,
            lr: 1e-5,
            seed: 0,
            batch_size: 16,
            clip_norm: None,
            warmup_steps: 0,
            cosine_decay: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    /// Mean batch loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Answer-token cross-entropy over the whole dataset before and after training.
    pub loss_before: f64,
    pub loss_after: f64,
    pub trainable_elements: usize,
}

#[derive(Clone, Debug)]
enum Trainable {
    All,
    Frozen,
    Partial(Vec<bool>),
}

impl Trainable {
    fn count(&self, n: usize) -> usize {
        match self {
            Trainable::All => n,
            Trainable::Frozen => 0,
            Trainable::Partial(b) => b.iter().filter(|x| **x).count(),
        }
    }

    fn on(&self, i: usize) -> bool {
        match self {
            Trainable::All => true,
            Trainable::Frozen => false,
            Trainable::Partial(b) => b[i],
        }
    }
}

fn trainable_map(model: &mut Model, mask: Option<&NeuronMask>, complement: bool) -> Result<Vec<Trainable>> {
    let Some(mask) = mask else {
        return Ok(vec![Trainable::All; model.params().len()]);
    };
    model.check_mask(mask)?;
    if complement {
        model.zero_neurons(mask)?;
    }
    Ok(model
        .ownership(mask)?
        .into_iter()
        .map(|own| match (own, complement) {
            (None, false) => Trainable::Frozen,
            (None, true) => Trainable::All,
            (Some(b), false) => Trainable::Partial(b),
            (Some(b), true) => Trainable::Partial(b.into_iter().map(|x| !x).collect()),
        })
        .collect())
}

/// Packs samples as `prompt ⊕ answer[..Y-1]` with targets on the answer positions.
fn pack(samples: &[&TaskSample]) -> (SeqBatch, Vec<(usize, usize)>) {
    let mut seqs = Vec::with_capacity(samples.len());
    let mut targets = Vec::new();
    let mut offset = 0;
    for s in samples {
        let full = s.full();
        let input = full[..full.len() - 1].to_vec();
        for (m, &y) in s.answer.iter().enumerate() {
            targets.push((offset + s.prompt.len() - 1 + m, y));
        }
        offset += input.len();
        seqs.push(input);
    }
    (SeqBatch::new(&seqs), targets)
}

fn check_dataset(model: &Model, data: &[TaskSample]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Contract("training dataset is empty".into()));
    }
    for s in data {
        s.validate()?;
        if s.len() - 1 > model.config().max_seq_len {
            return Err(Error::Range(format!(
                "sample of {} tokens exceeds max_seq_len {}",
                s.len(),
                model.config().max_seq_len
            )));
        }
    }
    Ok(())
}

/// Mean answer-token cross-entropy over the dataset.
pub fn answer_loss(model: &Model, data: &[TaskSample]) -> Result<f64> {
    check_dataset(model, data)?;
    let (mut total, mut count) = (0.0, 0usize);
    for chunk in data.chunks(64) {
        let refs: Vec<&TaskSample> = chunk.iter().collect();
        let (batch, targets) = pack(&refs);
        let mut tape = Tape::new();
        let params = model.bind(&mut tape, false);
        let vars = model.forward_tape(&mut tape, &params, &batch, &Default::default())?;
        let ce = tape.cross_entropy(vars.logits, &targets)?;
        total += tape.value(ce)[0] * targets.len() as f64;
        count += targets.len();
    }
    Ok(total / count as f64)
}

/// [`answer_loss`] and its gradient with respect to every parameter.
pub fn answer_loss_grad(model: &Model, data: &[TaskSample]) -> Result<(f64, Vec<Vec<f64>>)> {
    check_dataset(model, data)?;
    let mut grads: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.numel()]).collect();
    let (mut total, mut count) = (0.0, 0usize);
    let n_targets: usize = data.iter().map(|s| s.answer.len()).sum();
    for chunk in data.chunks(64) {
        let refs: Vec<&TaskSample> = chunk.iter().collect();
        let (batch, targets) = pack(&refs);
        let w = targets.len() as f64 / n_targets as f64;
        let mut tape = Tape::new();
        let params = model.bind(&mut tape, true);
        let vars = model.forward_tape(&mut tape, &params, &batch, &Default::default())?;
        let ce = tape.cross_entropy(vars.logits, &targets)?;
        total += tape.value(ce)[0] * targets.len() as f64;
        count += targets.len();
        tape.backward(ce)?;
        for (acc, &p) in grads.iter_mut().zip(&params) {
            if let Some(g) = tape.take_grad(p) {
                acc.iter_mut().zip(g).for_each(|(a, x)| *a += w * x);
            }
        }
    }
    Ok((total / count as f64, grads))
}

/// Adam on answer-token cross-entropy, restricted by an optional neuron mask.
///
/// With `complement = false` only parameters owned by masked neurons move.
/// With `complement = true` the masked neurons' parameters are zeroed first
/// and everything else trains.
pub fn train_masked(
    model: &mut Model,
    data: &[TaskSample],
    mask: Option<&NeuronMask>,
    complement: bool,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    check_dataset(model, data)?;
    if !(cfg.lr > 0.0) || !cfg.lr.is_finite() {
        return Err(Error::Contract(format!("learning rate must be positive, got {}", cfg.lr)));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Contract("batch size must be positive".into()));
    }
    let trainable = trainable_map(model, mask, complement)?;
    let trainable_elements: usize = trainable
        .iter()
        .zip(model.params())
        .map(|(t, p)| t.count(p.numel()))
        .sum();
    let loss_before = answer_loss(model, data)?;
    let mut report = TrainReport {
        steps: 0,
        epoch_losses: Vec::with_capacity(cfg.epochs),
        loss_before,
        loss_after: loss_before,
        trainable_elements,
    };
    if trainable_elements == 0 || cfg.epochs == 0 {
        return Ok(report);
    }

    let mut m1: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.numel()]).collect();
    let mut m2 = m1.clone();
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut rng = seeds::substream(cfg.seed, "train-order");
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0usize;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let refs: Vec<&TaskSample> = chunk.iter().map(|&i| &data[i]).collect();
            let (batch, targets) = pack(&refs);
            let grads = {
                let mut tape = Tape::new();
                let params: Vec<_> = model
                    .params()
                    .iter()
                    .zip(&trainable)
                    .map(|(p, t)| tape.leaf_ref(p.shape(), p.data(), !matches!(t, Trainable::Frozen)))
                    .collect::<Result<_>>()?;
                let vars = model.forward_tape(&mut tape, &params, &batch, &Default::default())?;
                let loss = tape.cross_entropy(vars.logits, &targets)?;
                epoch_loss += tape.value(loss)[0];
                tape.backward(loss)?;
                params.iter().map(|&p| tape.take_grad(p)).collect::<Vec<_>>()
            };

            let mut scale = 1.0;
            if let Some(clip) = cfg.clip_norm {
                let sq: f64 = grads
                    .iter()
                    .zip(&trainable)
                    .filter_map(|(g, t)| g.as_ref().map(|g| (g, t)))
                    .map(|(g, t)| g.iter().enumerate().filter(|(i, _)| t.on(*i)).map(|(_, x)| x * x).sum::<f64>())
                    .sum();
                let norm = sq.sqrt();
                if norm > clip {
                    scale = clip / norm;
                }
            }

            step += 1;
            let lr = schedule(cfg, step, total_steps);
            let bc1 = 1.0 - BETA1.powi(step as i32);
            let bc2 = 1.0 - BETA2.powi(step as i32);
            for (pi, g) in grads.iter().enumerate() {
                let Some(g) = g else { continue };
                let t = &trainable[pi];
                let data = model.params_mut()[pi].data_mut();
                let (m, v) = (&mut m1[pi], &mut m2[pi]);
                for i in 0..data.len() {
                    if !t.on(i) {
                        continue;
                    }
                    let gi = g[i] * scale;
                    m[i] = BETA1 * m[i] + (1.0 - BETA1) * gi;
                    v[i] = BETA2 * v[i] + (1.0 - BETA2) * gi * gi;
                    let mh = m[i] / bc1;
                    let vh = v[i] / bc2;
                    data[i] -= lr * mh / (vh.sqrt() + ADAM_EPS);
                }
            }
        }
        report.epoch_losses.push(epoch_loss / steps_per_epoch as f64);
    }
    report.steps = step;
    report.loss_after = answer_loss(model, data)?;
    Ok(report)
}

fn schedule(cfg: &TrainConfig, step: usize, total: usize) -> f64 {
    let mut lr = cfg.lr;
    if step <= cfg.warmup_steps {
        return lr * step as f64 / cfg.warmup_steps as f64;
    }
    if cfg.cosine_decay {
        let span = (total - cfg.warmup_steps).max(1) as f64;
        let t = (step - cfg.warmup_steps) as f64 / span;
        lr *= 0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
    }
    lr
}
