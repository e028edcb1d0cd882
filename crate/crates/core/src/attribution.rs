//! Integrated-gradients neuron attribution: single prompt, decoupled pairs,
//! dataset-level commonality scores, threshold masks and convergence curves.

use serde::{Deserialize, Serialize};

use crate::artifact;
use crate::data::{fingerprint, ComparativePair, TaskSample};
use crate::error::{Error, Result};
use crate::metrics::set_metrics;
use crate::model::{Model, PrefixCache};
use crate::neurons::{NeuronId, NeuronMask};
use crate::seeds;

/// Which integration points enter the Riemann sum; both weight each term by `1/S`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quadrature {
    /// `α = n/S` for `n = 1..=S`.
    Right,
    /// `α = n/S` for `n = 0..=S`.
    Closed,
}

impl Quadrature {
    fn alphas(self, steps: usize) -> Vec<f64> {
        let first = match self {
            Quadrature::Right => 1,
            Quadrature::Closed => 0,
        };
        (first..=steps).map(|n| n as f64 / steps as f64).collect()
    }
}

/// How the rest of a layer is treated while one neuron moves along its path.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ClampSchedule {
    /// Every neuron of the layer sits at `α·ω̄` together; one backward pass per `α`.
    #[default]
    LayerShared,
    /// Only the attributed neuron moves; the others keep `ω̄`.
    PerNeuron,
}

/// Dispersion statistic for the threshold mask.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Spread {
    #[default]
    Variance,
    Stddev,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttrOptions {
    pub steps: usize,
    pub schedule: ClampSchedule,
    /// Skip over-long samples instead of failing.
    pub permissive: bool,
}

impl Default for AttrOptions {
    fn default() -> Self {
        AttrOptions {
            steps: 19,
            schedule: ClampSchedule::LayerShared,
            permissive: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreMeta {
    pub method: String,
    pub steps: usize,
    pub quadrature: Quadrature,
    pub schedule: ClampSchedule,
    /// Token position the neurons are read and clamped at.
    pub position: String,
    pub samples: usize,
    pub skipped: usize,
    pub dataset: String,
    pub model: String,
}

/// Dense `layers × width` attribution scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreMap {
    pub layers: usize,
    pub width: usize,
    pub scores: Vec<f64>,
    pub meta: ScoreMeta,
}

impl ScoreMap {
    pub fn get(&self, id: NeuronId) -> f64 {
        self.scores[id.layer * self.width + id.index]
    }

    /// Neurons ordered by descending `|score|`, lower flat index first on ties.
    pub fn ranked(&self) -> Vec<NeuronId> {
        let mut idx: Vec<usize> = (0..self.scores.len()).collect();
        idx.sort_by(|&a, &b| {
            self.scores[b]
                .abs()
                .total_cmp(&self.scores[a].abs())
                .then(a.cmp(&b))
        });
        idx.into_iter().map(|i| NeuronId::new(i / self.width, i % self.width)).collect()
    }

    pub fn top_k(&self, k: usize) -> Vec<NeuronId> {
        let mut r = self.ranked();
        r.truncate(k);
        r
    }

    /// The `m` highest-`|score|` neurons as a mask.
    pub fn top_mask(&self, m: usize) -> NeuronMask {
        let mut mask =
            NeuronMask::from_ids(self.layers, self.width, self.top_k(m)).expect("ranked ids are in range");
        mask.source = Some(self.fingerprint());
        mask
    }

    /// SHA-256 of the score bytes and dimensions.
    pub fn fingerprint(&self) -> String {
        let mut bytes = Vec::with_capacity(16 + 8 * self.scores.len());
        bytes.extend_from_slice(&(self.layers as u64).to_le_bytes());
        bytes.extend_from_slice(&(self.width as u64).to_le_bytes());
        for s in &self.scores {
            bytes.extend_from_slice(&s.to_le_bytes());
        }
        artifact::sha256_hex(&bytes)
    }
}

/// Attribution of every neuron for one context and target token.
pub fn context_attribution(
    model: &Model,
    cache: &PrefixCache,
    target: usize,
    steps: usize,
    quad: Quadrature,
    schedule: ClampSchedule,
) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(Error::Contract("integration needs at least one step".into()));
    }
    let cfg = model.config();
    let nj = cfg.d_ff;
    let alphas = quad.alphas(steps);
    let b = alphas.len();
    let mut out = vec![0.0; cfg.n_layers * nj];
    for l in 0..cfg.n_layers {
        let w = cache.omega(l);
        match schedule {
            ClampSchedule::LayerShared => {
                let rows: Vec<f64> = alphas.iter().flat_map(|&a| w.iter().map(move |x| a * x)).collect();
                let sweep = model.clamp_sweep(cache, l, &rows, target)?;
                for j in 0..nj {
                    let g: f64 = (0..b).map(|n| sweep.grads[n * nj + j]).sum();
                    out[l * nj + j] = w[j] * g / steps as f64;
                }
            }
            ClampSchedule::PerNeuron => {
                let per_sweep = (512 / b).max(1);
                let neurons: Vec<usize> = (0..nj).collect();
                for chunk in neurons.chunks(per_sweep) {
                    let mut rows = Vec::with_capacity(chunk.len() * b * nj);
                    for &j in chunk {
                        for &a in &alphas {
                            let mut r = w.to_vec();
                            r[j] = a * w[j];
                            rows.extend_from_slice(&r);
                        }
                    }
                    let sweep = model.clamp_sweep(cache, l, &rows, target)?;
                    for (k, &j) in chunk.iter().enumerate() {
                        let g: f64 = (0..b).map(|n| sweep.grads[(k * b + n) * nj + j]).sum();
                        out[l * nj + j] = w[j] * g / steps as f64;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Per-neuron path attribution of one neuron, the others held at `ω̄`.
pub fn neuron_attribution(
    model: &Model,
    cache: &PrefixCache,
    target: usize,
    id: NeuronId,
    steps: usize,
    quad: Quadrature,
) -> Result<f64> {
    model.check_neuron(id)?;
    if steps == 0 {
        return Err(Error::Contract("integration needs at least one step".into()));
    }
    let w = cache.omega(id.layer);
    let alphas = quad.alphas(steps);
    let rows: Vec<f64> = alphas
        .iter()
        .flat_map(|&a| {
            let mut r = w.to_vec();
            r[id.index] = a * w[id.index];
            r
        })
        .collect();
    let sweep = model.clamp_sweep(cache, id.layer, &rows, target)?;
    let nj = model.config().d_ff;
    let g: f64 = (0..alphas.len()).map(|n| sweep.grads[n * nj + id.index]).sum();
    Ok(w[id.index] * g / steps as f64)
}

/// Probability of `target` with one neuron clamped to `α·ω̄`.
pub fn clamped_prob(model: &Model, cache: &PrefixCache, target: usize, id: NeuronId, alpha: f64) -> Result<f64> {
    model.check_neuron(id)?;
    let mut row = cache.omega(id.layer).to_vec();
    row[id.index] *= alpha;
    Ok(model.clamp_sweep(cache, id.layer, &row, target)?.probs[0])
}

fn meta(model: &Model, method: &str, data: &[TaskSample], opts: &AttrOptions, quad: Quadrature) -> ScoreMeta {
    ScoreMeta {
        method: method.to_string(),
        steps: opts.steps,
        quadrature: quad,
        schedule: opts.schedule,
        position: "last".into(),
        samples: data.len(),
        skipped: 0,
        dataset: fingerprint(data),
        model: model.checksum(),
    }
}

fn fits(model: &Model, s: &TaskSample) -> bool {
    s.len() - 1 <= model.config().max_seq_len
}

/// Single-prompt attribution for the first answer token, `α = n/S` for `n = 1..=S`.
pub fn attr_single(model: &Model, sample: &TaskSample, opts: &AttrOptions) -> Result<ScoreMap> {
    sample.validate()?;
    let cache = model.prefix_cache(&sample.prompt)?;
    let scores = context_attribution(model, &cache, sample.answer[0], opts.steps, Quadrature::Right, opts.schedule)?;
    let cfg = model.config();
    Ok(ScoreMap {
        layers: cfg.n_layers,
        width: cfg.d_ff,
        scores,
        meta: meta(model, "single", std::slice::from_ref(sample), opts, Quadrature::Right),
    })
}

/// One sample's commonality contribution: the mean over answer tokens of the
/// closed-quadrature attribution at each context `x ⊕ y_{<m}`.
pub fn sample_scores(model: &Model, sample: &TaskSample, opts: &AttrOptions) -> Result<Vec<f64>> {
    sample.validate()?;
    if !fits(model, sample) {
        return Err(Error::Range(format!(
            "sample of {} tokens exceeds max_seq_len {}",
            sample.len(),
            model.config().max_seq_len
        )));
    }
    let cfg = model.config();
    let mut acc = vec![0.0; cfg.n_layers * cfg.d_ff];
    for m in 0..sample.answer.len() {
        let (z, y) = sample.context(m);
        let cache = model.prefix_cache(&z)?;
        let s = context_attribution(model, &cache, y, opts.steps, Quadrature::Closed, opts.schedule)?;
        acc.iter_mut().zip(&s).for_each(|(a, v)| *a += v);
    }
    let y = sample.answer.len() as f64;
    acc.iter_mut().for_each(|a| *a /= y);
    Ok(acc)
}

/// Per-sample contributions for a dataset, plus the number of skipped samples.
pub fn sample_score_matrix(model: &Model, data: &[TaskSample], opts: &AttrOptions) -> Result<(Vec<Vec<f64>>, usize)> {
    let mut rows = Vec::with_capacity(data.len());
    let mut skipped = 0;
    for s in data {
        if opts.permissive && !fits(model, s) {
            skipped += 1;
            continue;
        }
        rows.push(sample_scores(model, s, opts)?);
    }
    Ok((rows, skipped))
}

/// Elementwise mean of per-sample rows, summed in row order.
pub fn mean_rows(rows: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = rows.first().ok_or_else(|| Error::Contract("no samples to average".into()))?;
    let mut acc = vec![0.0; first.len()];
    for r in rows {
        acc.iter_mut().zip(r).for_each(|(a, v)| *a += v);
    }
    let n = rows.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

/// Dataset-level commonality score of every neuron.
pub fn cnl_score(model: &Model, data: &[TaskSample], opts: &AttrOptions) -> Result<ScoreMap> {
    if data.is_empty() {
        return Err(Error::Contract("commonality scores need a nonempty dataset".into()));
    }
    let (rows, skipped) = sample_score_matrix(model, data, opts)?;
    cnl_from_rows(model, data, &rows, skipped, opts)
}

/// Commonality scores from rows already produced by [`sample_score_matrix`] on `data`.
pub fn cnl_from_rows(
    model: &Model,
    data: &[TaskSample],
    rows: &[Vec<f64>],
    skipped: usize,
    opts: &AttrOptions,
) -> Result<ScoreMap> {
    let cfg = model.config();
    let mut m = meta(model, "cnl", data, opts, Quadrature::Closed);
    m.samples = rows.len();
    m.skipped = skipped;
    Ok(ScoreMap {
        layers: cfg.n_layers,
        width: cfg.d_ff,
        scores: mean_rows(rows)?,
        meta: m,
    })
}

/// Independent single-prompt attributions for both framings of a pair.
pub fn attr_decoupled(model: &Model, pair: &ComparativePair, opts: &AttrOptions) -> Result<(ScoreMap, ScoreMap)> {
    Ok((attr_single(model, &pair.sub1, opts)?, attr_single(model, &pair.sub2, opts)?))
}

fn threshold_mask(layers: usize, width: usize, scores: &[f64], sigma: f64, spread: Spread) -> Result<NeuronMask> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Contract(format!("sigma must be positive, got {sigma}")));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::Numeric(format!("score {i} is not finite")));
    }
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
    let width_stat = match spread {
        Spread::Variance => var,
        Spread::Stddev => var.sqrt(),
    };
    let bits = scores.iter().map(|s| (s - mean).abs() > sigma * width_stat).collect();
    NeuronMask::from_bits(layers, width, bits)
}

/// Neurons whose score deviates from the mean by more than `sigma` times the spread.
pub fn mask_from_scores(scores: &ScoreMap, sigma: f64, spread: Spread) -> Result<NeuronMask> {
    let mut m = threshold_mask(scores.layers, scores.width, &scores.scores, sigma, spread)?;
    m.sigma = Some(sigma);
    m.source = Some(scores.fingerprint());
    Ok(m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub size: usize,
    pub selected: usize,
    /// `None` when either mask is empty.
    pub overlap: Option<f64>,
}

/// Overlap of the mask from each seeded prefix with the full-dataset mask.
pub fn convergence_curve(
    model: &Model,
    data: &[TaskSample],
    sizes: &[usize],
    opts: &AttrOptions,
    sigma: f64,
    spread: Spread,
    seed: u64,
) -> Result<Vec<CurvePoint>> {
    if sizes.contains(&0) {
        return Err(Error::Contract("convergence sizes must be positive".into()));
    }
    if sizes.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Contract("convergence sizes must be ascending".into()));
    }
    if let Some(&s) = sizes.iter().find(|&&s| s > data.len()) {
        return Err(Error::Contract(format!("size {s} exceeds dataset of {}", data.len())));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut seeds::substream(seed, "convergence"));
    let shuffled: Vec<TaskSample> = order.iter().map(|&i| data[i].clone()).collect();
    let (rows, _) = sample_score_matrix(model, &shuffled, &AttrOptions { permissive: false, ..opts.clone() })?;
    let cfg = model.config();
    curve_from_rows(&rows, sizes, cfg.n_layers, cfg.d_ff, sigma, spread)
}

/// Convergence points from precomputed per-sample rows in prefix order.
pub fn curve_from_rows(
    rows: &[Vec<f64>],
    sizes: &[usize],
    layers: usize,
    width: usize,
    sigma: f64,
    spread: Spread,
) -> Result<Vec<CurvePoint>> {
    let full = threshold_mask(layers, width, &mean_rows(rows)?, sigma, spread)?;
    sizes
        .iter()
        .map(|&s| {
            if s == 0 || s > rows.len() {
                return Err(Error::Contract(format!("size {s} outside 1..={}", rows.len())));
            }
            let m = threshold_mask(layers, width, &mean_rows(&rows[..s])?, sigma, spread)?;
            let overlap = set_metrics(&m, &full).ok().map(|x| x.overlap);
            Ok(CurvePoint {
                size: s,
                selected: m.count(),
                overlap,
            })
        })
        .collect()
}
