use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::TaskSample;
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, HiddenPatch, Model, SeqBatch};
use crate::seeds;
use crate::tensor::{kernels, Tape};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum PositionPolicy {
    /// Last subject token and last prompt token.
    #[default]
    SubjectLastAndLast,
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TraceConfig {
    /// Noise standard deviation; defaults to three times the token-embedding spread.
    pub noise_scale: Option<f64>,
    pub n_noise_seeds: usize,
    pub seed: u64,
    pub k: usize,
    pub positions: PositionPolicy,
}

impl Default for TraceConfig {
    fn default() -> Self {
        TraceConfig {
            noise_scale: None,
            n_noise_seeds: 5,
            seed: 0,
            k: 3,
            positions: PositionPolicy::SubjectLastAndLast,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceGrid {
    pub positions: Vec<usize>,
    /// Restoration probability per layer (rows) and traced position (columns), averaged over noise seeds.
    pub restored: Vec<Vec<f64>>,
    pub clean: f64,
    pub corrupted: f64,
    pub noise_scale: f64,
    pub n_noise_seeds: usize,
    pub seed: u64,
    pub subject: (usize, usize),
    /// Max over traced positions, per layer.
    pub layer_scores: Vec<f64>,
    pub top_layers: Vec<usize>,
}

/// Three times the standard deviation of the token-embedding entries.
pub fn default_noise_scale(model: &Model) -> f64 {
    let e = model.params()[model.layout().tok_emb].data();
    let n = e.len() as f64;
    let mean = e.iter().sum::<f64>() / n;
    3.0 * (e.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
}

/// Clean, noise-corrupted and corrupted-with-restoration runs; every
/// restoration patches one clean block output at one position.
pub fn causal_trace(model: &Model, sample: &TaskSample, subject: (usize, usize), cfg: &TraceConfig) -> Result<TraceGrid> {
    sample.validate()?;
    let (s0, s1) = subject;
    let t = sample.prompt.len();
    if s0 >= s1 {
        return Err(Error::Contract("subject span is empty".into()));
    }
    if s1 > t {
        return Err(Error::Range(format!("subject span [{s0}, {s1}) outside prompt of {t}")));
    }
    if cfg.n_noise_seeds == 0 {
        return Err(Error::Contract("causal trace needs at least one noise seed".into()));
    }
    let sigma = cfg.noise_scale.unwrap_or_else(|| default_noise_scale(model));
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::Contract(format!("noise scale must be finite and non-negative, got {sigma}")));
    }
    let c = model.config();
    let (d, v, nl) = (c.d_model, c.vocab_size, c.n_layers);
    let target = sample.answer[0];
    let positions: Vec<usize> = match cfg.positions {
        PositionPolicy::SubjectLastAndLast if s1 - 1 == t - 1 => vec![t - 1],
        PositionPolicy::SubjectLastAndLast => vec![s1 - 1, t - 1],
        PositionPolicy::All => (0..t).collect(),
    };

    // clean run
    let (clean, clean_hidden) = {
        let batch = SeqBatch::single(&sample.prompt);
        let mut tape = Tape::new();
        let params = model.bind(&mut tape, false);
        let vars = model.forward_tape(&mut tape, &params, &batch, &ForwardOptions::default())?;
        let hidden: Vec<Vec<f64>> = vars.hidden.iter().map(|&h| tape.value(h).to_vec()).collect();
        (last_prob(tape.value(vars.logits), t - 1, v, target), hidden)
    };

    // copy 0 is the plain corrupted run; copy 1 + l·P + p restores layer l at positions[p]
    let copies = 1 + nl * positions.len();
    let mut restored = vec![vec![0.0; positions.len()]; nl];
    let mut corrupted = 0.0;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut patches = Vec::with_capacity(copies - 1);
    for l in 0..nl {
        for (pi, &p) in positions.iter().enumerate() {
            let copy = 1 + l * positions.len() + pi;
            patches.push(HiddenPatch {
                hidden: l + 1,
                row: copy * t + p,
                value: clean_hidden[l + 1][p * d..(p + 1) * d].to_vec(),
            });
        }
    }
    let seqs = vec![sample.prompt.clone(); copies];
    let batch = SeqBatch::new(&seqs);
    for s in 0..cfg.n_noise_seeds {
        let mut rng = seeds::substream(cfg.seed, &format!("trace-noise-{s}"));
        let mut delta = vec![0.0; t * d];
        for x in delta[s0 * d..s1 * d].iter_mut() {
            *x = sigma * normal.sample(&mut rng);
        }
        let noise: Vec<f64> = delta.iter().copied().cycle().take(copies * t * d).collect();
        let mut tape = Tape::new();
        let params = model.bind(&mut tape, false);
        let opts = ForwardOptions {
            embed_noise: Some(&noise),
            patches: &patches,
            ..Default::default()
        };
        let vars = model.forward_tape(&mut tape, &params, &batch, &opts)?;
        let logits = tape.value(vars.logits);
        corrupted += last_prob(logits, t - 1, v, target);
        for (l, row) in restored.iter_mut().enumerate() {
            for (pi, r) in row.iter_mut().enumerate() {
                let copy = 1 + l * positions.len() + pi;
                *r += last_prob(logits, copy * t + t - 1, v, target);
            }
        }
    }
    let k = cfg.n_noise_seeds as f64;
    corrupted /= k;
    restored.iter_mut().flatten().for_each(|r| *r /= k);
    let layer_scores: Vec<f64> = restored
        .iter()
        .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let mut order: Vec<usize> = (0..nl).collect();
    order.sort_by(|&a, &b| layer_scores[b].total_cmp(&layer_scores[a]).then(a.cmp(&b)));
    order.truncate(cfg.k.min(nl));
    Ok(TraceGrid {
        positions,
        restored,
        clean,
        corrupted,
        noise_scale: sigma,
        n_noise_seeds: cfg.n_noise_seeds,
        seed: cfg.seed,
        subject,
        layer_scores,
        top_layers: order,
    })
}

fn last_prob(logits: &[f64], row: usize, v: usize, target: usize) -> f64 {
    let mut r = logits[row * v..(row + 1) * v].to_vec();
    kernels::softmax_in_place(&mut r);
    r[target]
}

/// Corrupted run with clean block outputs patched at every layer and position.
pub fn fully_restored_prob(model: &Model, sample: &TaskSample, subject: (usize, usize), noise_scale: f64, seed: u64) -> Result<f64> {
    let c = model.config();
    let (t, d) = (sample.prompt.len(), c.d_model);
    let batch = SeqBatch::single(&sample.prompt);
    let clean_hidden: Vec<Vec<f64>> = {
        let mut tape = Tape::new();
        let params = model.bind(&mut tape, false);
        let vars = model.forward_tape(&mut tape, &params, &batch, &ForwardOptions::default())?;
        vars.hidden.iter().map(|&h| tape.value(h).to_vec()).collect()
    };
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut rng = seeds::substream(seed, "trace-noise-0");
    let mut noise = vec![0.0; t * d];
    for x in noise[subject.0 * d..subject.1 * d].iter_mut() {
        *x = noise_scale * normal.sample(&mut rng);
    }
    let patches: Vec<HiddenPatch> = (1..=c.n_layers)
        .flat_map(|h| {
            let hid = &clean_hidden[h];
            (0..t).map(move |p| HiddenPatch {
                hidden: h,
                row: p,
                value: hid[p * d..(p + 1) * d].to_vec(),
            })
        })
        .collect();
    let mut tape = Tape::new();
    let params = model.bind(&mut tape, false);
    let opts = ForwardOptions {
        embed_noise: Some(&noise),
        patches: &patches,
        ..Default::default()
    };
    let vars = model.forward_tape(&mut tape, &params, &batch, &opts)?;
    Ok(last_prob(tape.value(vars.logits), t - 1, c.vocab_size, sample.answer[0]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::test_util::tiny_lively;

    fn sample() -> TaskSample {
        TaskSample {
            prompt: vec![5, 2, 9, 4, 1],
            answer: vec![3],
            tag: "t".into(),
            subject: Some((1, 3)),
        }
    }

    #[test]
    fn zero_noise_reproduces_clean() {
        let m = tiny_lively(1);
        let cfg = TraceConfig {
            noise_scale: Some(0.0),
            n_noise_seeds: 2,
            positions: PositionPolicy::All,
            ..Default::default()
        };
        let g = causal_trace(&m, &sample(), (1, 3), &cfg).unwrap();
        assert!((g.corrupted - g.clean).abs() <= 1e-9);
        for r in g.restored.iter().flatten() {
            assert!((r - g.clean).abs() <= 1e-9);
        }
    }

    #[test]
    fn full_restoration_recovers_clean() {
        let m = tiny_lively(2);
        let g = causal_trace(&m, &sample(), (1, 3), &TraceConfig::default()).unwrap();
        let p = fully_restored_prob(&m, &sample(), (1, 3), 5.0, 3).unwrap();
        assert!((p - g.clean).abs() <= 1e-9);
    }

    #[test]
    fn empty_span_is_contract_error() {
        let m = tiny_lively(3);
        assert!(matches!(
            causal_trace(&m, &sample(), (2, 2), &TraceConfig::default()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn noise_changes_the_corrupted_run_and_top_k_is_sized() {
        let m = tiny_lively(4);
        let g = causal_trace(&m, &sample(), (1, 3), &TraceConfig { k: 1, ..Default::default() }).unwrap();
        assert_ne!(g.corrupted, g.clean);
        assert_eq!(g.top_layers.len(), 1);
        assert_eq!(g.positions, vec![2, 4]);
    }
}
