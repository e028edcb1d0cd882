//! Decoder-only transformer with tappable FFN intermediate neurons.
//!
//! Each block is pre-LN:
//!
//! ```text
//! a    = h + Attn(LN1(h))
//! ω    = W_in · LN2(a) + b_in          (the tappable neuron outputs)
//! h'   = a + W_out · gelu(ω) + b_out
//! ```
//!
//! so the residual recurrence is `h^l = h^{l-1} + att^l + m^l`. Taps act on
//! `ω` before the nonlinearity. Neuron `(l, j)` owns row `j` of `W_in`, entry
//! `j` of `b_in` and row `j` of `W_out` (both stored `d_ff × d_model`).

mod checkpoint;
mod forward;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT_VERSION};
pub use forward::{
    argmax, forward_with_taps, ForwardOptions, ForwardVars, HiddenPatch, NeuronTap, PositionSel, PrefixCache, SeqBatch,
    SweepResult, TapMode, TapOutput,
};
pub use train::{answer_loss, answer_loss_grad, train_masked, TrainConfig, TrainReport};

use crate::error::{Error, Result};
use crate::neurons::{NeuronId, NeuronMask};
use crate::tensor::{Tape, TapePosition, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale default: 4 layers, width 128, 4 heads, 512 neurons per layer.
    pub fn toy(vocab_size: usize, seed: u64) -> Self {
        ModelConfig {
            n_layers: 4,
            d_model: 128,
            n_heads: 4,
            d_ff: 512,
            vocab_size,
            max_seq_len: 64,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Contract(format!("{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Contract(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn n_neurons(&self) -> usize {
        self.n_layers * self.d_ff
    }
}

/// Indices of one block's parameters within [`Model::params`].
#[derive(Clone, Copy, Debug)]
pub struct BlockParams {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w_in: usize,
    pub b_in: usize,
    pub w_out: usize,
    pub b_out: usize,
}

#[derive(Clone, Debug)]
pub struct ParamLayout {
    pub tok_emb: usize,
    pub pos_emb: usize,
    pub blocks: Vec<BlockParams>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub head_w: usize,
    pub head_b: usize,
}

/// Names and shapes of every parameter, in storage order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, j, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
    let mut specs = vec![
        ("tok_emb".to_string(), vec![v, d]),
        ("pos_emb".to_string(), vec![cfg.max_seq_len, d]),
    ];
    for l in 0..cfg.n_layers {
        let p = |s: &str| format!("blocks.{l}.{s}");
        specs.extend([
            (p("ln1.gamma"), vec![d]),
            (p("ln1.beta"), vec![d]),
            (p("attn.wq"), vec![d, d]),
            (p("attn.bq"), vec![d]),
            (p("attn.wk"), vec![d, d]),
            (p("attn.bk"), vec![d]),
            (p("attn.wv"), vec![d, d]),
            (p("attn.bv"), vec![d]),
            (p("attn.wo"), vec![d, d]),
            (p("attn.bo"), vec![d]),
            (p("ln2.gamma"), vec![d]),
            (p("ln2.beta"), vec![d]),
            (p("ffn.w_in"), vec![j, d]),
            (p("ffn.b_in"), vec![j]),
            (p("ffn.w_out"), vec![j, d]),
            (p("ffn.b_out"), vec![d]),
        ]);
    }
    specs.extend([
        ("ln_f.gamma".to_string(), vec![d]),
        ("ln_f.beta".to_string(), vec![d]),
        ("head.w".to_string(), vec![d, v]),
        ("head.b".to_string(), vec![v]),
    ]);
    specs
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let per_block = 16;
        let blocks = (0..cfg.n_layers)
            .map(|l| {
                let o = 2 + l * per_block;
                BlockParams {
                    ln1_g: o,
                    ln1_b: o + 1,
                    wq: o + 2,
                    bq: o + 3,
                    wk: o + 4,
                    bk: o + 5,
                    wv: o + 6,
                    bv: o + 7,
                    wo: o + 8,
                    bo: o + 9,
                    ln2_g: o + 10,
                    ln2_b: o + 11,
                    w_in: o + 12,
                    b_in: o + 13,
                    w_out: o + 14,
                    b_out: o + 15,
                }
            })
            .collect();
        let t = 2 + cfg.n_layers * per_block;
        ParamLayout {
            tok_emb: 0,
            pos_emb: 1,
            blocks,
            lnf_g: t,
            lnf_b: t + 1,
            head_w: t + 2,
            head_b: t + 3,
        }
    }
}

/// Flat element ranges owned by one neuron: `(param index, start, len)`.
pub type OwnedSpan = (usize, usize, usize);

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    layout: ParamLayout,
    names: Vec<String>,
    params: Vec<Tensor>,
}

impl PartialEq for Model {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.names == other.names
            && self.params.iter().zip(&other.params).all(|(a, b)| a.data() == b.data())
    }
}

impl Model {
    /// Seeded initialisation: N(0, 0.02) weights, output projections scaled by
    /// `1/sqrt(2L)`, zero biases, unit layer-norm gains.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let std = 0.02;
        let out_std = std / (2.0 * config.n_layers as f64).sqrt();
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let specs = param_specs(&config);
        let mut names = Vec::with_capacity(specs.len());
        let mut params = Vec::with_capacity(specs.len());
        for (name, shape) in specs {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = if name.ends_with("gamma") {
                vec![1.0; n]
            } else if name.ends_with(".bq")
                || name.ends_with(".bk")
                || name.ends_with(".bv")
                || name.ends_with(".bo")
                || name.ends_with("b_in")
                || name.ends_with("b_out")
                || name.ends_with("beta")
                || name == "head.b"
            {
                vec![0.0; n]
            } else {
                let s = if name.ends_with("wo") || name.ends_with("w_out") {
                    out_std
                } else {
                    std
                };
                (0..n).map(|_| s * normal.sample(&mut rng)).collect()
            };
            names.push(name);
            params.push(Tensor::new(shape, data)?);
        }
        Ok(Model {
            layout: ParamLayout::new(&config),
            config,
            names,
            params,
        })
    }

    pub(crate) fn from_parts(config: ModelConfig, params: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        if specs.len() != params.len() {
            return Err(Error::Schema(format!(
                "expected {} parameter blocks, found {}",
                specs.len(),
                params.len()
            )));
        }
        for ((name, shape), (pn, t)) in specs.iter().zip(&params) {
            if name != pn || shape.as_slice() != t.shape() {
                return Err(Error::Schema(format!(
                    "parameter block {pn} {:?} does not match expected {name} {shape:?}",
                    t.shape()
                )));
            }
        }
        let (names, params) = params.into_iter().unzip();
        Ok(Model {
            layout: ParamLayout::new(&config),
            config,
            names,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn n_params(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Registers every parameter on `tape` as a borrowed leaf.
    pub fn bind<'m>(&'m self, tape: &mut Tape<'m>, requires_grad: bool) -> Vec<TapePosition> {
        self.params
            .iter()
            .map(|p| {
                tape.leaf_ref(p.shape(), p.data(), requires_grad)
                    .expect("parameter shapes are consistent")
            })
            .collect()
    }

    pub fn check_neuron(&self, id: NeuronId) -> Result<()> {
        if id.layer >= self.config.n_layers || id.index >= self.config.d_ff {
            return Err(Error::Range(format!(
                "neuron ({}, {}) outside {} layers x {} neurons",
                id.layer, id.index, self.config.n_layers, self.config.d_ff
            )));
        }
        Ok(())
    }

    pub fn check_mask(&self, mask: &NeuronMask) -> Result<()> {
        if mask.dims() != (self.config.n_layers, self.config.d_ff) {
            return Err(Error::dim(
                "mask",
                format!(
                    "mask {:?} vs model ({}, {})",
                    mask.dims(),
                    self.config.n_layers,
                    self.config.d_ff
                ),
            ));
        }
        Ok(())
    }

    /// Parameter elements owned by neuron `id`.
    pub fn owned_spans(&self, id: NeuronId) -> Result<[OwnedSpan; 3]> {
        self.check_neuron(id)?;
        let d = self.config.d_model;
        let b = &self.layout.blocks[id.layer];
        Ok([
            (b.w_in, id.index * d, d),
            (b.b_in, id.index, 1),
            (b.w_out, id.index * d, d),
        ])
    }

    /// Per-parameter boolean maps of the elements owned by the masked neurons.
    pub fn ownership(&self, mask: &NeuronMask) -> Result<Vec<Option<Vec<bool>>>> {
        self.check_mask(mask)?;
        let mut out: Vec<Option<Vec<bool>>> = vec![None; self.params.len()];
        for id in mask.ids() {
            for (p, start, len) in self.owned_spans(id)? {
                let n = self.params[p].numel();
                out[p].get_or_insert_with(|| vec![false; n])[start..start + len].fill(true);
            }
        }
        Ok(out)
    }

    /// Zeroes every parameter owned by the masked neurons.
    pub fn zero_neurons(&mut self, mask: &NeuronMask) -> Result<()> {
        self.check_mask(mask)?;
        let ids: Vec<NeuronId> = mask.ids().collect();
        for id in ids {
            for (p, start, len) in self.owned_spans(id)? {
                self.params[p].data_mut()[start..start + len].fill(0.0);
            }
        }
        Ok(())
    }

    /// SHA-256 over config and parameter bytes, hex encoded.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serialises"));
        for (name, p) in self.names.iter().zip(&self.params) {
            h.update(name.as_bytes());
            for v in p.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Largest absolute elementwise parameter difference.
    pub fn max_abs_diff(&self, other: &Model) -> f64 {
        self.params
            .iter()
            .zip(&other.params)
            .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::toy(96, 0);
        assert!(c.validate().is_ok());
        c.n_heads = 3;
        assert!(c.validate().is_err());
        c.n_heads = 4;
        c.d_ff = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn ownership_partitions_ffn_parameters() {
        let m = test_util::tiny(1);
        let cfg = m.config().clone();
        let mut seen = std::collections::HashMap::<(usize, usize), NeuronId>::new();
        for l in 0..cfg.n_layers {
            for j in 0..cfg.d_ff {
                let id = NeuronId::new(l, j);
                for (p, s, n) in m.owned_spans(id).unwrap() {
                    for e in s..s + n {
                        assert!(seen.insert((p, e), id).is_none(), "overlap at {p}/{e}");
                    }
                }
            }
        }
        // every element of w_in, b_in, w_out is owned by exactly one neuron
        let ffn: usize = m
            .layout()
            .blocks
            .iter()
            .map(|b| m.params()[b.w_in].numel() + m.params()[b.b_in].numel() + m.params()[b.w_out].numel())
            .sum();
        assert_eq!(seen.len(), ffn);
    }

    #[test]
    fn init_is_deterministic() {
        assert_eq!(test_util::tiny(3), test_util::tiny(3));
        assert_ne!(test_util::tiny(3).checksum(), test_util::tiny(4).checksum());
    }
}
