use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Model;
use crate::error::{Error, Result};
use crate::neurons::NeuronId;
use crate::tensor::{kernels, AttnPattern, Tape, TapePosition, Tensor};

/// How a tap treats the neuron output `ω` it targets.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "value", rename_all = "snake_case")]
pub enum TapMode {
    /// `ω ← α·ω`
    ClampScale(f64),
    /// `ω ← c`
    ClampValue(f64),
    RecordOnly,
}

/// Token positions a tap applies to, relative to each sequence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionSel {
    All,
    Last,
    List(Vec<usize>),
}

impl PositionSel {
    fn resolve(&self, len: usize) -> Result<Vec<usize>> {
        match self {
            PositionSel::All => Ok((0..len).collect()),
            PositionSel::Last => Ok(vec![len - 1]),
            PositionSel::List(ps) => {
                if let Some(&p) = ps.iter().find(|&&p| p >= len) {
                    return Err(Error::Range(format!("tap position {p} outside sequence of {len}")));
                }
                Ok(ps.clone())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuronTap {
    pub target: NeuronId,
    pub mode: TapMode,
    pub positions: PositionSel,
}

impl NeuronTap {
    pub fn new(target: NeuronId, mode: TapMode, positions: PositionSel) -> Self {
        NeuronTap { target, mode, positions }
    }
}

/// Several token sequences laid out back to back.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeqBatch {
    tokens: Vec<usize>,
    lengths: Vec<usize>,
}

impl SeqBatch {
    pub fn new<S: AsRef<[usize]>>(seqs: &[S]) -> Self {
        SeqBatch {
            tokens: seqs.iter().flat_map(|s| s.as_ref().iter().copied()).collect(),
            lengths: seqs.iter().map(|s| s.as_ref().len()).collect(),
        }
    }

    pub fn single(tokens: &[usize]) -> Self {
        Self::new(&[tokens])
    }

    pub fn rows(&self) -> usize {
        self.tokens.len()
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn offsets(&self) -> Vec<usize> {
        self.lengths
            .iter()
            .scan(0, |acc, &l| {
                let o = *acc;
                *acc += l;
                Some(o)
            })
            .collect()
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    fn positions(&self) -> Vec<usize> {
        self.lengths.iter().flat_map(|&l| 0..l).collect()
    }
}

/// Overwrites one row of a hidden state with a fixed vector.
///
/// `hidden = 0` is the embedding output; `hidden = l + 1` is block `l`'s output.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenPatch {
    pub hidden: usize,
    pub row: usize,
    pub value: Vec<f64>,
}

#[derive(Default)]
pub struct ForwardOptions<'s> {
    pub taps: &'s [NeuronTap],
    /// Additive noise on the embedding output, `rows × d_model`.
    pub embed_noise: Option<&'s [f64]>,
    pub patches: &'s [HiddenPatch],
    /// Replace row `row` of layer `layer`'s `ω` by the `1 × d_ff` node `var`.
    pub omega_override: Option<(usize, usize, TapePosition)>,
}

/// Nodes produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub logits: TapePosition,
    /// `hidden[0]` embeddings, `hidden[l + 1]` block `l` output.
    pub hidden: Vec<TapePosition>,
    /// Residual after attention, per block.
    pub resid_mid: Vec<TapePosition>,
    pub omega_pre: Vec<TapePosition>,
    pub omega_post: Vec<TapePosition>,
    pub keys: Vec<TapePosition>,
    pub values: Vec<TapePosition>,
}

/// Logits and recorded neuron outputs from [`forward_with_taps`].
#[derive(Clone, Debug, PartialEq)]
pub struct TapOutput {
    /// One row of `vocab_size` logits per position.
    pub logits: Vec<Vec<f64>>,
    /// `(neuron, position) → value`; pre-clamp for record-only taps, applied value otherwise.
    pub recorded: BTreeMap<(NeuronId, usize), f64>,
}

/// Frozen clean-run state for re-running the last position of one context.
#[derive(Clone, Debug)]
pub struct PrefixCache {
    pub tokens: Vec<usize>,
    layers: Vec<LayerCache>,
    pub last_logits: Vec<f64>,
}

#[derive(Clone, Debug)]
struct LayerCache {
    keys: Vec<f64>,
    values: Vec<f64>,
    resid_mid: Vec<f64>,
    omega: Vec<f64>,
}

impl PrefixCache {
    /// Unclamped `ω` of `layer` at the last position.
    pub fn omega(&self, layer: usize) -> &[f64] {
        &self.layers[layer].omega
    }

    pub fn prefix_len(&self) -> usize {
        self.tokens.len() - 1
    }

    pub fn prob(&self, target: usize) -> f64 {
        let mut p = self.last_logits.clone();
        kernels::softmax_in_place(&mut p);
        p[target]
    }
}

/// Target probabilities and `∂P/∂ω` for each clamp row of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub probs: Vec<f64>,
    /// `rows × d_ff`, row-major.
    pub grads: Vec<f64>,
}

impl Model {
    fn check_batch(&self, batch: &SeqBatch) -> Result<()> {
        let c = &self.config;
        if batch.lengths.is_empty() || batch.lengths.contains(&0) {
            return Err(Error::Contract("forward needs non-empty sequences".into()));
        }
        if let Some(&l) = batch.lengths.iter().find(|&&l| l > c.max_seq_len) {
            return Err(Error::Range(format!("sequence length {l} exceeds max_seq_len {}", c.max_seq_len)));
        }
        if let Some(&t) = batch.tokens.iter().find(|&&t| t >= c.vocab_size) {
            return Err(Error::Range(format!("token id {t} outside vocabulary of {}", c.vocab_size)));
        }
        Ok(())
    }

    /// Records the full forward pass on `tape` using the bound parameter nodes.
    pub fn forward_tape<'m>(
        &'m self,
        tape: &mut Tape<'m>,
        params: &[TapePosition],
        batch: &SeqBatch,
        opts: &ForwardOptions<'_>,
    ) -> Result<ForwardVars> {
        self.check_batch(batch)?;
        let cfg = &self.config;
        let (d, nj) = (cfg.d_model, cfg.d_ff);
        let n = batch.rows();
        let offsets = batch.offsets();
        let lay = &self.layout;

        let tok = tape.gather(params[lay.tok_emb], &batch.tokens)?;
        let pos = tape.gather(params[lay.pos_emb], &batch.positions())?;
        let mut h = tape.add(tok, pos)?;
        if let Some(noise) = opts.embed_noise {
            let noise = tape.constant(vec![n, d], noise.to_vec())?;
            h = tape.add(h, noise)?;
        }
        h = apply_patches(tape, h, 0, opts.patches, d)?;

        // resolve taps once: per layer a (scale, shift) pair plus record requests
        let mut tap_mods: Vec<Option<(Vec<f64>, Vec<f64>)>> = vec![None; cfg.n_layers];
        for tap in opts.taps {
            self.check_neuron(tap.target)?;
            let l = tap.target.layer;
            if matches!(tap.mode, TapMode::RecordOnly) {
                continue;
            }
            let (scale, shift) = tap_mods[l].get_or_insert_with(|| (vec![1.0; n * nj], vec![0.0; n * nj]));
            for (s, &len) in batch.lengths.iter().enumerate() {
                for p in tap.positions.resolve(len)? {
                    let idx = (offsets[s] + p) * nj + tap.target.index;
                    match tap.mode {
                        TapMode::ClampScale(a) => {
                            scale[idx] *= a;
                            shift[idx] *= a;
                        }
                        TapMode::ClampValue(c) => {
                            scale[idx] = 0.0;
                            shift[idx] = c;
                        }
                        TapMode::RecordOnly => {}
                    }
                }
            }
        }

        let pattern = AttnPattern::causal_segments(&batch.lengths);
        let mut vars = ForwardVars {
            logits: h,
            hidden: vec![h],
            resid_mid: Vec::with_capacity(cfg.n_layers),
            omega_pre: Vec::with_capacity(cfg.n_layers),
            omega_post: Vec::with_capacity(cfg.n_layers),
            keys: Vec::with_capacity(cfg.n_layers),
            values: Vec::with_capacity(cfg.n_layers),
        };
        for (l, bp) in lay.blocks.iter().enumerate() {
            let x = h;
            let n1 = tape.layer_norm(x, params[bp.ln1_g], params[bp.ln1_b])?;
            let q = linear(tape, n1, params[bp.wq], params[bp.bq])?;
            let k = linear(tape, n1, params[bp.wk], params[bp.bk])?;
            let v = linear(tape, n1, params[bp.wv], params[bp.bv])?;
            let att = tape.attention(q, k, v, cfg.n_heads, pattern.clone())?;
            let o = linear(tape, att, params[bp.wo], params[bp.bo])?;
            let a = tape.add(x, o)?;
            let n2 = tape.layer_norm(a, params[bp.ln2_g], params[bp.ln2_b])?;
            let w = tape.matmul_t(n2, params[bp.w_in], false, true)?;
            let omega = tape.add_row(w, params[bp.b_in])?;
            let mut post = omega;
            if let Some((scale, shift)) = tap_mods[l].take() {
                post = tape.scale_shift(post, scale, &shift)?;
            }
            if let Some((ol, row, var)) = opts.omega_override {
                if ol == l {
                    post = tape.scatter_rows(post, &[row], var)?;
                }
            }
            let act = tape.gelu(post)?;
            let m = linear(tape, act, params[bp.w_out], params[bp.b_out])?;
            h = tape.add(a, m)?;
            h = apply_patches(tape, h, l + 1, opts.patches, d)?;
            vars.keys.push(k);
            vars.values.push(v);
            vars.resid_mid.push(a);
            vars.omega_pre.push(omega);
            vars.omega_post.push(post);
            vars.hidden.push(h);
        }
        let f = tape.layer_norm(h, params[lay.lnf_g], params[lay.lnf_b])?;
        vars.logits = linear(tape, f, params[lay.head_w], params[lay.head_b])?;
        Ok(vars)
    }

    /// Logits for every position of one sequence, without taps.
    pub fn logits(&self, tokens: &[usize]) -> Result<Vec<Vec<f64>>> {
        Ok(forward_with_taps(self, tokens, &[])?.logits)
    }

    /// Logits at the last position of each sequence in the batch.
    pub fn last_logits_batch(&self, batch: &SeqBatch) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let vars = self.forward_tape(&mut tape, &params, batch, &ForwardOptions::default())?;
        let v = self.config.vocab_size;
        let logits = tape.value(vars.logits);
        Ok(batch
            .offsets()
            .iter()
            .zip(batch.lengths())
            .map(|(&o, &l)| logits[(o + l - 1) * v..(o + l) * v].to_vec())
            .collect())
    }

    /// Greedy continuation of each prompt by its own number of tokens.
    pub fn greedy_batch(&self, prompts: &[Vec<usize>], steps: &[usize]) -> Result<Vec<Vec<usize>>> {
        if prompts.len() != steps.len() {
            return Err(Error::dim("greedy_batch", format!("{} prompts, {} lengths", prompts.len(), steps.len())));
        }
        let mut seqs = prompts.to_vec();
        let mut out = vec![Vec::new(); prompts.len()];
        let max_steps = steps.iter().copied().max().unwrap_or(0);
        for step in 0..max_steps {
            let live: Vec<usize> = (0..prompts.len()).filter(|&i| steps[i] > step).collect();
            for chunk in live.chunks(128) {
                let batch = SeqBatch::new(&chunk.iter().map(|&i| seqs[i].as_slice()).collect::<Vec<_>>());
                let logits = self.last_logits_batch(&batch)?;
                for (&i, row) in chunk.iter().zip(&logits) {
                    let next = argmax(row);
                    seqs[i].push(next);
                    out[i].push(next);
                }
            }
        }
        Ok(out)
    }

    /// Softmax probability of `target` after the last token.
    pub fn target_prob(&self, tokens: &[usize], target: usize) -> Result<f64> {
        let mut logits = self.last_logits_batch(&SeqBatch::single(tokens))?.remove(0);
        kernels::softmax_in_place(&mut logits);
        logits
            .get(target)
            .copied()
            .ok_or_else(|| Error::Range(format!("target {target} outside vocabulary")))
    }

    /// Runs the clean forward pass once and keeps what a last-position re-run needs.
    pub fn prefix_cache(&self, tokens: &[usize]) -> Result<PrefixCache> {
        let batch = SeqBatch::single(tokens);
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let vars = self.forward_tape(&mut tape, &params, &batch, &ForwardOptions::default())?;
        let (d, nj, v) = (self.config.d_model, self.config.d_ff, self.config.vocab_size);
        let t = tokens.len();
        let p = t - 1;
        let layers = (0..self.config.n_layers)
            .map(|l| LayerCache {
                keys: tape.value(vars.keys[l])[..p * d].to_vec(),
                values: tape.value(vars.values[l])[..p * d].to_vec(),
                resid_mid: tape.value(vars.resid_mid[l])[p * d..t * d].to_vec(),
                omega: tape.value(vars.omega_pre[l])[p * nj..t * nj].to_vec(),
            })
            .collect();
        Ok(PrefixCache {
            tokens: tokens.to_vec(),
            layers,
            last_logits: tape.value(vars.logits)[p * v..t * v].to_vec(),
        })
    }

    /// Re-runs the last position of the cached context once per clamp row,
    /// with layer `layer`'s `ω` at that position replaced by the row, and
    /// differentiates the probability of `target` with respect to the row.
    pub fn clamp_sweep(&self, cache: &PrefixCache, layer: usize, rows: &[f64], target: usize) -> Result<SweepResult> {
        let cfg = &self.config;
        let (d, nj) = (cfg.d_model, cfg.d_ff);
        if layer >= cfg.n_layers {
            return Err(Error::Range(format!("layer {layer} outside {}", cfg.n_layers)));
        }
        if rows.is_empty() || rows.len() % nj != 0 {
            return Err(Error::dim("clamp_sweep", format!("{} values for rows of {nj}", rows.len())));
        }
        if target >= cfg.vocab_size {
            return Err(Error::Range(format!("target {target} outside vocabulary")));
        }
        let b = rows.len() / nj;
        let p = cache.prefix_len();
        let lay = &self.layout;
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let clamp = tape.leaf(Tensor::matrix(b, nj, rows.to_vec())?.with_grad());

        let bp = &lay.blocks[layer];
        let act = tape.gelu(clamp)?;
        let m = linear(&mut tape, act, params[bp.w_out], params[bp.b_out])?;
        let a = tape.constant(vec![1, d], cache.layers[layer].resid_mid.clone())?;
        let mut h = add_broadcast_left(&mut tape, a, m)?;
        let pattern = AttnPattern::PrefixSelf { prefix: p };
        for l in layer + 1..cfg.n_layers {
            let bp = &lay.blocks[l];
            let lc = &cache.layers[l];
            let x = h;
            let n1 = tape.layer_norm(x, params[bp.ln1_g], params[bp.ln1_b])?;
            let q = linear(&mut tape, n1, params[bp.wq], params[bp.bq])?;
            let k = linear(&mut tape, n1, params[bp.wk], params[bp.bk])?;
            let v = linear(&mut tape, n1, params[bp.wv], params[bp.bv])?;
            let (k_all, v_all) = if p > 0 {
                let kp = tape.constant(vec![p, d], lc.keys.clone())?;
                let vp = tape.constant(vec![p, d], lc.values.clone())?;
                (tape.concat(&[kp, k], 0)?, tape.concat(&[vp, v], 0)?)
            } else {
                (k, v)
            };
            let att = tape.attention(q, k_all, v_all, cfg.n_heads, pattern.clone())?;
            let o = linear(&mut tape, att, params[bp.wo], params[bp.bo])?;
            let a = tape.add(x, o)?;
            let n2 = tape.layer_norm(a, params[bp.ln2_g], params[bp.ln2_b])?;
            let w = tape.matmul_t(n2, params[bp.w_in], false, true)?;
            let omega = tape.add_row(w, params[bp.b_in])?;
            let act = tape.gelu(omega)?;
            let m = linear(&mut tape, act, params[bp.w_out], params[bp.b_out])?;
            h = tape.add(a, m)?;
        }
        let f = tape.layer_norm(h, params[lay.lnf_g], params[lay.lnf_b])?;
        let logits = linear(&mut tape, f, params[lay.head_w], params[lay.head_b])?;
        let probs = tape.softmax(logits)?;
        let picked = tape.pick(probs, &(0..b).map(|r| (r, target)).collect::<Vec<_>>())?;
        let total = tape.sum(picked)?;
        tape.backward(total)?;
        let probs = tape.value(picked).to_vec();
        let grads = tape
            .take_grad(clamp)
            .ok_or_else(|| Error::Numeric("clamp sweep produced no gradient".into()))?;
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient at layer {layer}, row {}, neuron {}",
                i / nj,
                i % nj
            )));
        }
        Ok(SweepResult { probs, grads })
    }
}

/// Index of the largest value; the first one on ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn linear(tape: &mut Tape<'_>, x: TapePosition, w: TapePosition, b: TapePosition) -> Result<TapePosition> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

/// `a + m` with the single row `a` broadcast over `m`'s rows, keeping the
/// operand order of the full forward pass.
fn add_broadcast_left(tape: &mut Tape<'_>, a: TapePosition, m: TapePosition) -> Result<TapePosition> {
    let (rows, _) = tape.dims(m);
    let a_rep = if rows == 1 {
        a
    } else {
        let parts = vec![a; rows];
        tape.concat(&parts, 0)?
    };
    tape.add(a_rep, m)
}

fn apply_patches(
    tape: &mut Tape<'_>,
    h: TapePosition,
    hidden: usize,
    patches: &[HiddenPatch],
    d: usize,
) -> Result<TapePosition> {
    let mine: Vec<&HiddenPatch> = patches.iter().filter(|p| p.hidden == hidden).collect();
    if mine.is_empty() {
        return Ok(h);
    }
    let rows: Vec<usize> = mine.iter().map(|p| p.row).collect();
    let mut data = Vec::with_capacity(rows.len() * d);
    for p in &mine {
        if p.value.len() != d {
            return Err(Error::dim("patch", format!("patch of {} values for width {d}", p.value.len())));
        }
        data.extend_from_slice(&p.value);
    }
    let src = tape.constant(vec![rows.len(), d], data)?;
    tape.scatter_rows(h, &rows, src)
}

/// Forward pass of one sequence with neuron taps applied.
pub fn forward_with_taps(model: &Model, tokens: &[usize], taps: &[NeuronTap]) -> Result<TapOutput> {
    let batch = SeqBatch::single(tokens);
    let mut tape = Tape::new();
    let params = model.bind(&mut tape, false);
    let opts = ForwardOptions {
        taps,
        ..Default::default()
    };
    let vars = model.forward_tape(&mut tape, &params, &batch, &opts)?;
    let cfg = model.config();
    let logits = tape
        .value(vars.logits)
        .chunks_exact(cfg.vocab_size)
        .map(<[f64]>::to_vec)
        .collect();
    let mut recorded = BTreeMap::new();
    for tap in taps {
        let l = tap.target.layer;
        let src = if matches!(tap.mode, TapMode::RecordOnly) {
            vars.omega_pre[l]
        } else {
            vars.omega_post[l]
        };
        let vals = tape.value(src);
        for p in tap.positions.resolve(tokens.len())? {
            recorded.insert((tap.target, p), vals[p * cfg.d_ff + tap.target.index]);
        }
    }
    Ok(TapOutput { logits, recorded })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::test_util::{tiny, tiny_lively};

    fn all_neuron_taps(m: &Model, mode: TapMode) -> Vec<NeuronTap> {
        let c = m.config();
        (0..c.n_layers)
            .flat_map(|l| (0..c.d_ff).map(move |j| NeuronTap::new(NeuronId::new(l, j), mode, PositionSel::All)))
            .collect()
    }

    #[test]
    fn identity_clamp_is_bit_exact_noop() {
        let m = tiny_lively(5);
        let toks = [1, 4, 2, 9, 3];
        let plain = forward_with_taps(&m, &toks, &[]).unwrap();
        let tapped = forward_with_taps(&m, &toks, &all_neuron_taps(&m, TapMode::ClampScale(1.0))).unwrap();
        assert_eq!(plain.logits, tapped.logits);
        let rec = forward_with_taps(&m, &toks, &all_neuron_taps(&m, TapMode::RecordOnly)).unwrap();
        assert_eq!(plain.logits, rec.logits);
    }

    #[test]
    fn zero_clamp_equals_zeroing_post_nonlinearity_activation() {
        let mut m = tiny_lively(6);
        let toks = [2, 3, 5, 7];
        let id = NeuronId::new(1, 4);
        let clamped = forward_with_taps(
            &m,
            &toks,
            &[NeuronTap::new(id, TapMode::ClampValue(0.0), PositionSel::All)],
        )
        .unwrap();
        // zeroing the W_out row removes exactly that activation's contribution
        let b = m.layout().blocks[1];
        let d = m.config().d_model;
        m.params_mut()[b.w_out].data_mut()[4 * d..5 * d].fill(0.0);
        let zeroed = forward_with_taps(&m, &toks, &[]).unwrap();
        for (a, z) in clamped.logits.iter().flatten().zip(zeroed.logits.iter().flatten()) {
            assert!((a - z).abs() < 1e-12);
        }
    }

    #[test]
    fn record_only_reports_pre_clamp_and_clamps_report_applied() {
        let m = tiny_lively(7);
        let toks = [1, 2, 3];
        let id = NeuronId::new(0, 2);
        let rec = forward_with_taps(&m, &toks, &[NeuronTap::new(id, TapMode::RecordOnly, PositionSel::Last)]).unwrap();
        let w = rec.recorded[&(id, 2)];
        let cl = forward_with_taps(
            &m,
            &toks,
            &[NeuronTap::new(id, TapMode::ClampScale(0.5), PositionSel::Last)],
        )
        .unwrap();
        assert_eq!(cl.recorded[&(id, 2)], 0.5 * w);
    }

    #[test]
    fn invalid_neuron_is_range_error() {
        let m = tiny(1);
        let bad = NeuronTap::new(NeuronId::new(9, 0), TapMode::RecordOnly, PositionSel::All);
        assert!(matches!(forward_with_taps(&m, &[1, 2], &[bad]), Err(Error::Range(_))));
        assert!(matches!(forward_with_taps(&m, &[1, 99], &[]), Err(Error::Range(_))));
    }

    #[test]
    fn causal_masking_and_tap_locality() {
        let m = tiny_lively(8);
        let a = m.logits(&[1, 2, 3, 4, 5]).unwrap();
        let b = m.logits(&[1, 2, 3, 9, 10]).unwrap();
        assert_eq!(a[..3], b[..3]);

        // clamping layer 1 leaves recorded layer-0 activations unchanged
        let rec0: Vec<NeuronTap> = (0..8)
            .map(|j| NeuronTap::new(NeuronId::new(0, j), TapMode::RecordOnly, PositionSel::All))
            .collect();
        let mut taps = rec0.clone();
        taps.push(NeuronTap::new(NeuronId::new(1, 3), TapMode::ClampValue(5.0), PositionSel::All));
        let base = forward_with_taps(&m, &[1, 2, 3], &rec0).unwrap();
        let clamped = forward_with_taps(&m, &[1, 2, 3], &taps).unwrap();
        for (k, v) in &base.recorded {
            assert_eq!(clamped.recorded[k], *v);
        }
    }

    #[test]
    fn batched_forward_matches_single_sequences() {
        let m = tiny_lively(9);
        let s1 = vec![1, 2, 3];
        let s2 = vec![4, 5, 6, 7, 8];
        let batch = m.last_logits_batch(&SeqBatch::new(&[s1.clone(), s2.clone()])).unwrap();
        let l1 = m.logits(&s1).unwrap();
        let l2 = m.logits(&s2).unwrap();
        for (x, y) in batch[0].iter().zip(&l1[2]) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in batch[1].iter().zip(&l2[4]) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn clamp_sweep_matches_full_sequence_gradient() {
        let m = tiny_lively(10);
        let toks = [3, 1, 4, 1, 5];
        let target = 7;
        let cache = m.prefix_cache(&toks).unwrap();
        let nj = m.config().d_ff;
        for layer in 0..m.config().n_layers {
            let w = cache.omega(layer).to_vec();
            let rows: Vec<f64> = [0.0, 0.3, 1.0].iter().flat_map(|a| w.iter().map(move |x| a * x)).collect();
            let sweep = m.clamp_sweep(&cache, layer, &rows, target).unwrap();
            for (r, alpha) in [0.0, 0.3, 1.0].iter().enumerate() {
                // reference: full-sequence pass with ω's last row replaced by a leaf
                let mut tape = Tape::new();
                let params = m.bind(&mut tape, false);
                let leaf = tape.leaf(Tensor::matrix(1, nj, w.iter().map(|x| alpha * x).collect()).unwrap().with_grad());
                let opts = ForwardOptions {
                    omega_override: Some((layer, toks.len() - 1, leaf)),
                    ..Default::default()
                };
                let vars = m.forward_tape(&mut tape, &params, &SeqBatch::single(&toks), &opts).unwrap();
                let probs = tape.softmax(vars.logits).unwrap();
                let p = tape.pick(probs, &[(toks.len() - 1, target)]).unwrap();
                let s = tape.sum(p).unwrap();
                tape.backward(s).unwrap();
                assert!((tape.value(p)[0] - sweep.probs[r]).abs() < 1e-12);
                for (g, h) in tape.grad(leaf).unwrap().iter().zip(&sweep.grads[r * nj..(r + 1) * nj]) {
                    assert!((g - h).abs() < 1e-12, "layer {layer} alpha {alpha}: {g} vs {h}");
                }
            }
            // α = 1 reproduces the clean probability
            assert!((sweep.probs[2] - cache.prob(target)).abs() < 1e-12);
        }
    }

    #[test]
    fn single_token_context_sweep() {
        let m = tiny_lively(11);
        let cache = m.prefix_cache(&[4]).unwrap();
        let w = cache.omega(0).to_vec();
        let s = m.clamp_sweep(&cache, 0, &w, 2).unwrap();
        assert!((s.probs[0] - cache.prob(2)).abs() < 1e-12);
    }
}
