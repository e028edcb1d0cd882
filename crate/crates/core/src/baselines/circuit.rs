//! Edge-ablation circuits over the residual-stream computation graph.
//!
//! Sources are the embedding, every attention head's output (the output bias
//! split evenly across heads) and every MLP block. Destinations are the
//! attention and MLP blocks and the output head; each reads the sum of the
//! residual contributions of all earlier sources. Ablating an edge removes
//! one source's contribution from one destination's input.

use serde::{Deserialize, Serialize};

use crate::data::TaskSample;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::kernels::{self, gemm, AttnPattern, MatView};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Source {
    Embed,
    Head { layer: usize, head: usize },
    Mlp { layer: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Dest {
    Attn { layer: usize },
    Mlp { layer: usize },
    Output,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Edge {
    pub src: Source,
    pub dst: Dest,
}

/// Every edge in topological order: destinations in execution order, sources in execution order.
pub fn all_edges(n_layers: usize, n_heads: usize) -> Vec<Edge> {
    let sources_before = |stage: usize| -> Vec<Source> {
        // stage 2l = attention of layer l, 2l+1 = MLP of layer l, 2L = output
        let mut v = vec![Source::Embed];
        for l in 0..n_layers {
            if 2 * l < stage {
                v.extend((0..n_heads).map(|h| Source::Head { layer: l, head: h }));
            }
            if 2 * l + 1 < stage {
                v.push(Source::Mlp { layer: l });
            }
        }
        v
    };
    let mut edges = Vec::new();
    for stage in 0..=2 * n_layers {
        let dst = if stage == 2 * n_layers {
            Dest::Output
        } else if stage % 2 == 0 {
            Dest::Attn { layer: stage / 2 }
        } else {
            Dest::Mlp { layer: stage / 2 }
        };
        edges.extend(sources_before(stage).into_iter().map(|src| Edge { src, dst }));
    }
    edges
}

/// Parameters that produce a source's residual contribution.
pub fn source_params(model: &Model, src: Source) -> usize {
    let c = model.config();
    let d = c.d_model;
    let dh = d / c.n_heads;
    match src {
        Source::Embed => (c.vocab_size + c.max_seq_len) * d,
        // q, k, v columns and biases of the head, its rows of wo and its share of bo
        Source::Head { .. } => 3 * (d * dh + dh) + dh * d + dh,
        Source::Mlp { .. } => 2 * c.d_ff * d + c.d_ff + d,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Circuit {
    pub nodes: Vec<String>,
    pub edges: Vec<Edge>,
    pub tau: f64,
    pub sample: String,
    pub model: String,
    /// Scores of the edges as they were visited, in topological order.
    pub scores: Vec<(Edge, f64)>,
    /// Source-side parameters of retained edges over those of all edges.
    pub param_fraction: f64,
}

impl Circuit {
    /// Retained edges as positions in [`all_edges`].
    pub fn edge_bits(&self, model: &Model) -> Vec<bool> {
        let c = model.config();
        all_edges(c.n_layers, c.n_heads)
            .iter()
            .map(|e| self.edges.contains(e))
            .collect()
    }
}

fn node_name(s: Source) -> String {
    match s {
        Source::Embed => "embed".into(),
        Source::Head { layer, head } => format!("a{layer}.h{head}"),
        Source::Mlp { layer } => format!("m{layer}"),
    }
}

fn dest_nodes(d: Dest, n_heads: usize) -> Vec<String> {
    match d {
        Dest::Attn { layer } => (0..n_heads).map(|h| format!("a{layer}.h{h}")).collect(),
        Dest::Mlp { layer } => vec![format!("m{layer}")],
        Dest::Output => vec!["out".into()],
    }
}

/// Forward pass in which each destination reads only the sources of its
/// non-ablated edges. Returns the last-position logits.
pub fn ablated_logits(model: &Model, tokens: &[usize], ablated: &[bool]) -> Result<Vec<f64>> {
    let c = model.config();
    let edges = all_edges(c.n_layers, c.n_heads);
    if ablated.len() != edges.len() {
        return Err(Error::dim("ablated_logits", format!("{} flags for {} edges", ablated.len(), edges.len())));
    }
    if tokens.is_empty() || tokens.len() > c.max_seq_len {
        return Err(Error::Range(format!("sequence length {} outside 1..={}", tokens.len(), c.max_seq_len)));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t >= c.vocab_size) {
        return Err(Error::Range(format!("token id {t} outside vocabulary")));
    }
    let (n, d, h) = (tokens.len(), c.d_model, c.n_heads);
    let dh = d / h;
    let p = model.params();
    let lay = model.layout();

    // contribution of every source, indexed like all_edges' sources
    let mut contrib: Vec<(Source, Vec<f64>)> = Vec::new();
    let mut emb = vec![0.0; n * d];
    let (te, pe) = (p[lay.tok_emb].data(), p[lay.pos_emb].data());
    for (i, &t) in tokens.iter().enumerate() {
        for k in 0..d {
            emb[i * d + k] = te[t * d + k] + pe[i * d + k];
        }
    }
    contrib.push((Source::Embed, emb));

    let mut edge_idx = 0;
    let mut input_for = |dst: Dest, contrib: &[(Source, Vec<f64>)]| -> Vec<f64> {
        let mut x = vec![0.0; n * d];
        while edge_idx < edges.len() && edges[edge_idx].dst == dst {
            let e = edges[edge_idx];
            if !ablated[edge_idx] {
                let (_, v) = contrib.iter().find(|(s, _)| *s == e.src).expect("source computed before use");
                x.iter_mut().zip(v).for_each(|(a, b)| *a += b);
            }
            edge_idx += 1;
        }
        x
    };
    let pattern = AttnPattern::causal_segments(&[n]);
    let linear = |x: &[f64], w: &[f64], wt: bool, rows_w: usize, cols_w: usize, b: &[f64]| {
        let out_cols = if wt { rows_w } else { cols_w };
        let mut y: Vec<f64> = b.iter().copied().cycle().take(n * out_cols).collect();
        let wv = MatView::new(w, rows_w, cols_w).maybe_t(wt);
        gemm(MatView::new(x, n, wv.rows), wv, &mut y, 1.0);
        y
    };
    for (l, bp) in lay.blocks.iter().enumerate() {
        let x = input_for(Dest::Attn { layer: l }, &contrib);
        let mut n1 = vec![0.0; n * d];
        kernels::layer_norm(&x, d, p[bp.ln1_g].data(), p[bp.ln1_b].data(), &mut n1);
        let q = linear(&n1, p[bp.wq].data(), false, d, d, p[bp.bq].data());
        let k = linear(&n1, p[bp.wk].data(), false, d, d, p[bp.bk].data());
        let v = linear(&n1, p[bp.wv].data(), false, d, d, p[bp.bv].data());
        let (att, _) = kernels::attention_forward(&q, &k, &v, n, d, h, &pattern);
        let wo = p[bp.wo].data();
        let bo = p[bp.bo].data();
        for head in 0..h {
            let mut y: Vec<f64> = bo.iter().map(|b| b / h as f64).cycle().take(n * d).collect();
            let a = MatView {
                data: &att[head * dh..],
                rows: n,
                cols: dh,
                rs: d as isize,
                cs: 1,
            };
            gemm(a, MatView::new(&wo[head * dh * d..], dh, d), &mut y, 1.0);
            contrib.push((Source::Head { layer: l, head }, y));
        }
        let x = input_for(Dest::Mlp { layer: l }, &contrib);
        let mut n2 = vec![0.0; n * d];
        kernels::layer_norm(&x, d, p[bp.ln2_g].data(), p[bp.ln2_b].data(), &mut n2);
        let mut omega = linear(&n2, p[bp.w_in].data(), true, c.d_ff, d, p[bp.b_in].data());
        omega.iter_mut().for_each(|w| *w = kernels::gelu(*w));
        let m = linear(&omega, p[bp.w_out].data(), false, c.d_ff, d, p[bp.b_out].data());
        contrib.push((Source::Mlp { layer: l }, m));
    }
    let x = input_for(Dest::Output, &contrib);
    let last = &x[(n - 1) * d..];
    let mut f = vec![0.0; d];
    kernels::layer_norm(last, d, p[lay.lnf_g].data(), p[lay.lnf_b].data(), &mut f);
    let v = c.vocab_size;
    let mut logits = p[lay.head_b].data().to_vec();
    gemm(MatView::new(&f, 1, d), MatView::new(p[lay.head_w].data(), d, v), &mut logits, 1.0);
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::Numeric("ablated forward produced non-finite logits".into()));
    }
    Ok(logits)
}

fn target_logprob(model: &Model, tokens: &[usize], target: usize, ablated: &[bool]) -> Result<f64> {
    Ok(kernels::log_softmax_at(&ablated_logits(model, tokens, ablated)?, target))
}

fn sample_id(sample: &TaskSample) -> String {
    format!("{}{}", sample.prompt_text(), sample.answer_text())
}

/// Sequential topological pruning: an edge is dropped when removing it from
/// the current circuit lowers the target log-probability by less than `tau`.
pub fn circuit_extract(model: &Model, sample: &TaskSample, tau: f64) -> Result<Circuit> {
    if tau.is_nan() {
        return Err(Error::Contract("tau must not be NaN".into()));
    }
    sample.validate()?;
    let c = model.config();
    let edges = all_edges(c.n_layers, c.n_heads);
    let target = sample.answer[0];
    let mut ablated = vec![false; edges.len()];
    let mut current = target_logprob(model, &sample.prompt, target, &ablated)?;
    let mut scores = Vec::with_capacity(edges.len());
    for i in 0..edges.len() {
        ablated[i] = true;
        let without = target_logprob(model, &sample.prompt, target, &ablated)?;
        // an ablation that drives the probability to exactly zero scores +inf
        let score = if without == f64::NEG_INFINITY {
            f64::INFINITY
        } else {
            current - without
        };
        if score.is_nan() {
            return Err(Error::Numeric(format!("edge {i} score is not a number")));
        }
        scores.push((edges[i], score));
        if score < tau {
            current = without;
        } else {
            ablated[i] = false;
        }
    }
    Ok(build_circuit(model, sample, tau, &edges, &ablated, scores))
}

fn build_circuit(
    model: &Model,
    sample: &TaskSample,
    tau: f64,
    edges: &[Edge],
    ablated: &[bool],
    scores: Vec<(Edge, f64)>,
) -> Circuit {
    let c = model.config();
    let kept: Vec<Edge> = edges.iter().zip(ablated).filter(|(_, a)| !**a).map(|(e, _)| *e).collect();
    let mut nodes = vec!["embed".to_string(), "out".to_string()];
    for e in &kept {
        nodes.push(node_name(e.src));
        nodes.extend(dest_nodes(e.dst, c.n_heads));
    }
    nodes.sort();
    nodes.dedup();
    let total: usize = edges.iter().map(|e| source_params(model, e.src)).sum();
    let retained: usize = kept.iter().map(|e| source_params(model, e.src)).sum();
    Circuit {
        nodes,
        edges: kept,
        tau,
        sample: sample_id(sample),
        model: model.checksum(),
        scores,
        param_fraction: retained as f64 / total as f64,
    }
}

/// Rank (1-based) of the target among the top ten tokens with every non-circuit
/// edge ablated, or `None` when it falls outside them.
pub fn circuit_recall(model: &Model, circuit: &Circuit, sample: &TaskSample) -> Result<Option<usize>> {
    if circuit.model != model.checksum() {
        return Err(Error::Contract("circuit was extracted from a different model".into()));
    }
    let c = model.config();
    let edges = all_edges(c.n_layers, c.n_heads);
    if let Some(e) = circuit.edges.iter().find(|e| !edges.contains(e)) {
        return Err(Error::Contract(format!("circuit edge {e:?} is not in the model graph")));
    }
    let ablated: Vec<bool> = edges.iter().map(|e| !circuit.edges.contains(e)).collect();
    let logits = ablated_logits(model, &sample.prompt, &ablated)?;
    Ok(top10_rank(&logits, sample.answer[0]))
}

/// 1-based rank of `target` by descending logit, ties to the lower id, if within ten.
pub fn top10_rank(logits: &[f64], target: usize) -> Option<usize> {
    let t = logits[target];
    let rank = 1 + logits
        .iter()
        .enumerate()
        .filter(|&(i, &z)| z > t || (z == t && i < target))
        .count();
    (rank <= 10).then_some(rank)
}

/// Bisects `tau` so the mean retained parameter fraction over `samples`
/// approaches `target`.
pub fn calibrate_tau(model: &Model, samples: &[TaskSample], target: f64, iters: usize) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Contract("calibration needs samples".into()));
    }
    let frac = |tau: f64| -> Result<f64> {
        let mut s = 0.0;
        for x in samples {
            s += circuit_extract(model, x, tau)?.param_fraction;
        }
        Ok(s / samples.len() as f64)
    };
    // fraction shrinks as tau grows; bracket in a signed log-scale
    let (mut lo, mut hi) = (-1.0f64, 1.0f64);
    while frac(hi)? > target && hi < 1e6 {
        hi *= 4.0;
    }
    while frac(lo)? < target && lo > -1e6 {
        lo *= 4.0;
    }
    for _ in 0..iters {
        let mid = 0.5 * (lo + hi);
        if frac(mid)? > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::test_util::tiny_lively;

    fn sample() -> TaskSample {
        TaskSample {
            prompt: vec![3, 1, 4, 1],
            answer: vec![5],
            tag: "t".into(),
            subject: None,
        }
    }

    #[test]
    fn edge_count_and_order() {
        let e = all_edges(4, 4);
        assert_eq!(e.len(), 105);
        assert_eq!(e[0], Edge { src: Source::Embed, dst: Dest::Attn { layer: 0 } });
        assert_eq!(e.last().unwrap().dst, Dest::Output);
    }

    #[test]
    fn unablated_graph_matches_model_forward() {
        let m = tiny_lively(1);
        let s = sample();
        let n = all_edges(2, 2).len();
        let got = ablated_logits(&m, &s.prompt, &vec![false; n]).unwrap();
        let want = m.logits(&s.prompt).unwrap().pop().unwrap();
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-9, "{a} {b}");
        }
    }

    #[test]
    fn ablating_an_edge_leaves_earlier_destinations_alone() {
        // removing embed -> output changes nothing upstream: only the final read differs
        let m = tiny_lively(2);
        let s = sample();
        let edges = all_edges(2, 2);
        let mut ab = vec![false; edges.len()];
        let i = edges.iter().position(|e| e.dst == Dest::Output && e.src == Source::Embed).unwrap();
        ab[i] = true;
        let full = ablated_logits(&m, &s.prompt, &vec![false; edges.len()]).unwrap();
        let cut = ablated_logits(&m, &s.prompt, &ab).unwrap();
        assert_ne!(full, cut);
    }

    #[test]
    fn tau_extremes() {
        let m = tiny_lively(3);
        let s = sample();
        let all = circuit_extract(&m, &s, f64::NEG_INFINITY).unwrap();
        assert_eq!(all.edges.len(), all_edges(2, 2).len());
        assert!((all.param_fraction - 1.0).abs() < 1e-12);
        let none = circuit_extract(&m, &s, f64::INFINITY).unwrap();
        assert!(none.edges.iter().all(|e| none.scores.iter().any(|(x, sc)| x == e && *sc == f64::INFINITY)));
        let base_rank = top10_rank(&m.logits(&s.prompt).unwrap().pop().unwrap(), 5);
        assert_eq!(circuit_recall(&m, &all, &s).unwrap(), base_rank);
        circuit_recall(&m, &none, &s).unwrap();
    }

    #[test]
    fn extraction_is_deterministic() {
        let m = tiny_lively(4);
        let a = circuit_extract(&m, &sample(), 0.05).unwrap();
        let b = circuit_extract(&m, &sample(), 0.05).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn recall_rejects_foreign_circuit() {
        let m = tiny_lively(5);
        let other = tiny_lively(6);
        let c = circuit_extract(&other, &sample(), 0.0).unwrap();
        assert!(matches!(circuit_recall(&m, &c, &sample()), Err(Error::Contract(_))));
    }
}
