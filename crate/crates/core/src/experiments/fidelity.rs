use serde::{Deserialize, Serialize};

use crate::attribution::{attr_single, cnl_from_rows, mask_from_scores, sample_scores, AttrOptions, Spread};
use crate::baselines::{all_edges, causal_trace, circuit_extract, TraceConfig};
use crate::data::{ParaphraseGroup, TaskSample};
use crate::error::{Error, Result};
use crate::metrics::set_metrics;
use crate::model::Model;
use crate::neurons::NeuronMask;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Locator {
    Kn,
    CausalTrace,
    Circuit,
    /// Commonality attribution on a single prompt.
    CnlSingle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FidelityConfig {
    pub locators: Vec<Locator>,
    pub kn_m: usize,
    pub trace: TraceConfig,
    pub circuit_tau: f64,
    pub attr: AttrOptions,
    pub sigma: f64,
    pub spread: Spread,
    /// Groups beyond this count are ignored.
    pub max_groups: Option<usize>,
}

impl Default for FidelityConfig {
    fn default() -> Self {
        FidelityConfig {
            locators: vec![Locator::Kn, Locator::CausalTrace, Locator::Circuit, Locator::CnlSingle],
            kn_m: 20,
            trace: TraceConfig::default(),
            circuit_tau: 0.05,
            attr: AttrOptions::default(),
            sigma: 3.0,
            spread: Spread::Stddev,
            max_groups: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocatorFidelity {
    pub locator: Locator,
    pub mean_overlap: Option<f64>,
    /// Every pairwise overlap, group by group.
    pub overlaps: Vec<f64>,
    pub groups_used: usize,
    pub skipped: Vec<(String, String)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidelityResult {
    pub groups: usize,
    pub locators: Vec<LocatorFidelity>,
}

impl FidelityResult {
    pub fn mean(&self, l: Locator) -> Option<f64> {
        self.locators.iter().find(|x| x.locator == l).and_then(|x| x.mean_overlap)
    }
}

fn locate(model: &Model, s: &TaskSample, l: Locator, cfg: &FidelityConfig) -> Result<NeuronMask> {
    let c = model.config();
    match l {
        Locator::Kn => Ok(attr_single(model, s, &cfg.attr)?.top_mask(cfg.kn_m)),
        Locator::CausalTrace => {
            let span = s
                .subject
                .ok_or_else(|| Error::Contract("causal tracing needs a subject span".into()))?;
            let grid = causal_trace(model, s, span, &cfg.trace)?;
            NeuronMask::from_layers(c.n_layers, c.d_ff, &grid.top_layers)
        }
        Locator::Circuit => {
            let circuit = circuit_extract(model, s, cfg.circuit_tau)?;
            NeuronMask::from_bits(1, all_edges(c.n_layers, c.n_heads).len(), circuit.edge_bits(model))
        }
        Locator::CnlSingle => {
            let row = sample_scores(model, s, &cfg.attr)?;
            let map = cnl_from_rows(model, std::slice::from_ref(s), &[row], 0, &cfg.attr)?;
            mask_from_scores(&map, cfg.sigma, cfg.spread)
        }
    }
}

fn group_overlaps(model: &Model, g: &ParaphraseGroup, l: Locator, cfg: &FidelityConfig) -> Result<Vec<f64>> {
    g.validate()?;
    let masks: Vec<NeuronMask> = g.members.iter().map(|s| locate(model, s, l, cfg)).collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(10);
    for i in 0..masks.len() {
        for j in i + 1..masks.len() {
            out.push(set_metrics(&masks[i], &masks[j])?.overlap);
        }
    }
    Ok(out)
}

/// Mean pairwise overlap of per-member localizations within paraphrase groups.
pub fn run_fidelity(model: &Model, groups: &[ParaphraseGroup], cfg: &FidelityConfig) -> Result<FidelityResult> {
    if groups.is_empty() {
        return Err(Error::Contract("fidelity needs at least one paraphrase group".into()));
    }
    let groups = &groups[..cfg.max_groups.unwrap_or(groups.len()).min(groups.len())];
    let mut locators = Vec::with_capacity(cfg.locators.len());
    for &l in &cfg.locators {
        let mut overlaps = Vec::new();
        let mut skipped = Vec::new();
        let mut used = 0;
        for g in groups {
            match group_overlaps(model, g, l, cfg) {
                Ok(v) => {
                    used += 1;
                    overlaps.extend(v);
                }
                Err(e) => skipped.push((g.group_id.clone(), e.to_string())),
            }
        }
        let mean_overlap = (!overlaps.is_empty()).then(|| overlaps.iter().sum::<f64>() / overlaps.len() as f64);
        locators.push(LocatorFidelity {
            locator: l,
            mean_overlap,
            overlaps,
            groups_used: used,
            skipped,
        });
    }
    Ok(FidelityResult {
        groups: groups.len(),
        locators,
    })
}
