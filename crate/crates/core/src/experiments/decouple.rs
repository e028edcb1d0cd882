use serde::{Deserialize, Serialize};

use crate::attribution::{attr_decoupled, AttrOptions};
use crate::data::ComparativePair;
use crate::error::{Error, Result};
use crate::metrics::{coincidence_rate, Coincidence};
use crate::model::Model;
use crate::neurons::NeuronMask;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoupleConfig {
    pub attr: AttrOptions,
    /// Per-sample located set size.
    pub m: usize,
    pub max_pairs: Option<usize>,
}

impl Default for DecoupleConfig {
    fn default() -> Self {
        DecoupleConfig {
            attr: AttrOptions::default(),
            m: 20,
            max_pairs: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoupleResult {
    pub pairs: usize,
    pub m: usize,
    pub cross: Coincidence,
    pub within_first: Coincidence,
    pub within_second: Coincidence,
}

/// Coincidence of per-sample located sets across and within the two framings of each pair.
pub fn run_decouple(model: &Model, pairs: &[ComparativePair], cfg: &DecoupleConfig) -> Result<DecoupleResult> {
    let pairs = &pairs[..cfg.max_pairs.unwrap_or(pairs.len()).min(pairs.len())];
    if pairs.is_empty() {
        return Err(Error::Contract("decoupling needs at least one pair".into()));
    }
    let mut first: Vec<NeuronMask> = Vec::with_capacity(pairs.len());
    let mut second: Vec<NeuronMask> = Vec::with_capacity(pairs.len());
    for p in pairs {
        p.validate()?;
        let (a, b) = attr_decoupled(model, p, &cfg.attr)?;
        first.push(a.top_mask(cfg.m));
        second.push(b.top_mask(cfg.m));
    }
    let framings = [first, second];
    Ok(DecoupleResult {
        pairs: pairs.len(),
        m: cfg.m,
        cross: coincidence_rate(&framings, 1, 2)?,
        within_first: coincidence_rate(&framings, 1, 1)?,
        within_second: coincidence_rate(&framings, 2, 2)?,
    })
}
