//! Individual-knowledge locators: activation suppression/amplification,
//! causal tracing over layers and edge-ablation circuits.

mod circuit;
mod trace;

use serde::{Deserialize, Serialize};

pub use circuit::{
    ablated_logits, all_edges, calibrate_tau, circuit_extract, circuit_recall, source_params, top10_rank, Circuit,
    Dest, Edge, Source,
};
pub use trace::{causal_trace, default_noise_scale, fully_restored_prob, PositionPolicy, TraceConfig, TraceGrid};

use crate::data::TaskSample;
use crate::error::Result;
use crate::model::{forward_with_taps, Model, NeuronTap, PositionSel, TapMode};
use crate::neurons::NeuronMask;
use crate::tensor::kernels;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum KnMode {
    /// Activations clamped to 0.
    Suppress,
    /// Activations doubled.
    Amplify,
    /// Scale 1; a control that must change nothing.
    Identity,
}

impl KnMode {
    fn tap(self) -> TapMode {
        match self {
            KnMode::Suppress => TapMode::ClampValue(0.0),
            KnMode::Amplify => TapMode::ClampScale(2.0),
            KnMode::Identity => TapMode::ClampScale(1.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnOutcome {
    pub before: f64,
    pub after: f64,
    pub delta: f64,
}

fn first_token_prob(model: &Model, sample: &TaskSample, taps: &[NeuronTap]) -> Result<f64> {
    let out = forward_with_taps(model, &sample.prompt, taps)?;
    let mut last = out.logits.last().expect("nonempty prompt").clone();
    kernels::softmax_in_place(&mut last);
    Ok(last[sample.answer[0]])
}

/// Correct-answer probability before and after clamping every masked neuron at every position.
pub fn kn_intervene(model: &Model, sample: &TaskSample, mask: &NeuronMask, mode: KnMode) -> Result<KnOutcome> {
    model.check_mask(mask)?;
    sample.validate()?;
    let before = first_token_prob(model, sample, &[])?;
    let taps: Vec<NeuronTap> = mask
        .ids()
        .map(|id| NeuronTap::new(id, mode.tap(), PositionSel::All))
        .collect();
    let after = if taps.is_empty() {
        before
    } else {
        first_token_prob(model, sample, &taps)?
    };
    Ok(KnOutcome {
        before,
        after,
        delta: after - before,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::test_util::tiny_lively;
    use crate::neurons::NeuronId;

    fn sample() -> TaskSample {
        TaskSample {
            prompt: vec![2, 7, 1],
            answer: vec![8],
            tag: "t".into(),
            subject: None,
        }
    }

    #[test]
    fn empty_and_identity_masks_change_nothing() {
        let m = tiny_lively(1);
        let empty = kn_intervene(&m, &sample(), &NeuronMask::empty(2, 8), KnMode::Suppress).unwrap();
        assert_eq!(empty.delta, 0.0);
        let full = NeuronMask::full(2, 8);
        assert_eq!(kn_intervene(&m, &sample(), &full, KnMode::Identity).unwrap().delta, 0.0);
    }

    #[test]
    fn suppress_and_amplify_start_from_the_same_model() {
        let m = tiny_lively(2);
        let mask = NeuronMask::from_ids(2, 8, [NeuronId::new(1, 1), NeuronId::new(0, 4)]).unwrap();
        let s = kn_intervene(&m, &sample(), &mask, KnMode::Suppress).unwrap();
        let a = kn_intervene(&m, &sample(), &mask, KnMode::Amplify).unwrap();
        assert_eq!(s.before, a.before);
        assert_ne!(s.after, a.after);
    }
}
