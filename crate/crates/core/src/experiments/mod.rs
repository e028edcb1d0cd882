//! Experiment suites over the pretrained toy model, each persisted as a
//! result artifact next to the manifest that reproduces it.

mod commonality;
mod decouple;
mod fidelity;
mod manifest;
mod reliability;
mod report;
mod toy;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use commonality::{
    kn_dataset_mask, locate_cnl, TOY_FINETUNE_LR, run_capability, run_cross_dataset, run_planted, run_split_half, CapabilityConfig,
    CapabilityResult, CrossConfig, CrossResult, EnhanceRow, ErasureSummary, Matrix, PlantedConfig, PlantedResult,
    SplitHalfConfig, SplitHalfResult,
};
pub use decouple::{run_decouple, DecoupleConfig, DecoupleResult};
pub use fidelity::{run_fidelity, FidelityConfig, FidelityResult, Locator, LocatorFidelity};
pub use manifest::{read_manifest, write_run, RunManifest, MANIFEST_FILE, RESULT_FILE};
pub use reliability::{
    circuit_arm, flipped, kn_arm, layer_arm, run_reliability, CircuitArm, KnArm, LayerArm, Outcome, ReliabilityConfig,
    ReliabilityResult, RiseFall,
};
pub use report::{emit_report, heatmap_rows, IndexEntry, ReportIndex, HEATMAP_BUCKET};
pub use toy::{cache_path, load_or_pretrain, pretrain, toy_data, Family, PretrainReport, ToyData, ToyRecipe};

use crate::artifact::Artifact;
use crate::data::fingerprint;
use crate::error::Result;
use crate::model::Model;

/// One experiment and its configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "experiment", rename_all = "snake_case")]
pub enum Experiment {
    SplitHalf(SplitHalfConfig),
    Planted(PlantedConfig),
    Capability {
        family: String,
        #[serde(flatten)]
        config: CapabilityConfig,
    },
    CrossDataset(CrossConfig),
    Fidelity(FidelityConfig),
    Reliability {
        family: String,
        #[serde(flatten)]
        config: ReliabilityConfig,
    },
    Decouple(DecoupleConfig),
}

impl Experiment {
    pub fn kind(&self) -> &'static str {
        match self {
            Experiment::SplitHalf(_) => "split_half",
            Experiment::Planted(_) => "planted",
            Experiment::Capability { .. } => "capability",
            Experiment::CrossDataset(_) => "cross_dataset",
            Experiment::Fidelity(_) => "fidelity",
            Experiment::Reliability { .. } => "reliability",
            Experiment::Decouple(_) => "decouple",
        }
    }

    fn seed(&self) -> u64 {
        match self {
            Experiment::SplitHalf(c) => c.seed,
            Experiment::Planted(c) => c.seed,
            Experiment::Capability { config, .. } => config.seed,
            Experiment::CrossDataset(c) => c.seed,
            Experiment::Fidelity(c) => c.trace.seed,
            Experiment::Reliability { config, .. } => config.seed,
            Experiment::Decouple(_) => 0,
        }
    }
}

/// Everything needed to reproduce a run: the toy model recipe and the experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    #[serde(default)]
    pub recipe: ToyRecipe,
    #[serde(flatten)]
    pub experiment: Experiment,
}

fn to_value<T: Serialize>(r: Result<T>) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(r?)?)
}

/// Runs `exp` on an already loaded model and dataset; returns the result payload.
pub fn run_experiment(model: &Model, data: &ToyData, exp: &Experiment) -> Result<serde_json::Value> {
    match exp {
        Experiment::SplitHalf(c) => to_value(run_split_half(model, &data.arith.pretrain, c)),
        Experiment::Planted(c) => to_value(run_planted(model, &data.negation, c)),
        Experiment::Capability { family, config } => to_value(run_capability(model, data.family(family)?, config)),
        Experiment::CrossDataset(c) => {
            let fams = c
                .families
                .iter()
                .map(|n| Ok((n.clone(), data.family(n)?)))
                .collect::<Result<Vec<_>>>()?;
            to_value(run_cross_dataset(model, &fams, c))
        }
        Experiment::Fidelity(c) => to_value(run_fidelity(model, &data.paraphrases, c)),
        Experiment::Reliability { family, config } => {
            Ok(serde_json::to_value(run_reliability(model, &data.family(family)?.pretrain, config))?)
        }
        Experiment::Decouple(c) => to_value(run_decouple(model, &data.pairs, c)),
    }
}

fn fingerprints(data: &ToyData) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    for (name, f) in [("arith", &data.arith), ("code", &data.code), ("sentiment", &data.sentiment)] {
        m.insert(format!("{name}.pretrain"), fingerprint(&f.pretrain));
        m.insert(format!("{name}.tune"), fingerprint(&f.tune));
        m.insert(format!("{name}.eval"), fingerprint(&f.eval));
    }
    m.insert("negation".into(), fingerprint(&data.negation));
    m.insert("paraphrases".into(), crate::artifact::json_hash(&data.paraphrases));
    m.insert("pairs".into(), crate::artifact::json_hash(&data.pairs));
    m
}

/// Loads or trains the toy model, runs the experiment and writes the run directory.
pub fn execute(spec: &RunSpec, cache: &Path, out: &Path) -> Result<PathBuf> {
    let (model, data, _) = load_or_pretrain(&spec.recipe, cache)?;
    execute_on(spec, &model, &data, out)
}

pub fn execute_on(spec: &RunSpec, model: &Model, data: &ToyData, out: &Path) -> Result<PathBuf> {
    let result = run_experiment(model, data, &spec.experiment)?;
    let manifest = RunManifest::new(
        spec.experiment.kind(),
        spec.experiment.seed(),
        spec,
        &model.checksum(),
        fingerprints(data),
    )?;
    write_run(out, manifest, &result)
}

/// Re-runs the experiment recorded in `run_dir` into `out`.
pub fn rerun(run_dir: &Path, cache: &Path, out: &Path) -> Result<PathBuf> {
    let manifest = read_manifest(run_dir)?;
    let spec: RunSpec = serde_json::from_value(manifest.config)?;
    execute(&spec, cache, out)
}

/// The payload of a result artifact in `run_dir`.
pub fn read_result<T: serde::de::DeserializeOwned>(run_dir: &Path) -> Result<T> {
    let raw: serde_json::Value = serde_json::from_slice(&std::fs::read(run_dir.join(RESULT_FILE))?)?;
    Ok(serde_json::from_value::<Artifact<T>>(raw)?.payload)
}
