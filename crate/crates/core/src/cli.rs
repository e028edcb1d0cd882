//! Command-line front end.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use crate::artifact::{read_artifact, write_artifact};
use crate::attribution::{attr_single, cnl_score, mask_from_scores, AttrOptions, ClampSchedule, ScoreMap, Spread};
use crate::baselines::{causal_trace, circuit_extract, TraceConfig};
use crate::data::{export_jsonl, gen_synthetic_suite, load_tasks, Records, SuiteSpec, Tokenizer};
use crate::error::{Error, Result};
use crate::experiments::{
    emit_report, execute, load_or_pretrain, rerun, CapabilityConfig, CrossConfig, DecoupleConfig, Experiment,
    FidelityConfig, PlantedConfig, ReliabilityConfig, RunSpec, SplitHalfConfig, ToyRecipe,
};
use crate::interventions::{run_intervention_model, InterventionKind, InterventionSpec};
use crate::model::{train_masked, Model, ModelConfig, TrainConfig};
use crate::neurons::NeuronMask;

#[derive(Parser, Debug)]
#[command(name = "neuroloc", version, about = "Neuron localization workbench")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write the synthetic suite as JSONL files.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// JSON suite spec; defaults apply to missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model from scratch on task JSONL files, or pretrain the toy model.
    Train {
        #[arg(long, num_args = 1.., required_unless_present = "toy")]
        data: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// JSON training config (or toy recipe with --toy).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        toy: bool,
    },
    /// Score or locate with one method.
    Locate(LocateArgs),
    /// Threshold a score map into a neuron mask.
    Mask {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long, default_value_t = 6.0)]
        sigma: f64,
        #[arg(long, value_enum, default_value_t = Spread::Variance)]
        spread: Spread,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply one intervention and evaluate before and after.
    Intervene(IntervenArgs),
    /// Paraphrase fidelity of each locator.
    Fidelity(ExpArgs),
    /// KN amplify/suppress, per-layer edits and circuit recall.
    Reliability(ExpArgs),
    /// Neuron coincidence across comparative pairs.
    Decouple(ExpArgs),
    /// Enhance and erase matrices across task families.
    Cross(ExpArgs),
    /// Run any experiment described by a run-spec config.
    Run(ExpArgs),
    /// Re-run the experiment recorded in a run directory.
    Rerun {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "neuroloc-cache")]
        cache: PathBuf,
    },
    /// Consolidate run directories into an index and CSV bundle.
    Report {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Cnl,
    Kn,
    Trace,
    Circuit,
}

#[derive(Args, Debug)]
pub struct LocateArgs {
    #[arg(long, value_enum)]
    pub method: Method,
    #[arg(long)]
    pub model: PathBuf,
    /// Task JSONL.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Integration steps S.
    #[arg(long, default_value_t = 19)]
    pub steps: usize,
    #[arg(long, value_enum, default_value_t = ClampSchedule::LayerShared)]
    pub schedule: ClampSchedule,
    /// Sample used by the single-prompt methods.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    #[arg(long, default_value_t = 0.05)]
    pub tau: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub permissive: bool,
}

#[derive(Args, Debug)]
pub struct IntervenArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long, value_enum)]
    pub kind: InterventionKind,
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Evaluation sets as `name=path.jsonl`.
    #[arg(long = "eval", num_args = 1.., required = true)]
    pub evals: Vec<String>,
    #[arg(long, default_value_t = 1)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the edited model.
    #[arg(long)]
    pub save_model: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ExpArgs {
    /// Run-spec JSON: a toy recipe plus experiment settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Integration steps S.
    #[arg(long = "steps")]
    pub steps: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    /// Directory holding pretrained toy checkpoints.
    #[arg(long, default_value = "neuroloc-cache")]
    pub cache: PathBuf,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

fn set_if_present(v: &mut Value, path: &[&str], new: Value) {
    let mut cur = v;
    for k in &path[..path.len() - 1] {
        match cur.get_mut(*k) {
            Some(next) => cur = next,
            None => return,
        }
    }
    if let Some(slot) = cur.get_mut(path[path.len() - 1]) {
        *slot = new;
    }
}

fn exp_spec(args: &ExpArgs, default: Experiment) -> Result<RunSpec> {
    let mut spec = match &args.config {
        Some(p) => read_json::<RunSpec>(p)?,
        None => RunSpec {
            recipe: ToyRecipe::default(),
            experiment: default,
        },
    };
    let mut v = serde_json::to_value(&spec.experiment)?;
    if let Some(s) = args.seed {
        set_if_present(&mut v, &["seed"], json!(s));
        set_if_present(&mut v, &["trace", "seed"], json!(s));
    }
    if let Some(s) = args.sigma {
        set_if_present(&mut v, &["sigma"], json!(s));
    }
    if let Some(s) = args.steps {
        set_if_present(&mut v, &["attr", "steps"], json!(s));
    }
    spec.experiment = serde_json::from_value(v)?;
    Ok(spec)
}

fn expect_kind(spec: RunSpec, kind: &str) -> Result<RunSpec> {
    if spec.experiment.kind() != kind {
        return Err(Error::Contract(format!(
            "config describes a {} experiment, expected {kind}",
            spec.experiment.kind()
        )));
    }
    Ok(spec)
}

fn run_exp(args: &ExpArgs, default: Experiment, force_kind: bool) -> Result<Value> {
    let kind = default.kind();
    let spec = exp_spec(args, default)?;
    let spec = if force_kind { expect_kind(spec, kind)? } else { spec };
    let path = execute(&spec, &args.cache, &args.out)?;
    Ok(json!({"experiment": spec.experiment.kind(), "result": path}))
}

fn locate(a: &LocateArgs) -> Result<Value> {
    let model = Model::load(&a.model)?;
    let data = load_tasks(&a.data)?;
    let opts = AttrOptions {
        steps: a.steps,
        schedule: a.schedule,
        permissive: a.permissive,
    };
    let sample = || {
        data.get(a.index)
            .ok_or_else(|| Error::Range(format!("sample {} outside {} samples", a.index, data.len())))
    };
    match a.method {
        Method::Cnl => {
            let s = cnl_score(&model, &data, &opts)?;
            write_artifact(&a.out, "score_map", &s)?;
            Ok(json!({"kind": "score_map", "samples": s.meta.samples, "skipped": s.meta.skipped}))
        }
        Method::Kn => {
            let s = attr_single(&model, sample()?, &opts)?;
            write_artifact(&a.out, "score_map", &s)?;
            Ok(json!({"kind": "score_map", "samples": 1}))
        }
        Method::Trace => {
            let s = sample()?;
            let span = s
                .subject
                .ok_or_else(|| Error::Schema("causal tracing needs a subject field".into()))?;
            let cfg = TraceConfig {
                seed: a.seed,
                ..Default::default()
            };
            let g = causal_trace(&model, s, span, &cfg)?;
            write_artifact(&a.out, "trace_grid", &g)?;
            Ok(json!({"kind": "trace_grid", "top_layers": g.top_layers}))
        }
        Method::Circuit => {
            let c = circuit_extract(&model, sample()?, a.tau)?;
            write_artifact(&a.out, "circuit", &c)?;
            Ok(json!({"kind": "circuit", "edges": c.edges.len(), "param_fraction": c.param_fraction}))
        }
    }
}

fn intervene(a: &IntervenArgs) -> Result<Value> {
    let model = Model::load(&a.model)?;
    let mask: NeuronMask = read_artifact(&a.mask, "mask")?;
    let train = match &a.train {
        Some(p) => load_tasks(p)?,
        None => Vec::new(),
    };
    let evals = a
        .evals
        .iter()
        .map(|e| {
            let (name, path) = e
                .split_once('=')
                .ok_or_else(|| Error::Contract(format!("eval `{e}` is not name=path")))?;
            Ok((name.to_string(), load_tasks(Path::new(path))?))
        })
        .collect::<Result<Vec<_>>>()?;
    let spec = InterventionSpec::new(a.kind, mask, a.epochs, a.lr, a.seed);
    let (result, edited) = run_intervention_model(&model, &spec, &train, &evals)?;
    write_artifact(&a.out, "intervention", &result)?;
    if let Some(p) = &a.save_model {
        edited.save(p)?;
    }
    Ok(json!({"kind": "intervention", "evals": result.evals}))
}

fn gen_data(out: &Path, config: Option<&Path>, seed: Option<u64>) -> Result<Value> {
    let mut spec: SuiteSpec = match config {
        Some(p) => read_json(p)?,
        None => SuiteSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let suite = gen_synthetic_suite(&spec)?;
    std::fs::create_dir_all(out)?;
    export_jsonl(&out.join("arith.jsonl"), &Records::Tasks(suite.arith))?;
    export_jsonl(&out.join("code.jsonl"), &Records::Tasks(suite.code))?;
    export_jsonl(&out.join("sentiment.jsonl"), &Records::Tasks(suite.sentiment))?;
    export_jsonl(&out.join("paraphrases.jsonl"), &Records::Paraphrases(suite.paraphrases))?;
    export_jsonl(&out.join("pairs.jsonl"), &Records::Pairs(suite.pairs))?;
    Ok(json!({"out": out, "spec": spec}))
}

fn train(data: &[PathBuf], out: &Path, config: Option<&Path>, seed: Option<u64>, toy: bool) -> Result<Value> {
    if toy {
        let mut r: ToyRecipe = match config {
            Some(p) => read_json(p)?,
            None => ToyRecipe::default(),
        };
        if let Some(s) = seed {
            r.seed = s;
        }
        let dir = out.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let (model, _, report) = load_or_pretrain(&r, dir)?;
        model.save(out)?;
        return Ok(json!({"model": model.checksum(), "report": report}));
    }
    let mut cfg: TrainConfig = match config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let mut samples = Vec::new();
    for p in data {
        samples.extend(load_tasks(p)?);
    }
    let mut model = Model::init(ModelConfig::toy(Tokenizer.vocab_size(), cfg.seed))?;
    let report = train_masked(&mut model, &samples, None, false, &cfg)?;
    model.save(out)?;
    Ok(json!({"model": model.checksum(), "report": report}))
}

pub fn run(cli: Cli) -> Result<Value> {
    match cli.command {
        Command::GenData { out, config, seed } => gen_data(&out, config.as_deref(), seed),
        Command::Train {
            data,
            out,
            config,
            seed,
            toy,
        } => train(&data, &out, config.as_deref(), seed, toy),
        Command::Locate(a) => locate(&a),
        Command::Mask {
            scores,
            sigma,
            spread,
            out,
        } => {
            let s: ScoreMap = read_artifact(&scores, "score_map")?;
            let m = mask_from_scores(&s, sigma, spread)?;
            write_artifact(&out, "mask", &m)?;
            Ok(json!({"kind": "mask", "selected": m.count()}))
        }
        Command::Intervene(a) => intervene(&a),
        Command::Fidelity(a) => run_exp(&a, Experiment::Fidelity(FidelityConfig::default()), true),
        Command::Reliability(a) => run_exp(
            &a,
            Experiment::Reliability {
                family: "arith".into(),
                config: ReliabilityConfig::default(),
            },
            true,
        ),
        Command::Decouple(a) => run_exp(&a, Experiment::Decouple(DecoupleConfig::default()), true),
        Command::Cross(a) => run_exp(&a, Experiment::CrossDataset(CrossConfig::default()), true),
        Command::Run(a) => {
            if a.config.is_none() {
                return Err(Error::Contract("run needs --config".into()));
            }
            run_exp(&a, Experiment::SplitHalf(SplitHalfConfig::default()), false)
        }
        Command::Rerun { run, out, cache } => {
            let p = rerun(&run, &cache, &out)?;
            Ok(json!({"result": p}))
        }
        Command::Report { results, out } => {
            let out = out.unwrap_or_else(|| results.join("report"));
            let idx = emit_report(&results, &out)?;
            Ok(json!({"runs": idx.runs.len(), "out": out}))
        }
    }
}

/// Default configs for the experiments that only `run` reaches.
pub fn example_specs() -> Vec<RunSpec> {
    [
        Experiment::SplitHalf(SplitHalfConfig::default()),
        Experiment::Planted(PlantedConfig::default()),
        Experiment::Capability {
            family: "arith".into(),
            config: CapabilityConfig::default(),
        },
    ]
    .into_iter()
    .map(|experiment| RunSpec {
        recipe: ToyRecipe::default(),
        experiment,
    })
    .collect()
}

/// Parses `args`, runs the command and returns the process exit code; the
/// outcome is printed as JSON, errors to stderr.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            if !e.use_stderr() {
                print!("{e}");
                return 0;
            }
            eprintln!("{}", json!({"error": "usage", "message": e.to_string()}));
            return 2;
        }
    };
    match run(cli) {
        Ok(v) => {
            println!("{v}");
            0
        }
        Err(e) => {
            eprintln!("{}", json!({"error": e.kind(), "message": e.to_string()}));
            1
        }
    }
}
