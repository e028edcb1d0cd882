use neuroloc::attribution::AttrOptions;
use neuroloc::data::Tokenizer;
use neuroloc::experiments::{
    emit_report, execute_on, read_manifest, read_result, toy_data, DecoupleConfig, DecoupleResult, Experiment,
    RunSpec, SplitHalfConfig, ToyData, ToyRecipe, MANIFEST_FILE, RESULT_FILE,
};
use neuroloc::model::{Model, ModelConfig};

fn setup() -> (Model, ToyData) {
    let model = Model::init(ModelConfig::toy(Tokenizer.vocab_size(), 1)).unwrap();
    (model, toy_data(&ToyRecipe::default()).unwrap())
}

fn small_attr() -> AttrOptions {
    AttrOptions {
        steps: 2,
        ..Default::default()
    }
}

fn specs() -> Vec<RunSpec> {
    vec![
        RunSpec {
            recipe: ToyRecipe::default(),
            experiment: Experiment::Decouple(DecoupleConfig {
                attr: small_attr(),
                m: 5,
                max_pairs: Some(3),
            }),
        },
        RunSpec {
            recipe: ToyRecipe::default(),
            experiment: Experiment::SplitHalf(SplitHalfConfig {
                half: 6,
                attr: small_attr(),
                curve_sizes: vec![2, 6],
                ..Default::default()
            }),
        },
    ]
}

#[test]
fn runs_are_byte_identical_and_manifests_describe_them() {
    let (model, data) = setup();
    let dir = tempfile::tempdir().unwrap();
    for (i, spec) in specs().iter().enumerate() {
        let a = dir.path().join(format!("a{i}"));
        let b = dir.path().join(format!("b{i}"));
        execute_on(spec, &model, &data, &a).unwrap();
        execute_on(spec, &model, &data, &b).unwrap();
        assert_eq!(
            std::fs::read(a.join(RESULT_FILE)).unwrap(),
            std::fs::read(b.join(RESULT_FILE)).unwrap()
        );
        let m = read_manifest(&a).unwrap();
        assert_eq!(m.experiment, spec.experiment.kind());
        assert_eq!(m.model_checksum, model.checksum());
        assert!(m.dataset_fingerprints.contains_key("arith.pretrain"));
        let back: RunSpec = serde_json::from_value(m.config).unwrap();
        assert_eq!(&back, spec);
    }
    let r: DecoupleResult = read_result(&dir.path().join("a0")).unwrap();
    assert_eq!(r.pairs, 3);
}

#[test]
fn report_bundles_csvs_and_rejects_mixed_versions() {
    let (model, data) = setup();
    let results = tempfile::tempdir().unwrap();
    for (i, spec) in specs().iter().enumerate() {
        execute_on(spec, &model, &data, &results.path().join(format!("run{i}"))).unwrap();
    }
    let out = results.path().join("report");
    let idx = emit_report(results.path(), &out).unwrap();
    assert_eq!(idx.runs.len(), 2);
    assert_eq!(idx.runs[0].kind, "decouple");
    for e in &idx.runs {
        assert!(!e.csvs.is_empty());
        for f in &e.csvs {
            let text = std::fs::read_to_string(out.join(f)).unwrap();
            assert!(text.lines().count() > 1, "{f} is empty");
        }
    }
    assert!(out.join("index.json").is_file());

    let p = results.path().join("run1").join(MANIFEST_FILE);
    let mut v: serde_json::Value = serde_json::from_slice(&std::fs::read(&p).unwrap()).unwrap();
    v["format_version"] = 2.into();
    std::fs::write(&p, serde_json::to_vec(&v).unwrap()).unwrap();
    let err = emit_report(results.path(), &results.path().join("report2")).unwrap_err();
    assert_eq!(err.kind(), "migration");
    assert!(err.to_string().contains("run1"));
}
