use std::path::Path;

use clap::Parser;
use neuroloc::artifact::read_artifact;
use neuroloc::attribution::ScoreMap;
use neuroloc::cli::{main_with, run, Cli};
use neuroloc::data::load_tasks;
use neuroloc::neurons::NeuronMask;

fn call(args: &[&str]) -> neuroloc::Result<serde_json::Value> {
    let mut full = vec!["neuroloc"];
    full.extend_from_slice(args);
    run(Cli::try_parse_from(full).expect("arguments parse"))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_train_locate_mask_intervene() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("suite.json"),
        r#"{"arith": 12, "code": 6, "sentiment": 6, "pairs": 4, "paraphrase_groups": 2, "max_operand": 9}"#,
    )
    .unwrap();
    let data = d.join("data");
    call(&["gen-data", "--out", s(&data), "--config", s(&d.join("suite.json")), "--seed", "3"]).unwrap();
    let arith = load_tasks(&data.join("arith.jsonl")).unwrap();
    assert_eq!(arith.len(), 12);

    std::fs::write(d.join("train.json"), r#"{"epochs": 1, "lr": 0.001, "batch_size": 4}"#).unwrap();
    let model = d.join("model.nlck");
    let out = call(&[
        "train",
        "--data",
        s(&data.join("arith.jsonl")),
        "--out",
        s(&model),
        "--config",
        s(&d.join("train.json")),
    ])
    .unwrap();
    assert!(out["report"]["steps"].as_u64().unwrap() > 0);

    let scores = d.join("scores.json");
    call(&[
        "locate",
        "--method",
        "cnl",
        "--model",
        s(&model),
        "--data",
        s(&data.join("arith.jsonl")),
        "--steps",
        "2",
        "--out",
        s(&scores),
    ])
    .unwrap();
    let map: ScoreMap = read_artifact(&scores, "score_map").unwrap();
    assert_eq!(map.meta.samples, 12);
    assert_eq!(map.meta.steps, 2);

    let mask = d.join("mask.json");
    let out = call(&["mask", "--scores", s(&scores), "--sigma", "1", "--spread", "stddev", "--out", s(&mask)]).unwrap();
    let m: NeuronMask = read_artifact(&mask, "mask").unwrap();
    assert_eq!(out["selected"].as_u64().unwrap() as usize, m.count());
    assert_eq!(m.sigma, Some(1.0));

    let eval = format!("arith={}", s(&data.join("arith.jsonl")));
    let out = call(&[
        "intervene",
        "--model",
        s(&model),
        "--mask",
        s(&mask),
        "--kind",
        "erase",
        "--eval",
        &eval,
        "--out",
        s(&d.join("erase.json")),
    ])
    .unwrap();
    assert_eq!(out["evals"][0]["name"], "arith");

    for method in ["kn", "trace", "circuit"] {
        let o = d.join(format!("{method}.json"));
        call(&[
            "locate",
            "--method",
            method,
            "--model",
            s(&model),
            "--data",
            s(&data.join("arith.jsonl")),
            "--steps",
            "2",
            "--out",
            s(&o),
        ])
        .unwrap();
        assert!(o.is_file());
    }
}

#[test]
fn errors_carry_kind_and_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let err = call(&["mask", "--scores", s(&missing), "--out", s(&dir.path().join("m.json"))]).unwrap_err();
    assert_eq!(err.kind(), "io");
    assert_eq!(
        main_with(["neuroloc", "mask", "--scores", s(&missing), "--out", "m.json"]),
        1
    );
    assert_eq!(main_with(["neuroloc", "locate", "--method", "bogus"]), 2);
    assert_eq!(main_with(["neuroloc", "--help"]), 0);

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"experiment": "decouple", "m": 5}"#).unwrap();
    let err = call(&["fidelity", "--config", s(&bad), "--out", s(&dir.path().join("r"))]).unwrap_err();
    assert_eq!(err.kind(), "contract");
}

#[test]
fn locate_rejects_out_of_range_sample() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    call(&["gen-data", "--out", s(d)]).unwrap();
    std::fs::write(d.join("train.json"), r#"{"epochs": 0}"#).unwrap();
    let model = d.join("m.nlck");
    call(&[
        "train",
        "--data",
        s(&d.join("code.jsonl")),
        "--out",
        s(&model),
        "--config",
        s(&d.join("train.json")),
    ])
    .unwrap();
    let err = call(&[
        "locate",
        "--method",
        "kn",
        "--model",
        s(&model),
        "--data",
        s(&d.join("code.jsonl")),
        "--index",
        "100000",
        "--out",
        s(&d.join("k.json")),
    ])
    .unwrap_err();
    assert_eq!(err.kind(), "range");
}
