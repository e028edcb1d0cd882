use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::commonality::{CapabilityResult, CrossResult, Matrix, PlantedResult, SplitHalfResult};
use super::decouple::DecoupleResult;
use super::fidelity::FidelityResult;
use super::manifest::{RunManifest, MANIFEST_FILE, RESULT_FILE};
use super::reliability::ReliabilityResult;
use crate::artifact::{write_artifact, Artifact, ARTIFACT_FORMAT_VERSION};
use crate::attribution::ScoreMap;
use crate::error::{Error, Result};
use crate::metrics::{csv_err, write_metrics_csv, MetricReport};

pub const HEATMAP_BUCKET: usize = 100;

/// `(layer, bucket, max |score|)` over consecutive runs of `bucket` neurons.
pub fn heatmap_rows(map: &ScoreMap, bucket: usize) -> Vec<(usize, usize, f64)> {
    let mut out = Vec::new();
    for l in 0..map.layers {
        let row = &map.scores[l * map.width..(l + 1) * map.width];
        for (b, chunk) in row.chunks(bucket.max(1)).enumerate() {
            out.push((l, b, chunk.iter().fold(0.0f64, |m, s| m.max(s.abs()))));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub run: String,
    pub kind: String,
    pub config_checksum: String,
    pub model_checksum: String,
    pub result_sha256: String,
    pub csvs: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportIndex {
    pub runs: Vec<IndexEntry>,
}

fn version_of(path: &Path) -> Result<Option<u64>> {
    let raw: serde_json::Value = serde_json::from_slice(&std::fs::read(path)?)?;
    Ok(raw.get("format_version").and_then(serde_json::Value::as_u64))
}

fn run_dirs(results: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(results)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    dirs.retain(|d| d.join(RESULT_FILE).is_file() && d.join(MANIFEST_FILE).is_file());
    dirs.sort();
    Ok(dirs)
}

fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(&r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn heatmap_csv(path: &Path, map: &ScoreMap) -> Result<()> {
    write_csv(
        path,
        &["layer", "bucket", "max_abs_score"],
        heatmap_rows(map, HEATMAP_BUCKET)
            .into_iter()
            .map(|(l, b, v)| vec![l.to_string(), b.to_string(), v.to_string()]),
    )
}

fn matrix_csv(path: &Path, m: &Matrix) -> Result<()> {
    let mut rows = Vec::new();
    for (r, row) in m.values.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            rows.push(vec![
                m.labels[r].clone(),
                m.labels[c].clone(),
                v.map(|x| x.to_string()).unwrap_or_default(),
            ]);
        }
    }
    write_csv(path, &["row", "col", "value"], rows)
}

fn metric(name: &str, inputs: &str, formula: &str, v: Option<f64>) -> MetricReport {
    MetricReport::from_result(
        name,
        inputs,
        formula,
        v.ok_or_else(|| Error::UndefinedMetric(format!("{name} was not computed"))),
    )
}

fn payload<T: DeserializeOwned>(raw: serde_json::Value) -> Result<T> {
    Ok(serde_json::from_value::<Artifact<T>>(raw)?.payload)
}

/// Per-figure CSVs for one run; returns the file names written.
fn emit_run(kind: &str, run: &str, raw: serde_json::Value, out: &Path, inputs: &str) -> Result<Vec<String>> {
    let mut files = Vec::new();
    let mut file = |suffix: &str| {
        let name = format!("{run}_{suffix}.csv");
        files.push(name.clone());
        out.join(name)
    };
    match kind {
        "split_half" => {
            let r: SplitHalfResult = payload(raw)?;
            heatmap_csv(&file("heatmap_a"), &r.scores[0])?;
            heatmap_csv(&file("heatmap_b"), &r.scores[1])?;
            write_csv(
                &file("curve"),
                &["size", "selected", "overlap"],
                r.curve.iter().map(|p| {
                    vec![
                        p.size.to_string(),
                        p.selected.to_string(),
                        p.overlap.map(|x| x.to_string()).unwrap_or_default(),
                    ]
                }),
            )?;
            write_metrics_csv(
                &file("metrics"),
                &[
                    r.overlap.clone(),
                    r.iou.clone(),
                    metric("random_overlap", inputs, "(|a|+|b|)/(2N)", Some(r.random_overlap)),
                ],
            )?;
        }
        "capability" => {
            let r: CapabilityResult = payload(raw)?;
            heatmap_csv(&file("heatmap"), &r.scores)?;
            let mut rows = vec![
                metric("located_erase_drop", inputs, "before - after", Some(r.erase.located_drop)),
                metric("mean_random_erase_drop", inputs, "mean(before - after)", Some(r.erase.mean_random_drop)),
                metric("param_fraction", inputs, "owned / total", Some(r.param_fraction)),
            ];
            for e in &r.enhance {
                rows.push(metric(&format!("ipp_cnl_epoch{}", e.epochs), inputs, "located - max(random)", Some(e.ipp_cnl)));
                rows.push(metric(&format!("ipp_kn_epoch{}", e.epochs), inputs, "kn - max(random)", e.ipp_kn));
            }
            write_metrics_csv(&file("metrics"), &rows)?;
        }
        "cross_dataset" => {
            let r: CrossResult = payload(raw)?;
            matrix_csv(&file("enhance"), &r.enhance)?;
            matrix_csv(&file("erase"), &r.erase)?;
            matrix_csv(&file("overlap"), &r.overlap)?;
        }
        "reliability" => {
            let r: ReliabilityResult = payload(raw)?;
            if let Some(l) = &r.layers.value {
                write_csv(
                    &file("layers"),
                    &["layer", "success"],
                    l.success.iter().enumerate().map(|(i, s)| vec![i.to_string(), s.to_string()]),
                )?;
            }
        }
        "fidelity" => {
            let r: FidelityResult = payload(raw)?;
            let rows: Vec<MetricReport> = r
                .locators
                .iter()
                .map(|l| {
                    let name = serde_json::to_value(l.locator).ok().and_then(|v| v.as_str().map(String::from));
                    metric(&name.unwrap_or_default(), inputs, "mean pairwise overlap", l.mean_overlap)
                })
                .collect();
            write_metrics_csv(&file("metrics"), &rows)?;
        }
        "decouple" => {
            let r: DecoupleResult = payload(raw)?;
            let mut rows = Vec::new();
            for (tag, c) in [("1_2", r.cross), ("1_1", r.within_first), ("2_2", r.within_second)] {
                rows.push(metric(&format!("coincidence_{tag}_literal"), inputs, "intersection / (n L J)", Some(c.literal)));
                rows.push(metric(&format!("coincidence_{tag}_pairwise"), inputs, "mean pairwise overlap", Some(c.pairwise_overlap)));
            }
            write_metrics_csv(&file("metrics"), &rows)?;
        }
        "planted" => {
            let r: PlantedResult = payload(raw)?;
            write_metrics_csv(
                &file("metrics"),
                &[
                    metric("recovered_fraction", inputs, "|planted ∩ located| / |planted|", Some(r.recovered_fraction)),
                    metric("chance", inputs, "|planted| / N", Some(r.chance)),
                ],
            )?;
        }
        "score_map" => {
            let r: ScoreMap = payload(raw)?;
            heatmap_csv(&file("heatmap"), &r)?;
        }
        _ => {}
    }
    Ok(files)
}

/// Consolidated index and CSV bundle for every run directory under `results`.
pub fn emit_report(results: &Path, out: &Path) -> Result<ReportIndex> {
    let dirs = run_dirs(results)?;
    let mut offenders = Vec::new();
    for d in &dirs {
        for f in [RESULT_FILE, MANIFEST_FILE] {
            let p = d.join(f);
            match version_of(&p)? {
                Some(v) if v == ARTIFACT_FORMAT_VERSION as u64 => {}
                v => offenders.push(format!(
                    "{}: format_version {}",
                    p.display(),
                    v.map(|v| v.to_string()).unwrap_or_else(|| "missing".into())
                )),
            }
        }
    }
    if !offenders.is_empty() {
        return Err(Error::Migration(offenders));
    }
    std::fs::create_dir_all(out)?;
    let mut index = ReportIndex::default();
    for d in &dirs {
        let run = d.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let manifest: RunManifest = payload(serde_json::from_slice(&std::fs::read(d.join(MANIFEST_FILE))?)?)?;
        let raw: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join(RESULT_FILE))?)?;
        let kind = raw.get("kind").and_then(|k| k.as_str()).unwrap_or_default().to_string();
        let csvs = emit_run(&kind, &run, raw, out, &manifest.result_sha256)?;
        index.runs.push(IndexEntry {
            run,
            kind,
            config_checksum: manifest.config_checksum,
            model_checksum: manifest.model_checksum,
            result_sha256: manifest.result_sha256,
            csvs,
        });
    }
    write_artifact(&out.join("index.json"), "report_index", &index)?;
    Ok(index)
}
