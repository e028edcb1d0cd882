//! Set-comparison statistics, coincidence rates, IPP and task accuracy.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::TaskSample;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::neurons::NeuronMask;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetMetrics {
    pub overlap: f64,
    pub iou: f64,
}

/// Mean directional containment and intersection-over-union of two masks.
pub fn set_metrics(a: &NeuronMask, b: &NeuronMask) -> Result<SetMetrics> {
    let inter = a.intersection_count(b)? as f64;
    let (na, nb) = (a.count(), b.count());
    if na == 0 || nb == 0 {
        return Err(Error::UndefinedMetric(format!(
            "overlap of masks with {na} and {nb} selected neurons"
        )));
    }
    let union = a.union_count(b)? as f64;
    Ok(SetMetrics {
        overlap: (inter / na as f64 + inter / nb as f64) / 2.0,
        iou: inter / union,
    })
}

/// Fraction of all neurons selected.
pub fn neuron_ratio(m: &NeuronMask) -> f64 {
    m.count() as f64 / (m.layers * m.width) as f64
}

/// Expected overlap between two independent uniform masks of the given sizes.
pub fn random_overlap(na: usize, nb: usize, total: usize) -> f64 {
    // E|a ∩ b| = na·nb/total, so each containment ratio averages nb/total and na/total
    (na as f64 + nb as f64) / (2.0 * total as f64)
}

/// Coincidence of located sets across framings, under both normalisations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coincidence {
    /// Intersection counts divided by `n·L·J` (cross-framing) or `L·J` (within framing).
    pub literal: f64,
    /// Mean pairwise overlap of the same sets.
    pub pairwise_overlap: f64,
}

/// Coincidence rate between framings `t` and `t_star` (1-based) of per-sample located sets.
pub fn coincidence_rate(framings: &[Vec<NeuronMask>], t: usize, t_star: usize) -> Result<Coincidence> {
    let get = |i: usize| {
        framings
            .get(i.wrapping_sub(1))
            .ok_or_else(|| Error::Range(format!("framing {i} outside 1..={}", framings.len())))
    };
    let (st, ss) = (get(t)?, get(t_star)?);
    if st.is_empty() || st.len() != ss.len() {
        return Err(Error::Contract(format!(
            "framings hold {} and {} located sets",
            st.len(),
            ss.len()
        )));
    }
    if let Some(k) = st.iter().chain(ss).position(NeuronMask::is_empty) {
        return Err(Error::UndefinedMetric(format!("located set {k} is empty")));
    }
    let n = st.len();
    let (layers, width) = st[0].dims();
    let total = (layers * width) as f64;
    if t != t_star {
        let mut inter = 0usize;
        let mut ov = 0.0;
        for (a, b) in st.iter().zip(ss) {
            inter += a.intersection_count(b)?;
            ov += set_metrics(a, b)?.overlap;
        }
        Ok(Coincidence {
            literal: inter as f64 / (n as f64 * total),
            pairwise_overlap: ov / n as f64,
        })
    } else {
        let mut common = st[0].clone();
        for m in &st[1..] {
            common = common.intersect(m)?;
        }
        let pairwise_overlap = if n == 1 {
            1.0
        } else {
            let mut sum = 0.0;
            for i in 0..n {
                for j in i + 1..n {
                    sum += set_metrics(&st[i], &st[j])?.overlap;
                }
            }
            sum / (n * (n - 1) / 2) as f64
        };
        Ok(Coincidence {
            literal: common.count() as f64 / total,
            pairwise_overlap,
        })
    }
}

/// Located-arm performance minus the best random arm.
pub fn ipp(located: f64, random: &[f64]) -> Result<f64> {
    let best = random
        .iter()
        .copied()
        .reduce(f64::max)
        .ok_or_else(|| Error::Contract("IPP needs at least one random arm".into()))?;
    Ok(located - best)
}

/// Exact-match rate of greedy decoding, each answer decoded to its reference length.
pub fn accuracy(model: &Model, eval: &[TaskSample]) -> Result<f64> {
    if eval.is_empty() {
        return Err(Error::Contract("accuracy needs a nonempty eval set".into()));
    }
    let prompts: Vec<Vec<usize>> = eval.iter().map(|s| s.prompt.clone()).collect();
    let steps: Vec<usize> = eval.iter().map(|s| s.answer.len()).collect();
    let out = model.greedy_batch(&prompts, &steps)?;
    let hits = out.iter().zip(eval).filter(|(o, s)| **o == s.answer).count();
    Ok(hits as f64 / eval.len() as f64)
}

/// One named value, or the reason it is undefined.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub name: String,
    pub value: Option<f64>,
    pub inputs: String,
    pub formula: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

impl MetricReport {
    pub fn from_result(name: &str, inputs: &str, formula: &str, r: Result<f64>) -> Self {
        let (value, reason) = match r {
            Ok(v) => (Some(v), None),
            Err(e) => (None, Some(e.to_string())),
        };
        MetricReport {
            name: name.into(),
            value,
            inputs: inputs.into(),
            formula: formula.into(),
            reason,
        }
    }
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["name", "value", "inputs", "formula", "reason"]).map_err(csv_err)?;
    for r in rows {
        let v = r.value.map(|v| v.to_string()).unwrap_or_default();
        w.write_record([
            r.name.as_str(),
            v.as_str(),
            r.inputs.as_str(),
            r.formula.as_str(),
            r.reason.as_deref().unwrap_or(""),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neurons::NeuronId;

    fn mask(ids: &[usize]) -> NeuronMask {
        NeuronMask::from_ids(1, 10, ids.iter().map(|&i| NeuronId::new(0, i))).unwrap()
    }

    #[test]
    fn set_metric_examples() {
        let a = mask(&[1, 2, 3]);
        assert_eq!(set_metrics(&a, &a).unwrap(), SetMetrics { overlap: 1.0, iou: 1.0 });
        let m = set_metrics(&a, &mask(&[2, 3, 4])).unwrap();
        assert!((m.overlap - 2.0 / 3.0).abs() < 1e-15 && (m.iou - 0.5).abs() < 1e-15);
        assert_eq!(set_metrics(&a, &mask(&[5, 6])).unwrap(), SetMetrics { overlap: 0.0, iou: 0.0 });
        assert!(matches!(set_metrics(&a, &mask(&[])), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn neuron_ratio_bounds() {
        assert_eq!(neuron_ratio(&NeuronMask::full(3, 4)), 1.0);
        assert_eq!(neuron_ratio(&NeuronMask::empty(3, 4)), 0.0);
    }

    #[test]
    fn coincidence_examples() {
        let one = vec![vec![mask(&[1, 2])], vec![mask(&[2, 3])]];
        let c = coincidence_rate(&one, 1, 1).unwrap();
        assert_eq!(c.literal, neuron_ratio(&one[0][0]));
        let same = vec![vec![mask(&[4, 5]); 3], vec![mask(&[4, 5]); 3]];
        assert_eq!(coincidence_rate(&same, 1, 2).unwrap().pairwise_overlap, 1.0);
        assert_eq!(coincidence_rate(&same, 2, 2).unwrap().pairwise_overlap, 1.0);
        let c12 = coincidence_rate(&one, 1, 2).unwrap();
        assert!((c12.literal - 0.1).abs() < 1e-15);
        assert!((c12.pairwise_overlap - 0.5).abs() < 1e-15);
        let empty = vec![vec![mask(&[])], vec![mask(&[1])]];
        assert!(matches!(coincidence_rate(&empty, 1, 2), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn ipp_examples() {
        assert!((ipp(0.30, &[0.10, 0.12]).unwrap() - 0.18).abs() < 1e-12);
        assert_eq!(ipp(0.2, &[0.2, 0.1]).unwrap(), 0.0);
        assert!(ipp(0.2, &[]).is_err());
    }

    #[test]
    fn random_overlap_expectation() {
        assert_eq!(random_overlap(10, 10, 100), 0.1);
    }
}
