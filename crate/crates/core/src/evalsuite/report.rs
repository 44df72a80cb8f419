use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::metrics::{accuracy, f1_score, majority_vote, F1Average};
use crate::datahub::{AnnotationMatrix, FeatureSet};
use crate::error::{Error, Result};
use crate::model::{predict, ModelParams};
use crate::numkernel::{Scalar, Tensor};

/// Anything that maps one sample to either one class per annotator or a
/// single pooled class.
pub trait Predictor {
    fn predict(&self, sample_id: &str, input: &Tensor<f32>) -> Result<Vec<usize>>;
}

impl<T: Scalar> Predictor for ModelParams<T> {
    fn predict(&self, _sample_id: &str, input: &Tensor<f32>) -> Result<Vec<usize>> {
        predict(&input.cast::<T>(), self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub f1_average: F1Average,
    /// Samples with fewer raw labels than this are left out of CoPr.
    pub consensus_min_votes: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            f1_average: F1Average::Macro,
            consensus_min_votes: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorMetrics {
    pub annotator_id: String,
    /// Absent when the annotator labelled none of the evaluated samples.
    pub accuracy: Option<f64>,
    pub f1: Option<f64>,
    pub n_pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusMetrics {
    pub accuracy: f64,
    pub f1: f64,
    pub n_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_annotator: Vec<AnnotatorMetrics>,
    pub avg_accuracy: f64,
    pub avg_f1: f64,
    /// Absent when no sample has enough raw labels.
    pub copr: Option<ConsensusMetrics>,
    pub n_samples: usize,
    pub n_pairs: usize,
    pub options: EvalOptions,
    /// Free-form echo of the configuration that produced the predictions.
    #[serde(default)]
    pub config: serde_json::Value,
}

/// Scores `predictor` on every sample of `annotations`.
pub fn evaluate(
    predictor: &dyn Predictor,
    features: &FeatureSet,
    annotations: &AnnotationMatrix,
    options: &EvalOptions,
) -> Result<MetricsReport> {
    let index = features.index();
    let found: Vec<Option<usize>> = annotations
        .sample_ids()
        .iter()
        .map(|s| index.get(s.as_str()).copied())
        .collect();
    if found.iter().all(Option::is_none) {
        return Err(Error::Contract(
            "no sample in the annotations has features".into(),
        ));
    }
    if let Some(i) = found.iter().position(Option::is_none) {
        return Err(Error::Integrity(format!(
            "sample {} has annotations but no features",
            annotations.sample_ids()[i]
        )));
    }

    let n = annotations.n_annotators();
    let c = annotations.n_classes();
    let mut pair_preds = vec![Vec::new(); n];
    let mut pair_labels = vec![Vec::new(); n];
    let mut cons_preds = Vec::new();
    let mut cons_refs = Vec::new();
    for (s, fi) in found.iter().enumerate() {
        let sid = &annotations.sample_ids()[s];
        let preds = predictor.predict(sid, &features.tensors[fi.expect("checked above")])?;
        if preds.len() != 1 && preds.len() != n {
            return Err(Error::dim(
                "evaluate",
                format!("{} predictions for {n} annotators", preds.len()),
            ));
        }
        let row = annotations.row(s);
        for (k, label) in row.iter().enumerate() {
            if let Some(y) = *label {
                pair_preds[k].push(if preds.len() == 1 { preds[0] } else { preds[k] });
                pair_labels[k].push(y);
            }
        }
        let raw: Vec<usize> = row.iter().flatten().copied().collect();
        if raw.len() >= options.consensus_min_votes.max(1) {
            cons_refs.push(majority_vote(&raw)?);
            cons_preds.push(majority_vote(&preds)?);
        }
    }

    let mut per_annotator = Vec::with_capacity(n);
    for k in 0..n {
        let (p, l) = (&pair_preds[k], &pair_labels[k]);
        let (acc, f1) = if p.is_empty() {
            (None, None)
        } else {
            (Some(accuracy(p, l)?), Some(f1_score(p, l, c, options.f1_average)?))
        };
        per_annotator.push(AnnotatorMetrics {
            annotator_id: annotations.annotator_ids()[k].clone(),
            accuracy: acc,
            f1,
            n_pairs: p.len(),
        });
    }
    let mean = |xs: Vec<f64>| xs.iter().sum::<f64>() / xs.len() as f64;
    let accs: Vec<f64> = per_annotator.iter().filter_map(|a| a.accuracy).collect();
    let f1s: Vec<f64> = per_annotator.iter().filter_map(|a| a.f1).collect();
    if accs.is_empty() {
        return Err(Error::Contract("no annotator has a label on the evaluated samples".into()));
    }
    let copr = if cons_refs.is_empty() {
        None
    } else {
        Some(ConsensusMetrics {
            accuracy: accuracy(&cons_preds, &cons_refs)?,
            f1: f1_score(&cons_preds, &cons_refs, c, options.f1_average)?,
            n_samples: cons_refs.len(),
        })
    };
    Ok(MetricsReport {
        n_pairs: per_annotator.iter().map(|a| a.n_pairs).sum(),
        per_annotator,
        avg_accuracy: mean(accs),
        avg_f1: mean(f1s),
        copr,
        n_samples: annotations.n_samples(),
        options: *options,
        config: serde_json::Value::Null,
    })
}

/// Returns stored labels; scores 1.0 on its own annotations.
#[derive(Debug, Clone)]
pub struct EchoPredictor {
    labels: HashMap<String, Vec<usize>>,
}

impl EchoPredictor {
    /// Unobserved pairs echo the sample's consensus label.
    pub fn new(annotations: &AnnotationMatrix) -> Result<Self> {
        let mut labels = HashMap::new();
        for (s, sid) in annotations.sample_ids().iter().enumerate() {
            let row = annotations.row(s);
            let raw: Vec<usize> = row.iter().flatten().copied().collect();
            let fill = if raw.is_empty() { 0 } else { majority_vote(&raw)? };
            labels.insert(sid.clone(), row.iter().map(|l| l.unwrap_or(fill)).collect());
        }
        Ok(Self { labels })
    }
}

impl Predictor for EchoPredictor {
    fn predict(&self, sample_id: &str, _input: &Tensor<f32>) -> Result<Vec<usize>> {
        self.labels
            .get(sample_id)
            .cloned()
            .ok_or_else(|| Error::Index(format!("unknown sample {sample_id}")))
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

impl MetricsReport {
    /// Rows Acc and F1; columns A_1..A_n, Avg, CoPr.
    pub fn to_table(&self) -> String {
        let mut header = vec!["Metric".to_string()];
        header.extend((1..=self.per_annotator.len()).map(|k| format!("A_{k}")));
        header.extend(["Avg".to_string(), "CoPr".to_string()]);
        let mut acc = vec!["Acc".to_string()];
        let mut f1 = vec!["F1".to_string()];
        for a in &self.per_annotator {
            acc.push(cell(a.accuracy));
            f1.push(cell(a.f1));
        }
        acc.push(cell(Some(self.avg_accuracy)));
        f1.push(cell(Some(self.avg_f1)));
        acc.push(cell(self.copr.as_ref().map(|c| c.accuracy)));
        f1.push(cell(self.copr.as_ref().map(|c| c.f1)));
        let rows = [header, acc, f1];
        let widths: Vec<usize> = (0..rows[0].len())
            .map(|j| rows.iter().map(|r| r[j].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for r in &rows {
            let line: Vec<String> = r
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(j, (s, &w))| if j == 0 { format!("{s:<w$}") } else { format!("{s:>w$}") })
                .collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(rows: &[&[Option<usize>]], n_classes: usize) -> AnnotationMatrix {
        let n = rows[0].len();
        let mut m = AnnotationMatrix::new(
            (0..rows.len()).map(|i| format!("s{i}")).collect(),
            (0..n).map(|k| format!("A{}", k + 1)).collect(),
            (0..n_classes).map(|c| format!("c{c}")).collect(),
        )
        .unwrap();
        for (s, r) in rows.iter().enumerate() {
            for (k, l) in r.iter().enumerate() {
                if let Some(y) = l {
                    m.insert(s, k, *y).unwrap();
                }
            }
        }
        m
    }

    fn features(n: usize) -> FeatureSet {
        FeatureSet::new(
            (0..n).map(|i| format!("s{i}")).collect(),
            (0..n).map(|_| Tensor::zeros(&[1, 2])).collect(),
        )
        .unwrap()
    }

    struct Fixed(Vec<Vec<usize>>);
    impl Predictor for Fixed {
        fn predict(&self, sid: &str, _: &Tensor<f32>) -> Result<Vec<usize>> {
            Ok(self.0[sid[1..].parse::<usize>().unwrap()].clone())
        }
    }

    #[test]
    fn echo_predictor_scores_one() {
        let m = matrix(&[&[Some(0), Some(1), None], &[Some(2), None, Some(2)], &[None, Some(1), Some(0)]], 3);
        let r = evaluate(&EchoPredictor::new(&m).unwrap(), &features(3), &m, &EvalOptions::default()).unwrap();
        assert!(r.per_annotator.iter().all(|a| a.accuracy == Some(1.0) && a.f1 == Some(1.0)));
        assert_eq!((r.avg_accuracy, r.avg_f1), (1.0, 1.0));
        assert_eq!(r.n_pairs, 6);
    }

    #[test]
    fn only_observed_pairs_count() {
        let m = matrix(&[&[Some(0), None], &[Some(1), Some(1)]], 2);
        // Annotator 2's wrong prediction on s0 has no label and is ignored.
        let r = evaluate(&Fixed(vec![vec![0, 1], vec![1, 1]]), &features(2), &m, &EvalOptions::default()).unwrap();
        assert_eq!(r.per_annotator[1].n_pairs, 1);
        assert_eq!(r.per_annotator[1].accuracy, Some(1.0));
    }

    #[test]
    fn consensus_uses_majority_of_predictions_and_raw_labels() {
        let m = matrix(
            &[&[Some(0), Some(0), Some(1)], &[Some(1), Some(2), None], &[Some(2), None, None]],
            3,
        );
        let preds = vec![vec![0, 1, 1], vec![1, 2, 0], vec![2, 2, 2]];
        let r = evaluate(&Fixed(preds), &features(3), &m, &EvalOptions::default()).unwrap();
        let c = r.copr.unwrap();
        // s0: ref 0, pred vote 1. s1: ref 1 (tie 1/2), pred vote 0 (three-way tie). s2 excluded.
        assert_eq!(c.n_samples, 2);
        assert_eq!(c.accuracy, 0.0);
    }

    #[test]
    fn pooled_prediction_is_used_directly() {
        let m = matrix(&[&[Some(0), Some(0)], &[Some(1), Some(0)]], 2);
        let r = evaluate(&Fixed(vec![vec![0], vec![0]]), &features(2), &m, &EvalOptions::default()).unwrap();
        assert_eq!(r.copr.unwrap().accuracy, 1.0);
        assert_eq!(r.per_annotator[0].accuracy, Some(0.5));
        assert_eq!(r.per_annotator[1].accuracy, Some(1.0));
    }

    #[test]
    fn single_annotator_has_no_consensus() {
        let m = matrix(&[&[Some(0)], &[Some(1)], &[Some(1)]], 2);
        let r = evaluate(&Fixed(vec![vec![0], vec![0], vec![1]]), &features(3), &m, &EvalOptions::default()).unwrap();
        assert!(r.copr.is_none());
        assert_eq!(r.avg_accuracy, r.per_annotator[0].accuracy.unwrap());
    }

    #[test]
    fn consensus_ignores_annotator_order() {
        let m = matrix(&[&[Some(0), Some(1), Some(1)], &[Some(2), Some(2), Some(0)]], 3);
        let preds = vec![vec![0, 1, 2], vec![2, 0, 0]];
        let base = evaluate(&Fixed(preds.clone()), &features(2), &m, &EvalOptions::default()).unwrap();
        let perm = [2, 0, 1];
        let pm = matrix(
            &[
                &perm.map(|k| m.get(0, k)),
                &perm.map(|k| m.get(1, k)),
            ],
            3,
        );
        let pp = preds.iter().map(|p| perm.iter().map(|&k| p[k]).collect()).collect();
        let permuted = evaluate(&Fixed(pp), &features(2), &pm, &EvalOptions::default()).unwrap();
        assert_eq!(base.copr, permuted.copr);
    }

    #[test]
    fn missing_overlap_is_a_contract_error() {
        let m = matrix(&[&[Some(0)]], 2);
        let fs = FeatureSet::new(vec!["other".into()], vec![Tensor::zeros(&[1, 2])]).unwrap();
        let r = evaluate(&EchoPredictor::new(&m).unwrap(), &fs, &m, &EvalOptions::default());
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn table_columns_and_values_match_json() {
        let m = matrix(&[&[Some(0), Some(1)], &[Some(1), Some(1)]], 2);
        let r = evaluate(&Fixed(vec![vec![0, 0], vec![1, 1]]), &features(2), &m, &EvalOptions::default()).unwrap();
        let table = r.to_table();
        let lines: Vec<Vec<&str>> = table.lines().map(|l| l.split_whitespace().collect()).collect();
        assert_eq!(lines[0], ["Metric", "A_1", "A_2", "Avg", "CoPr"]);
        let acc: Vec<f64> = lines[1][1..].iter().map(|s| s.parse().unwrap()).collect();
        assert_eq!(acc[0], 1.0);
        assert_eq!(acc[1], 0.5);
        assert_eq!(format!("{:.4}", acc[2]), format!("{:.4}", r.avg_accuracy));
    }
}
