use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How per-class F1 scores are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum F1Average {
    #[default]
    Macro,
    Micro,
}

fn check_pair(preds: &[usize], labels: &[usize]) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::Contract("metric over an empty set".into()));
    }
    if preds.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    Ok(())
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_pair(preds, labels)?;
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Per-class F1 averaged over classes that occur in either `preds` or
/// `labels`. A class with P + R = 0 scores 0.
pub fn macro_f1(preds: &[usize], labels: &[usize], n_classes: usize) -> Result<f64> {
    let (tp, fp, fn_) = confusion(preds, labels, n_classes)?;
    let mut sum = 0.0;
    let mut present = 0usize;
    for c in 0..n_classes {
        if tp[c] + fp[c] + fn_[c] == 0 {
            continue;
        }
        present += 1;
        sum += f1_from_counts(tp[c], fp[c], fn_[c]);
    }
    Ok(sum / present as f64)
}

/// Pooled-count F1. For single-label multiclass data this equals accuracy.
pub fn micro_f1(preds: &[usize], labels: &[usize], n_classes: usize) -> Result<f64> {
    let (tp, fp, fn_) = confusion(preds, labels, n_classes)?;
    Ok(f1_from_counts(
        tp.iter().sum(),
        fp.iter().sum(),
        fn_.iter().sum(),
    ))
}

pub fn f1_score(preds: &[usize], labels: &[usize], n_classes: usize, average: F1Average) -> Result<f64> {
    match average {
        F1Average::Macro => macro_f1(preds, labels, n_classes),
        F1Average::Micro => micro_f1(preds, labels, n_classes),
    }
}

fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    // 2PR/(P+R) simplifies to 2tp/(2tp+fp+fn), and is 0 whenever tp is.
    if tp == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    }
}

type Counts = (Vec<usize>, Vec<usize>, Vec<usize>);

fn confusion(preds: &[usize], labels: &[usize], n_classes: usize) -> Result<Counts> {
    check_pair(preds, labels)?;
    let mut tp = vec![0; n_classes];
    let mut fp = vec![0; n_classes];
    let mut fn_ = vec![0; n_classes];
    for (&p, &l) in preds.iter().zip(labels) {
        if p >= n_classes || l >= n_classes {
            return Err(Error::Index(format!(
                "class index {} outside {n_classes} classes",
                p.max(l)
            )));
        }
        if p == l {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[l] += 1;
        }
    }
    Ok((tp, fp, fn_))
}

/// Most frequent label; ties go to the lowest class index.
pub fn majority_vote(labels: &[usize]) -> Result<usize> {
    let Some(&max) = labels.iter().max() else {
        return Err(Error::Contract("majority vote over no labels".into()));
    };
    let mut counts = vec![0usize; max + 1];
    for &l in labels {
        counts[l] += 1;
    }
    let mut best = 0;
    for (c, &n) in counts.iter().enumerate() {
        if n > counts[best] {
            best = c;
        }
    }
    Ok(best)
}

/// One-sided sign test: probability of at least `wins` successes out of
/// `trials` fair coin flips.
pub fn sign_test_p(wins: usize, trials: usize) -> f64 {
    if wins == 0 {
        return 1.0;
    }
    let mut tail = 0.0;
    for k in wins..=trials {
        tail += binomial(trials, k);
    }
    tail / 2f64.powi(trials as i32)
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}
