use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// From `(0, 0)` at threshold `+∞` to `(1, 1)`.
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
    pub tpr: f64,
    pub fpr: f64,
    pub precision: f64,
    pub f1: f64,
}

fn class_counts(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Shape {
            op: "auc",
            left: vec![scores.len()],
            right: vec![labels.len()],
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Data("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass {
            positives: pos,
            negatives: neg,
        });
    }
    Ok((pos, neg))
}

/// Descending-score order, ties adjacent.
fn descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    idx
}

/// One ROC vertex per distinct threshold, with counts.
fn sweep(scores: &[f64], labels: &[bool]) -> Vec<(f64, usize, usize)> {
    let idx = descending(scores);
    let mut out = vec![(f64::INFINITY, 0, 0)];
    let (mut tp, mut fp) = (0, 0);
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == s {
            if labels[idx[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push((s, tp, fp));
    }
    out
}

/// Area under the ROC curve by the trapezoid rule over tied-score groups,
/// which equals `P(s⁺ > s⁻) + ½·P(s⁺ = s⁻)`.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = class_counts(scores, labels)?;
    let mut area = 0.0;
    let mut prev = (0usize, 0usize);
    for (_, tp, fp) in sweep(scores, labels) {
        area += (fp - prev.1) as f64 * (tp + prev.0) as f64;
        prev = (tp, fp);
    }
    Ok(area / (2.0 * pos as f64 * neg as f64))
}

pub fn roc_points(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    let (pos, neg) = class_counts(scores, labels)?;
    let points = sweep(scores, labels)
        .into_iter()
        .map(|(threshold, tp, fp)| RocPoint {
            threshold,
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        })
        .collect();
    Ok(RocCurve {
        points,
        auc: auc(scores, labels)?,
    })
}

/// Trapezoid area under a curve's points.
pub fn trapezoid(points: &[RocPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum()
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Predicts positive when `score ≥ threshold`.
pub fn confusion_at(scores: &[f64], labels: &[bool], threshold: f64) -> Confusion {
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let precision = ratio(tp, tp + fp);
    let tpr = ratio(tp, tp + fn_);
    let f1 = if precision + tpr > 0.0 {
        2.0 * precision * tpr / (precision + tpr)
    } else {
        0.0
    };
    Confusion {
        tp,
        fp,
        fn_,
        tn,
        tpr,
        fpr: ratio(fp, fp + tn),
        precision,
        f1,
    }
}

/// Reference pair count, quadratic.
pub fn auc_pairs(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = class_counts(scores, labels)?;
    let mut wins = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            wins += match si.partial_cmp(&sj) {
                Some(Ordering::Greater) => 1.0,
                Some(Ordering::Equal) => 0.5,
                _ => 0.0,
            };
        }
    }
    Ok(wins / (pos * neg) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_examples() {
        let l = [true, true, false, false];
        assert_eq!(auc(&[0.9, 0.8, 0.1, 0.2], &l).unwrap(), 1.0);
        assert_eq!(auc(&[0.5; 4], &l).unwrap(), 0.5);
        assert_eq!(auc(&[0.8, 0.4, 0.6, 0.2], &l).unwrap(), 0.75);
    }

    #[test]
    fn single_class_is_an_error() {
        assert!(matches!(
            auc(&[0.1, 0.2], &[true, true]),
            Err(Error::SingleClass {
                positives: 2,
                negatives: 0
            })
        ));
    }

    #[test]
    fn confusion_closed_form() {
        let c = confusion_at(
            &[0.9, 0.8, 0.7, 0.1, 0.2],
            &[true, true, false, true, false],
            0.5,
        );
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (2, 1, 1, 1));
        assert!((c.precision - 2.0 / 3.0).abs() < 1e-15);
        assert!((c.f1 - 2.0 / 3.0).abs() < 1e-15);
        let c = confusion_at(&[0.9, 0.1], &[true, false], 1.5);
        assert_eq!((c.tpr, c.fpr), (0.0, 0.0));
    }

    #[test]
    fn curve_is_monotone_and_matches_auc() {
        let s = [0.3, 0.3, 0.9, 0.1, 0.5, 0.5, 0.7];
        let l = [true, false, true, false, false, true, false];
        let r = roc_points(&s, &l).unwrap();
        assert_eq!((r.points[0].fpr, r.points[0].tpr), (0.0, 0.0));
        let last = r.points.last().unwrap();
        assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        assert!(r
            .points
            .windows(2)
            .all(|w| w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr));
        assert!((trapezoid(&r.points) - r.auc).abs() < 1e-12);
        assert!((r.auc - auc_pairs(&s, &l).unwrap()).abs() < 1e-12);
    }
}
