// SPDX-License-Identifier: Apache-2.0

//! Confusion-matrix metrics and best-F1 threshold selection.

use serde::{Deserialize, Serialize};

use crate::error::{MelodyError, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn from_predictions(predictions: &[bool], labels: &[bool]) -> Self {
        let mut c = Self::default();
        for (&p, &y) in predictions.iter().zip(labels) {
            c.record(p, y);
        }
        c
    }

    pub fn record(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fn_ += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// `2 tp / (2 tp + fp + fn)`, zero when there are no true positives.
    pub fn f1(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    pub fn fpr(&self) -> f64 {
        ratio(self.fp, self.fp + self.tn)
    }

    pub fn specificity(&self) -> f64 {
        ratio(self.tn, self.fp + self.tn)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// A chosen decision threshold (`score >= threshold` is anomalous).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdChoice<F> {
    pub threshold: F,
    pub confusion: Confusion,
}

impl<F> ThresholdChoice<F> {
    pub fn f1(&self) -> f64 {
        self.confusion.f1()
    }
}

/// Midpoints between consecutive distinct scores, plus 0 and 1, ascending.
pub fn candidate_thresholds<F: Scalar>(scores: &[F]) -> Vec<F> {
    let mut sorted: Vec<F> = scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    sorted.dedup();
    let mut out: Vec<F> = sorted.windows(2).map(|w| (w[0] + w[1]) / F::lit(2.0)).collect();
    out.push(F::zero());
    out.push(F::one());
    out.sort_by(|a, b| a.partial_cmp(b).expect("finite thresholds"));
    out.dedup();
    out
}

/// Threshold with the best F1; ties go to lower FPR, then lower threshold.
pub fn select_threshold<F: Scalar>(scores: &[F], labels: &[bool]) -> Result<ThresholdChoice<F>> {
    let eligible = vec![true; scores.len()];
    select_threshold_gated(scores, &eligible, labels)
}

/// Like [`select_threshold`], but entities with `eligible[i] == false` are
/// predicted normal at every threshold; candidates come from eligible scores.
pub fn select_threshold_gated<F: Scalar>(
    scores: &[F],
    eligible: &[bool],
    labels: &[bool],
) -> Result<ThresholdChoice<F>> {
    if scores.len() != labels.len() || eligible.len() != labels.len() {
        return Err(MelodyError::Dimension {
            expected: labels.len(),
            got: scores.len(),
        });
    }
    let positives = labels.iter().filter(|&&y| y).count();
    if positives == 0 || positives == labels.len() {
        return Err(MelodyError::Data("threshold selection needs both classes".into()));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(MelodyError::Data(format!("non-finite score {s}")));
    }
    let negatives = labels.len() - positives;

    // Eligible scores sorted descending with running positive counts.
    let mut ranked: Vec<(F, bool)> = scores
        .iter()
        .zip(labels)
        .zip(eligible)
        .filter(|(_, &e)| e)
        .map(|((&s, &y), _)| (s, y))
        .collect();
    ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite scores"));
    let mut pos_prefix = Vec::with_capacity(ranked.len() + 1);
    pos_prefix.push(0usize);
    for (_, y) in &ranked {
        pos_prefix.push(pos_prefix.last().unwrap() + usize::from(*y));
    }

    let eligible_scores: Vec<F> = ranked.iter().map(|(s, _)| *s).collect();
    let mut best: Option<ThresholdChoice<F>> = None;
    for theta in candidate_thresholds(&eligible_scores) {
        // number of eligible scores >= theta
        let k = ranked.partition_point(|(s, _)| *s >= theta);
        let tp = pos_prefix[k];
        let fp = k - tp;
        let confusion = Confusion {
            tp,
            fp,
            fn_: positives - tp,
            tn: negatives - fp,
        };
        let better = match &best {
            None => true,
            Some(b) => {
                let (f, bf) = (confusion.f1(), b.confusion.f1());
                f > bf || (f == bf && confusion.fpr() < b.confusion.fpr())
            }
        };
        if better {
            best = Some(ThresholdChoice {
                threshold: theta,
                confusion,
            });
        }
    }
    Ok(best.expect("at least two candidates"))
}

/// Precision, recall, F1 and FPR of thresholded scores.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub fpr: f64,
    pub confusion: Confusion,
}

impl From<Confusion> for Metrics {
    fn from(c: Confusion) -> Self {
        Self {
            precision: c.precision(),
            recall: c.recall(),
            f1: c.f1(),
            fpr: c.fpr(),
            confusion: c,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separable_pair_picks_midpoint() {
        let c = select_threshold(&[0.1f64, 0.9], &[false, true]).unwrap();
        assert_eq!(c.threshold, 0.5);
        assert_eq!(c.f1(), 1.0);
    }

    #[test]
    fn constant_scores_choose_all_positive() {
        let c = select_threshold(&[0.4f64; 4], &[true, false, false, false]).unwrap();
        assert_eq!(c.threshold, 0.0);
        assert_eq!(c.confusion, Confusion { tp: 1, fp: 3, tn: 0, fn_: 0 });
        assert_eq!(c.confusion.fpr(), 1.0);
    }

    #[test]
    fn single_class_is_an_error() {
        assert!(select_threshold(&[0.1f64, 0.2], &[true, true]).is_err());
        assert!(select_threshold(&[0.1f64, 0.2], &[false, false]).is_err());
    }

    #[test]
    fn ties_prefer_lower_fpr() {
        // theta=0.65 gives tp=1 fp=0 fn=1 (F1 2/3); theta=0.15 gives tp=2 fp=2 (F1 2/3)
        let scores = [0.1f64, 0.2, 0.3, 0.4, 0.9];
        let labels = [false, true, false, false, true];
        let c = select_threshold(&scores, &labels).unwrap();
        assert!((c.f1() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(c.confusion.fp, 0);
    }

    #[test]
    fn gated_entities_never_positive() {
        let scores = [0.9f64, 0.8, 0.1];
        let eligible = [false, true, true];
        let labels = [true, true, false];
        let c = select_threshold_gated(&scores, &eligible, &labels).unwrap();
        assert_eq!(c.confusion.tp, 1);
        assert_eq!(c.confusion.fn_, 1);
        assert_eq!(c.confusion.fp, 0);
    }

    #[test]
    fn metric_identities() {
        let c = Confusion { tp: 3, fp: 2, tn: 10, fn_: 1 };
        let m = Metrics::from(c);
        assert_eq!(m.precision, 0.6);
        assert_eq!(m.recall, 0.75);
        assert!((m.fpr + c.specificity() - 1.0).abs() < 1e-15);
        assert_eq!(Confusion::default().f1(), 0.0);
    }
}
