//! Accuracy, confusion, calibration error and prior-estimation error.

use serde::{Deserialize, Serialize};

use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::numerics::ProbVector;

pub const DEFAULT_ECE_BINS: usize = 15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub step: usize,
    pub top1: f64,
    pub per_class_recall: Vec<f64>,
    pub per_class_precision: Vec<f64>,
    pub confusion: Vec<Vec<usize>>,
    pub ece: f64,
    pub prior_l1: f64,
}

/// Confusion-derived metrics; `confusion[true][predicted]`.
pub fn classification_report(predictions: &[usize], labels: &[usize], num_classes: usize) -> Result<EvalReport> {
    if labels.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty set"));
    }
    if predictions.len() != labels.len() {
        return Err(Error::shape("evaluate", format!("{} predictions for {} labels", predictions.len(), labels.len())));
    }
    let mut confusion = vec![vec![0usize; num_classes]; num_classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        if p >= num_classes || y >= num_classes {
            return Err(Error::invalid(format!("class index outside [0, {num_classes})")));
        }
        confusion[y][p] += 1;
    }
    let correct: usize = (0..num_classes).map(|k| confusion[k][k]).sum();
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let per_class_recall = (0..num_classes)
        .map(|k| ratio(confusion[k][k], confusion[k].iter().sum()))
        .collect();
    let per_class_precision = (0..num_classes)
        .map(|k| ratio(confusion[k][k], (0..num_classes).map(|t| confusion[t][k]).sum()))
        .collect();
    Ok(EvalReport {
        step: 0,
        top1: ratio(correct, labels.len()),
        per_class_recall,
        per_class_precision,
        confusion,
        ece: 0.0,
        prior_l1: 0.0,
    })
}

/// Classifies `test` with the balanced head's argmax.
pub fn evaluate(model: &ModelState, test: &LabeledSet) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty set"));
    }
    let out = model.forward(&test.features)?;
    classification_report(&out.logits_b.argmax_rows(), &test.labels, test.num_classes)
}

/// Equal-width-bin expected calibration error on `[0, 1]`.
pub fn ece(confidences: &[f64], correct: &[bool], num_bins: usize) -> Result<f64> {
    if confidences.len() != correct.len() {
        return Err(Error::shape("ece", format!("{} confidences, {} flags", confidences.len(), correct.len())));
    }
    if num_bins == 0 {
        return Err(Error::invalid("ece needs at least one bin"));
    }
    if let Some(c) = confidences.iter().find(|c| !(0.0..=1.0).contains(*c)) {
        return Err(Error::invalid(format!("confidence {c} outside [0, 1]")));
    }
    if confidences.is_empty() {
        return Ok(0.0);
    }
    let mut count = vec![0usize; num_bins];
    let mut conf_sum = vec![0.0; num_bins];
    let mut hits = vec![0usize; num_bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        let b = ((c * num_bins as f64) as usize).min(num_bins - 1);
        count[b] += 1;
        conf_sum[b] += c;
        hits[b] += usize::from(ok);
    }
    let n = confidences.len() as f64;
    Ok((0..num_bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let m = count[b] as f64;
            (m / n) * (hits[b] as f64 / m - conf_sum[b] / m).abs()
        })
        .sum())
}

pub fn prior_l1(estimated: &ProbVector, truth: &ProbVector) -> Result<f64> {
    if estimated.len() != truth.len() {
        return Err(Error::shape("prior_l1", format!("{} vs {}", estimated.len(), truth.len())));
    }
    Ok(estimated.as_slice().iter().zip(truth.as_slice()).map(|(a, b)| (a - b).abs()).sum())
}

/// One line of a metrics trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub top1: f64,
    pub ece: f64,
    pub prior_l1: f64,
    pub masked_fraction: f64,
    pub loss_cls: f64,
    pub loss_rpl: f64,
    pub loss_spl: f64,
    pub lr: f64,
}

pub const CSV_HEADER: &str = "step,top1,ece,prior_l1,masked_fraction,loss_cls,loss_rpl,loss_spl,lr";

impl MetricsRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.8},{:.8},{:.8},{:.8}",
            self.step,
            self.top1,
            self.ece,
            self.prior_l1,
            self.masked_fraction,
            self.loss_cls,
            self.loss_rpl,
            self.loss_spl,
            self.lr
        )
    }
}

/// Header plus one line per row, newline-terminated.
pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv_line());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn perfect_and_constant_classifiers() {
        let r = classification_report(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
        assert_eq!(r.top1, 1.0);
        assert_eq!(r.confusion, vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 1]]);
        let r = classification_report(&[0, 0, 0, 0], &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(r.top1, 0.5);
        assert_eq!(r.per_class_recall, vec![1.0, 0.0]);
        assert_eq!(r.per_class_precision, vec![0.5, 0.0]);
        assert!(classification_report(&[], &[], 2).is_err());
    }

    #[test]
    fn hand_counted_confusion() {
        let r = classification_report(&[1, 0, 1, 1], &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(r.confusion, vec![vec![1, 1], vec![0, 2]]);
        assert_eq!(r.top1, 0.75);
        assert_eq!(r.per_class_recall, vec![0.5, 1.0]);
        assert!((r.per_class_precision[1] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.confusion.iter().flatten().sum::<usize>(), 4);
    }

    #[test]
    fn ece_extremes() {
        assert_eq!(ece(&[1.0; 5], &[false; 5], 15).unwrap(), 1.0);
        assert_eq!(ece(&[1.0; 5], &[true; 5], 15).unwrap(), 0.0);
    }

    #[test]
    fn ece_calibrated_stream() {
        let mut rng = crate::numerics::seeded_rng(0);
        let n = 100_000;
        let conf: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let correct: Vec<bool> = conf.iter().map(|&c| rng.gen::<f64>() < c).collect();
        assert!(ece(&conf, &correct, 15).unwrap() < 0.01);
    }

    #[test]
    fn prior_l1_examples() {
        let p = |v: &[f64]| ProbVector::new(v.to_vec()).unwrap();
        assert_eq!(prior_l1(&p(&[0.3, 0.7]), &p(&[0.3, 0.7])).unwrap(), 0.0);
        assert_eq!(prior_l1(&p(&[1.0, 0.0]), &p(&[0.0, 1.0])).unwrap(), 2.0);
        assert!((prior_l1(&p(&[0.6, 0.4]), &p(&[0.5, 0.5])).unwrap() - 0.2).abs() < 1e-15);
        assert!(prior_l1(&p(&[1.0]), &p(&[0.5, 0.5])).is_err());
    }

    fn prob(c: usize) -> impl Strategy<Value = ProbVector> {
        prop::collection::vec(0.0f64..1.0, c).prop_filter_map("mass", |w| ProbVector::normalized(w).ok())
    }

    proptest! {
        #[test]
        fn prior_l1_is_a_metric(a in prob(4), b in prob(4), c in prob(4)) {
            let d = |x: &ProbVector, y: &ProbVector| prior_l1(x, y).unwrap();
            prop_assert!((d(&a, &b) - d(&b, &a)).abs() < 1e-15);
            prop_assert_eq!(d(&a, &a), 0.0);
            prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c) + 1e-12);
        }

        #[test]
        fn ece_bounded_and_permutation_invariant(
            pairs in prop::collection::vec((0.0f64..=1.0, any::<bool>()), 1..60),
            seed in any::<u64>(),
        ) {
            let (conf, ok): (Vec<f64>, Vec<bool>) = pairs.iter().copied().unzip();
            let e = ece(&conf, &ok, 15).unwrap();
            prop_assert!((0.0..=1.0).contains(&e));
            let mut idx: Vec<usize> = (0..conf.len()).collect();
            use rand::seq::SliceRandom;
            idx.shuffle(&mut crate::numerics::seeded_rng(seed));
            let pc: Vec<f64> = idx.iter().map(|&i| conf[i]).collect();
            let po: Vec<bool> = idx.iter().map(|&i| ok[i]).collect();
            prop_assert!((ece(&pc, &po, 15).unwrap() - e).abs() < 1e-12);
        }
    }
}
