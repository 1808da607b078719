//! Binary classification metrics with Target as the positive class.
//!
//! A sample is predicted Target iff `score >= t`. Degenerate ratios are 0:
//! precision when nothing is predicted Target, recall when there are no Target
//! labels, F-beta when both precision and recall are 0.

use serde::Serialize;
use thiserror::Error;

use crate::audio_io::Label;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("{scores} scores but {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("no samples to evaluate")]
    EmptyInput,
    #[error("both classes are needed")]
    SingleClassInput,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn record(&mut self, predicted_target: bool, label: Label) {
        match (predicted_target, label) {
            (true, Label::Target) => self.tp += 1,
            (true, Label::NonTarget) => self.fp += 1,
            (false, Label::NonTarget) => self.tn += 1,
            (false, Label::Target) => self.fn_ += 1,
        }
    }
}

fn check(scores: &[f64], labels: &[Label]) -> Result<(), MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if scores.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    Ok(())
}

fn check_both_classes(scores: &[f64], labels: &[Label]) -> Result<(), MetricsError> {
    check(scores, labels)?;
    let targets = labels.iter().filter(|&&l| l == Label::Target).count();
    if targets == 0 || targets == labels.len() {
        return Err(MetricsError::SingleClassInput);
    }
    Ok(())
}

pub fn confusion(scores: &[f64], labels: &[Label], t: f64) -> Result<Confusion, MetricsError> {
    check(scores, labels)?;
    let mut c = Confusion::default();
    for (&s, &l) in scores.iter().zip(labels) {
        c.record(s >= t, l);
    }
    Ok(c)
}

pub fn accuracy(c: &Confusion) -> f64 {
    if c.total() == 0 {
        return 0.0;
    }
    (c.tp + c.tn) as f64 / c.total() as f64
}

pub fn precision(c: &Confusion) -> f64 {
    ratio(c.tp, c.tp + c.fp)
}

pub fn recall(c: &Confusion) -> f64 {
    ratio(c.tp, c.tp + c.fn_)
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// F-beta from precision and recall.
pub fn fbeta_from(p: f64, r: f64, beta: f64) -> f64 {
    if p == 0.0 && r == 0.0 {
        return 0.0;
    }
    let b2 = beta * beta;
    (1.0 + b2) * p * r / (b2 * p + r)
}

pub fn fbeta(c: &Confusion, beta: f64) -> f64 {
    fbeta_from(precision(c), recall(c), beta)
}

/// Everything reported for one threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ThresholdMetrics {
    pub threshold: f64,
    pub confusion: Confusion,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub fbeta: f64,
}

impl ThresholdMetrics {
    pub fn at(scores: &[f64], labels: &[Label], t: f64, beta: f64) -> Result<Self, MetricsError> {
        let c = confusion(scores, labels, t)?;
        Ok(Self::from_confusion(t, c, beta))
    }

    pub fn from_confusion(threshold: f64, c: Confusion, beta: f64) -> Self {
        Self {
            threshold,
            confusion: c,
            accuracy: accuracy(&c),
            precision: precision(&c),
            recall: recall(&c),
            fbeta: fbeta(&c, beta),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Lowest score predicted Target at this point. The first point uses
    /// `+inf` (nothing predicted Target), serialized as `null`.
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
}

/// One point per distinct score, highest first; equal scores move together.
pub fn roc_curve(scores: &[f64], labels: &[Label]) -> Result<RocCurve, MetricsError> {
    check_both_classes(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let pos = labels.iter().filter(|&&l| l == Label::Target).count() as f64;
    let neg = labels.len() as f64 - pos;
    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            match labels[order[i]] {
                Label::Target => tp += 1,
                Label::NonTarget => fp += 1,
            }
            i += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / neg,
            tpr: tp as f64 / pos,
            threshold: t,
        });
    }
    Ok(RocCurve { points })
}

/// Trapezoidal area under the curve.
pub fn auc(curve: &RocCurve) -> f64 {
    curve
        .points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThresholdChoice {
    pub t_star: f64,
    pub metrics: ThresholdMetrics,
    /// Every candidate evaluated, ascending in threshold.
    pub sweep: Vec<ThresholdMetrics>,
}

/// Best F-beta over the distinct scores plus 0 and 1; ties go to the smallest
/// threshold.
pub fn optimize_threshold(
    scores: &[f64],
    labels: &[Label],
    beta: f64,
) -> Result<ThresholdChoice, MetricsError> {
    check_both_classes(scores, labels)?;
    let mut candidates: Vec<f64> = scores.iter().copied().chain([0.0, 1.0]).collect();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    let sweep: Vec<ThresholdMetrics> = candidates
        .iter()
        .map(|&t| ThresholdMetrics::at(scores, labels, t, beta))
        .collect::<Result<_, _>>()?;
    let best = sweep
        .iter()
        .fold(None::<&ThresholdMetrics>, |best, m| match best {
            Some(b) if b.fbeta >= m.fbeta => Some(b),
            _ => Some(m),
        })
        .copied()
        .expect("at least two candidates");
    Ok(ThresholdChoice {
        t_star: best.threshold,
        metrics: best,
        sweep,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use proptest::prelude::*;
    use Label::{NonTarget as N, Target as T};

    fn seeded(n: usize, seed: u64) -> (Vec<f64>, Vec<Label>) {
        let mut rng = SplitMix64::new(seed);
        let mut scores = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let target = rng.bernoulli(0.4);
            let s = if target { rng.uniform(0.3, 1.0) } else { rng.uniform(0.0, 0.7) };
            scores.push(s);
            labels.push(if target { T } else { N });
        }
        (scores, labels)
    }

    fn pair_count_auc(scores: &[f64], labels: &[Label]) -> f64 {
        let (mut wins, mut pairs) = (0.0, 0.0);
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if labels[i] == T && labels[j] == N {
                    pairs += 1.0;
                    if si > sj {
                        wins += 1.0;
                    } else if si == sj {
                        wins += 0.5;
                    }
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn confusion_examples() {
        let c = confusion(&[0.9, 0.1], &[T, N], 0.5).unwrap();
        assert_eq!(c, Confusion { tp: 1, fp: 0, tn: 1, fn_: 0 });
        let c = confusion(&[0.2, 0.0, 0.7], &[N, N, T], 0.0).unwrap();
        assert_eq!((c.fp, c.fn_), (2, 0));
        assert_eq!(confusion(&[0.1], &[], 0.5), Err(MetricsError::LengthMismatch { scores: 1, labels: 0 }));
        assert_eq!(confusion(&[], &[], 0.5), Err(MetricsError::EmptyInput));
    }

    #[test]
    fn confusion_matches_recount() {
        let (s, l) = seeded(1000, 4);
        let c = confusion(&s, &l, 0.5).unwrap();
        let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
        for i in 0..s.len() {
            let pred = s[i] >= 0.5;
            let truth = l[i] == T;
            if pred && truth {
                tp += 1
            } else if pred {
                fp += 1
            } else if truth {
                fn_ += 1
            } else {
                tn += 1
            }
        }
        assert_eq!(c, Confusion { tp, fp, tn, fn_ });
    }

    #[test]
    fn published_f2_values() {
        assert!((fbeta_from(0.89, 0.98, 2.0) - 0.9606).abs() < 5e-5);
        assert!((fbeta_from(0.62, 0.80, 2.0) - 0.7561).abs() < 5e-5);
        assert!((fbeta_from(0.82, 0.98, 2.0) - 0.94).abs() < 5e-3);
    }

    #[test]
    fn degenerate_conventions() {
        let c = Confusion { tp: 0, fp: 0, tn: 5, fn_: 0 };
        assert_eq!((precision(&c), recall(&c), fbeta(&c, 2.0)), (0.0, 0.0, 0.0));
    }

    #[test]
    fn separated_scores() {
        let s = [0.1, 0.2, 0.8, 0.9];
        let l = [N, N, T, T];
        assert_eq!(auc(&roc_curve(&s, &l).unwrap()), 1.0);
        let best = optimize_threshold(&s, &l, 2.0).unwrap();
        assert_eq!(best.t_star, 0.8);
        assert_eq!(best.metrics.fbeta, 1.0);
    }

    #[test]
    fn interleaved_auc() {
        let s = [0.1, 0.2, 0.3, 0.4];
        let l = [N, T, N, T];
        let a = auc(&roc_curve(&s, &l).unwrap());
        assert!((a - pair_count_auc(&s, &l)).abs() < 1e-12);
        assert!((a - 0.75).abs() < 1e-12);
    }

    #[test]
    fn roc_shape() {
        let (s, l) = seeded(300, 1);
        let r = roc_curve(&s, &l).unwrap();
        let first = r.points[0];
        let last = *r.points.last().unwrap();
        assert_eq!((first.fpr, first.tpr), (0.0, 0.0));
        assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        for w in r.points.windows(2) {
            assert!(w[1].threshold < w[0].threshold);
            assert!(w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr);
        }
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.starts_with(r#"{"points":[{"fpr":0.0,"tpr":0.0,"threshold":null}"#));
    }

    #[test]
    fn tied_scores_move_together() {
        let s = [0.5, 0.5, 0.5, 0.5];
        let l = [N, T, N, T];
        let r = roc_curve(&s, &l).unwrap();
        assert_eq!(r.points.len(), 2);
        assert_eq!(auc(&r), 0.5);
    }

    #[test]
    fn reversal_complements_auc() {
        let (s, l) = seeded(200, 9);
        let a = auc(&roc_curve(&s, &l).unwrap());
        let rev: Vec<f64> = s.iter().map(|v| 1.0 - v).collect();
        let b = auc(&roc_curve(&rev, &l).unwrap());
        assert!((a + b - 1.0).abs() < 1e-9);
    }

    #[test]
    fn single_class_rejected() {
        assert_eq!(roc_curve(&[0.1, 0.2], &[T, T]), Err(MetricsError::SingleClassInput));
        assert_eq!(
            optimize_threshold(&[0.1, 0.2], &[T, T], 2.0).map(|c| c.t_star),
            Err(MetricsError::SingleClassInput)
        );
    }

    #[test]
    fn threshold_search_matches_dense_grid() {
        // Scores on a 1e-4 lattice so every candidate lies on the grid.
        let mut rng = SplitMix64::new(21);
        let mut s = Vec::new();
        let mut l = Vec::new();
        for _ in 0..200 {
            let target = rng.bernoulli(0.5);
            let m = if target { 3000 + rng.below(7001) } else { rng.below(7001) };
            s.push(m as f64 / 10_000.0);
            l.push(if target { T } else { N });
        }
        let best = optimize_threshold(&s, &l, 2.0).unwrap();
        let grid_best = (0..=10_000)
            .map(|k| fbeta(&confusion(&s, &l, k as f64 / 10_000.0).unwrap(), 2.0))
            .fold(0.0f64, f64::max);
        assert!((best.metrics.fbeta - grid_best).abs() < 1e-12);
    }

    #[test]
    fn f1_is_harmonic_mean() {
        let c = Confusion { tp: 30, fp: 10, tn: 50, fn_: 20 };
        let (p, r) = (precision(&c), recall(&c));
        assert!((fbeta(&c, 1.0) - 2.0 / (1.0 / p + 1.0 / r)).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn equal_precision_recall_fixed_point(p in 0.001f64..1.0, beta in 0.1f64..5.0) {
            prop_assert!((fbeta_from(p, p, beta) - p).abs() < 1e-12);
        }

        #[test]
        fn recall_and_fpr_fall_with_threshold(seed in 0u64..1000, t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
            let (s, l) = seeded(100, seed);
            prop_assume!(l.contains(&T) && l.contains(&N));
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let a = confusion(&s, &l, lo).unwrap();
            let b = confusion(&s, &l, hi).unwrap();
            prop_assert!(recall(&b) <= recall(&a));
            let fpr = |c: &Confusion| c.fp as f64 / (c.fp + c.tn) as f64;
            prop_assert!(fpr(&b) <= fpr(&a));
            prop_assert!((0.0..=1.0).contains(&accuracy(&a)));
        }

        #[test]
        fn trapezoid_equals_pair_count(seed in 0u64..1000) {
            let (s, l) = seeded(60, seed);
            prop_assume!(l.contains(&T) && l.contains(&N));
            let a = auc(&roc_curve(&s, &l).unwrap());
            prop_assert!((a - pair_count_auc(&s, &l)).abs() < 1e-9);
        }
    }
}
