use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::graph::bce_term;

/// Per-class decision thresholds and the loss weights they were tuned with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdVector {
    pub thresholds: Vec<f64>,
    pub weights: Vec<f64>,
}

impl ThresholdVector {
    pub fn uniform(classes: usize, threshold: f64) -> Self {
        ThresholdVector {
            thresholds: vec![threshold; classes],
            weights: vec![1.0; classes],
        }
    }

    pub fn len(&self) -> usize {
        self.thresholds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.thresholds.is_empty()
    }

    pub fn validate(&self, grid: &GridSpec) -> Result<()> {
        if self.thresholds.len() != self.weights.len() {
            return Err(Error::LengthMismatch(format!(
                "{} thresholds, {} weights",
                self.thresholds.len(),
                self.weights.len()
            )));
        }
        if let Some(t) = self
            .thresholds
            .iter()
            .find(|t| !(grid.lo..=grid.hi).contains(*t))
        {
            return Err(Error::config(
                "thresholds",
                format!("{t} outside [{}, {}]", grid.lo, grid.hi),
            ));
        }
        if self.weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(Error::config("weights", "must be positive"));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Inclusive threshold grid `lo, lo + step, ..., hi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            lo: 0.3,
            hi: 0.6,
            step: 0.001,
        }
    }
}

impl GridSpec {
    /// Grid points. When `1 / step` is an integer the points are computed as
    /// integer ratios so that e.g. the point 0.35 equals the literal `0.35`.
    pub fn points(&self) -> Result<Vec<f64>> {
        let ordered = self.lo < self.hi && self.step > 0.0;
        if !ordered || !self.lo.is_finite() || !self.hi.is_finite() {
            return Err(Error::config("grid", "need lo < hi and step > 0"));
        }
        let n = ((self.hi - self.lo) / self.step + 1e-9).floor() as usize;
        let inv = 1.0 / self.step;
        if (inv - inv.round()).abs() < 1e-9 {
            let inv = inv.round();
            let base = (self.lo * inv).round();
            Ok((0..=n).map(|i| (base + i as f64) / inv).collect())
        } else {
            Ok((0..=n).map(|i| self.lo + i as f64 * self.step).collect())
        }
    }
}

/// Result of [`search_thresholds`]: the tuned thresholds and the F1 each
/// class reaches at its threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdSearch {
    pub thresholds: Vec<f64>,
    pub f1: Vec<f64>,
}

/// Confusion counts for one binary problem.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Counts {
    pub fn add(&mut self, other: Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    /// `2TP / (2TP + FP + FN)`, which equals `2PR / (P + R)`; 0 when TP = 0.
    pub fn f1(&self) -> f64 {
        if self.tp == 0 {
            0.0
        } else {
            2.0 * self.tp as f64 / (2 * self.tp + self.fp + self.fn_) as f64
        }
    }

    /// Exact comparison of the F1 values of two count sets.
    fn f1_cmp(&self, other: &Counts) -> std::cmp::Ordering {
        let num = |c: &Counts| 2 * c.tp as u128;
        let den = |c: &Counts| (2 * c.tp + c.fp + c.fn_).max(1) as u128;
        (num(self) * den(other)).cmp(&(num(other) * den(self)))
    }
}

/// Per-class grid search for the threshold maximizing that class's F1 under
/// the rule `score > threshold`. Ties go to the smallest threshold. A class
/// without positives gets `grid.hi` and F1 0.
///
/// `scores` and `labels` are example-major: `scores[i][k]` is the score of
/// class `k` on example `i`.
pub fn search_thresholds(
    scores: &[Vec<f64>],
    labels: &[Vec<bool>],
    grid: &GridSpec,
) -> Result<ThresholdSearch> {
    let points = grid.points()?;
    let classes = check_matrix(scores, labels)?;
    let mut thresholds = Vec::with_capacity(classes);
    let mut f1 = Vec::with_capacity(classes);
    for k in 0..classes {
        let mut col: Vec<(f64, bool)> = scores
            .iter()
            .zip(labels)
            .map(|(s, l)| (s[k], l[k]))
            .collect();
        let positives = col.iter().filter(|c| c.1).count();
        if positives == 0 {
            thresholds.push(grid.hi);
            f1.push(0.0);
            continue;
        }
        col.sort_by(|a, b| a.0.total_cmp(&b.0));
        // suffix[i] = positives among col[i..].
        let mut suffix = vec![0usize; col.len() + 1];
        for i in (0..col.len()).rev() {
            suffix[i] = suffix[i + 1] + col[i].1 as usize;
        }
        let mut best: Option<(f64, Counts)> = None;
        for &t in &points {
            let p = col.partition_point(|c| c.0 <= t);
            let predicted = col.len() - p;
            let tp = suffix[p];
            let counts = Counts {
                tp,
                fp: predicted - tp,
                fn_: positives - tp,
            };
            if best.is_none_or(|(_, b)| counts.f1_cmp(&b).is_gt()) {
                best = Some((t, counts));
            }
        }
        let (t, c) = best.expect("grid is non-empty");
        thresholds.push(t);
        f1.push(c.f1());
    }
    Ok(ThresholdSearch { thresholds, f1 })
}

fn check_matrix(scores: &[Vec<f64>], labels: &[Vec<bool>]) -> Result<usize> {
    if scores.is_empty() {
        return Err(Error::Empty("score matrix".into()));
    }
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch(format!(
            "{} score rows, {} label rows",
            scores.len(),
            labels.len()
        )));
    }
    let classes = scores[0].len();
    if scores.iter().any(|r| r.len() != classes) || labels.iter().any(|r| r.len() != classes) {
        return Err(Error::Shape("ragged score or label matrix".into()));
    }
    Ok(classes)
}

/// F1 of one class at one threshold, counted directly.
pub fn class_f1_at(scores: &[Vec<f64>], labels: &[Vec<bool>], class: usize, threshold: f64) -> f64 {
    let mut c = Counts::default();
    for (s, l) in scores.iter().zip(labels) {
        match (s[class] > threshold, l[class]) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => {}
        }
    }
    c.f1()
}

/// Indices of classes whose score strictly exceeds their threshold.
pub fn apply_thresholds(scores: &[f64], th: &ThresholdVector) -> Result<BTreeSet<usize>> {
    if scores.len() != th.len() {
        return Err(Error::LengthMismatch(format!(
            "{} scores, {} thresholds",
            scores.len(),
            th.len()
        )));
    }
    Ok(scores
        .iter()
        .zip(&th.thresholds)
        .enumerate()
        .filter(|(_, (s, t))| s > t)
        .map(|(k, _)| k)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Average {
    Micro,
    Macro,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    /// Precision, recall and F1 from pooled counts. With no counts at all,
    /// prediction and gold agree trivially and every score is 1.
    pub fn from_counts(c: Counts) -> Prf {
        if c.tp + c.fp + c.fn_ == 0 {
            return Prf {
                precision: 1.0,
                recall: 1.0,
                f1: 1.0,
            };
        }
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(c.tp, c.tp + c.fp);
        let recall = ratio(c.tp, c.tp + c.fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Prf {
            precision,
            recall,
            f1,
        }
    }
}

pub fn set_counts<T: Ord>(pred: &BTreeSet<T>, gold: &BTreeSet<T>) -> Counts {
    let tp = pred.intersection(gold).count();
    Counts {
        tp,
        fp: pred.len() - tp,
        fn_: gold.len() - tp,
    }
}

/// Multi-label precision/recall/F1. Micro pools counts over every example
/// and class; macro averages per-class scores over the classes that occur
/// in either `pred` or `gold`.
pub fn multilabel_f1<T: Ord + Clone>(
    pred: &[BTreeSet<T>],
    gold: &[BTreeSet<T>],
    mode: Average,
) -> Result<Prf> {
    if pred.len() != gold.len() {
        return Err(Error::LengthMismatch(format!(
            "{} predictions, {} gold sets",
            pred.len(),
            gold.len()
        )));
    }
    match mode {
        Average::Micro => {
            let mut total = Counts::default();
            for (p, g) in pred.iter().zip(gold) {
                total.add(set_counts(p, g));
            }
            Ok(Prf::from_counts(total))
        }
        Average::Macro => {
            let classes: BTreeSet<&T> = pred.iter().chain(gold).flatten().collect();
            if classes.is_empty() {
                return Ok(Prf::from_counts(Counts::default()));
            }
            let mut sum = [0.0; 3];
            for class in &classes {
                let mut c = Counts::default();
                for (p, g) in pred.iter().zip(gold) {
                    match (p.contains(class), g.contains(class)) {
                        (true, true) => c.tp += 1,
                        (true, false) => c.fp += 1,
                        (false, true) => c.fn_ += 1,
                        (false, false) => {}
                    }
                }
                let s = Prf::from_counts(c);
                sum[0] += s.precision;
                sum[1] += s.recall;
                sum[2] += s.f1;
            }
            let n = classes.len() as f64;
            Ok(Prf {
                precision: sum[0] / n,
                recall: sum[1] / n,
                f1: sum[2] / n,
            })
        }
    }
}

/// `(1/N) sum_k w_k * BCE(sigmoid(x_k), t_k)` over one example's `N` classes.
/// Probabilities are clamped at `1e-12` before the logarithm.
pub fn weighted_bce_loss(logits: &[f64], targets: &[f64], weights: &[f64]) -> Result<f64> {
    if logits.len() != targets.len() || logits.len() != weights.len() {
        return Err(Error::LengthMismatch(format!(
            "{} logits, {} targets, {} weights",
            logits.len(),
            targets.len(),
            weights.len()
        )));
    }
    if logits.is_empty() {
        return Err(Error::Empty("logits".into()));
    }
    let sum: f64 = logits
        .iter()
        .zip(targets)
        .zip(weights)
        .map(|((&x, &t), &w)| w * bce_term(x, t))
        .sum();
    Ok(sum / logits.len() as f64)
}

/// Inverse positive frequency per class, rescaled to mean 1. A class with no
/// positives gets the smallest weight among the classes that have some.
pub fn inverse_frequency_weights(labels: &[Vec<bool>], classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; classes];
    for row in labels {
        for (c, &l) in counts.iter_mut().zip(row) {
            *c += l as usize;
        }
    }
    let observed = counts.iter().filter(|&&c| c > 0).map(|&c| 1.0 / c as f64);
    let floor = observed.fold(f64::INFINITY, f64::min);
    if !floor.is_finite() {
        return vec![1.0; classes];
    }
    let raw: Vec<f64> = counts
        .iter()
        .map(|&c| if c == 0 { floor } else { 1.0 / c as f64 })
        .collect();
    let mean = raw.iter().sum::<f64>() / classes.max(1) as f64;
    raw.iter().map(|w| w / mean).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn column(scores: &[f64], labels: &[bool]) -> (Vec<Vec<f64>>, Vec<Vec<bool>>) {
        (
            scores.iter().map(|&s| vec![s]).collect(),
            labels.iter().map(|&l| vec![l]).collect(),
        )
    }

    #[test]
    fn grid_has_301_decimal_points() {
        let g = GridSpec::default().points().unwrap();
        assert_eq!(g.len(), 301);
        assert_eq!(g[0], 0.3);
        assert_eq!(g[50], 0.35);
        assert_eq!(g[300], 0.6);
        assert!(GridSpec {
            lo: 0.6,
            hi: 0.3,
            step: 0.001
        }
        .points()
        .is_err());
    }

    #[test]
    fn first_perfect_point() {
        let (s, l) = column(&[0.35, 0.45, 0.55], &[false, true, true]);
        let r = search_thresholds(&s, &l, &GridSpec::default()).unwrap();
        assert_eq!(r.thresholds, vec![0.35]);
        assert_eq!(r.f1, vec![1.0]);
    }

    #[test]
    fn all_positive_prefers_lowest() {
        let (s, l) = column(&[0.1, 0.4, 0.9], &[true, true, true]);
        let r = search_thresholds(&s, &l, &GridSpec::default()).unwrap();
        assert_eq!(r.thresholds, vec![0.3]);
        assert!((r.f1[0] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn no_positives_convention() {
        let (s, l) = column(&[0.1, 0.9], &[false, false]);
        let r = search_thresholds(&s, &l, &GridSpec::default()).unwrap();
        assert_eq!(r.thresholds, vec![0.6]);
        assert_eq!(r.f1, vec![0.0]);
    }

    #[test]
    fn empty_matrix_is_error() {
        assert!(search_thresholds(&[], &[], &GridSpec::default()).is_err());
    }

    #[test]
    fn apply_examples() {
        let th = ThresholdVector::uniform(2, 0.5);
        assert_eq!(
            apply_thresholds(&[0.7, 0.2], &th).unwrap(),
            BTreeSet::from([0])
        );
        assert!(apply_thresholds(&[0.0, 0.0], &th).unwrap().is_empty());
        assert!(apply_thresholds(&[0.5, 0.5], &th).unwrap().is_empty());
    }

    #[test]
    fn f1_examples() {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<BTreeSet<_>>();
        let r = multilabel_f1(&[s(&["B", "C"])], &[s(&["A", "B"])], Average::Micro).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (0.5, 0.5, 0.5));
        let r = multilabel_f1(&[s(&["A"])], &[s(&["B"])], Average::Micro).unwrap();
        assert_eq!(r.f1, 0.0);
        let same = [s(&["A"]), s(&["B", "C"])];
        assert_eq!(multilabel_f1(&same, &same, Average::Micro).unwrap().f1, 1.0);
        assert_eq!(multilabel_f1(&same, &same, Average::Macro).unwrap().f1, 1.0);
    }

    #[test]
    fn macro_averages_classes() {
        // Class A: TP 1. Class B: FN 1. Class C: FP 1.
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<BTreeSet<_>>();
        let r = multilabel_f1(&[s(&["A", "C"])], &[s(&["A", "B"])], Average::Macro).unwrap();
        assert!((r.f1 - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn bce_hand_values() {
        assert!(
            (weighted_bce_loss(&[0.0], &[1.0], &[1.0]).unwrap() - std::f64::consts::LN_2).abs()
                < 1e-12
        );
        assert!(weighted_bce_loss(&[50.0], &[1.0], &[1.0]).unwrap() < 1e-12);
        // The clamp keeps a saturated wrong prediction finite: -ln(1e-12).
        let capped = weighted_bce_loss(&[-1e3], &[1.0], &[1.0]).unwrap();
        assert!((capped - 1e-12_f64.ln().abs()).abs() < 1e-9);
        let x = [0.3, -1.2, 2.0];
        let t = [1.0, 0.0, 1.0];
        let w = [0.5, 1.5, 2.0];
        let w2: Vec<f64> = w.iter().map(|v| 2.0 * v).collect();
        let a = weighted_bce_loss(&x, &t, &w).unwrap();
        let b = weighted_bce_loss(&x, &t, &w2).unwrap();
        assert!((b - 2.0 * a).abs() < 1e-12);
    }

    #[test]
    fn frequency_weights_mean_one() {
        let labels = vec![vec![true, false, false], vec![true, true, false]];
        let w = inverse_frequency_weights(&labels, 3);
        assert!((w.iter().sum::<f64>() / 3.0 - 1.0).abs() < 1e-12);
        // Raw weights 1/2, 1, and the floor 1/2 for the unseen class.
        assert!((w[0] - 0.75).abs() < 1e-12 && (w[1] - 1.5).abs() < 1e-12);
        assert_eq!(w[0], w[2]);
        assert_eq!(
            inverse_frequency_weights(&[vec![false, false]], 2),
            vec![1.0, 1.0]
        );
    }

    #[test]
    fn perfect_scores_give_perfect_f1() {
        let gold = [
            BTreeSet::from([0usize, 2]),
            BTreeSet::from([1]),
            BTreeSet::new(),
        ];
        let scores: Vec<Vec<f64>> = gold
            .iter()
            .map(|g| {
                (0..3)
                    .map(|k| if g.contains(&k) { 1.0 } else { 0.0 })
                    .collect()
            })
            .collect();
        let labels: Vec<Vec<bool>> = scores
            .iter()
            .map(|r| r.iter().map(|&v| v > 0.5).collect())
            .collect();
        let found = search_thresholds(&scores, &labels, &GridSpec::default()).unwrap();
        let th = ThresholdVector {
            thresholds: found.thresholds,
            weights: vec![1.0; 3],
        };
        let pred: Vec<BTreeSet<usize>> = scores
            .iter()
            .map(|s| apply_thresholds(s, &th).unwrap())
            .collect();
        assert_eq!(multilabel_f1(&pred, &gold, Average::Micro).unwrap().f1, 1.0);
    }

    proptest! {
        #[test]
        fn searched_threshold_dominates_grid(
            rows in prop::collection::vec((0.0f64..1.0, any::<bool>()), 1..40)
        ) {
            let (s, l): (Vec<f64>, Vec<bool>) = rows.into_iter().unzip();
            let (s, l) = column(&s, &l);
            let grid = GridSpec::default();
            let r = search_thresholds(&s, &l, &grid).unwrap();
            let best = class_f1_at(&s, &l, 0, r.thresholds[0]);
            prop_assert!((best - r.f1[0]).abs() < 1e-12);
            for t in grid.points().unwrap() {
                prop_assert!(class_f1_at(&s, &l, 0, t) <= best);
            }
        }

        #[test]
        fn bce_permutation_invariant(
            rows in prop::collection::vec((-5.0f64..5.0, any::<bool>(), 0.1f64..3.0), 1..12),
            shift in 0usize..12,
        ) {
            let x: Vec<f64> = rows.iter().map(|r| r.0).collect();
            let t: Vec<f64> = rows.iter().map(|r| r.1 as u8 as f64).collect();
            let w: Vec<f64> = rows.iter().map(|r| r.2).collect();
            let rot = |v: &[f64]| { let mut v = v.to_vec(); let n = v.len(); v.rotate_left(shift % n); v };
            let a = weighted_bce_loss(&x, &t, &w).unwrap();
            let b = weighted_bce_loss(&rot(&x), &rot(&t), &rot(&w)).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
