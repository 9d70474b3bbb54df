//! Average precision, mAP, accuracy and the report/CSV outputs.

use std::fs::OpenOptions;
use std::path::Path;

use log::warn;
use serde::Serialize;
use serde_json::{json, Value};

use crate::error::{MaaError, Result};
use crate::model::ce_loss;
use crate::numcore::{softmax_rows, Matrix, Real};

/// Non-interpolated AP: mean of precision@k over the ranks k of the
/// positives, ranking by descending score with ties in index order.
/// `None` when there are no positives.
pub fn average_precision(scores: &[f64], positives: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), positives.len(), "scores and positives differ in length");
    let total = positives.iter().filter(|&&p| p).count();
    if total == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    Some(sum_prefix_precisions(order.into_iter().map(|i| positives[i])) / total as f64)
}

fn sum_prefix_precisions(ranked: impl Iterator<Item = bool>) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, positive) in ranked.enumerate() {
        if positive {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    sum
}

/// Reference AP for tests: ranks come from pairwise counting rather than a
/// sort, then ranks are walked in order.
pub fn brute_force_ap_oracle(scores: &[f64], positives: &[bool]) -> Option<f64> {
    let n = scores.len();
    let total = positives.iter().filter(|&&p| p).count();
    if total == 0 {
        return None;
    }
    let beats = |j: usize, i: usize| scores[j] > scores[i] || (scores[j] == scores[i] && j < i);
    let rank: Vec<usize> = (0..n).map(|i| (0..n).filter(|&j| beats(j, i)).count()).collect();
    let at_rank = (0..n).map(|k| {
        let i = (0..n).find(|&i| rank[i] == k).expect("ranks form a permutation");
        positives[i]
    });
    Some(sum_prefix_precisions(at_rank) / total as f64)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, row[0]), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    /// `None` for classes without positives; those are left out of `map`.
    pub per_class_ap: Vec<Option<f64>>,
    pub map: f64,
    pub accuracy: f64,
    pub mean_loss: f64,
    pub n_samples: usize,
}

impl MetricsReport {
    /// Canonical JSON with sorted keys.
    pub fn to_json(&self) -> Value {
        json!({
            "accuracy": self.accuracy,
            "map": self.map,
            "mean_loss": self.mean_loss,
            "n_samples": self.n_samples,
            "per_class_ap": self.per_class_ap,
        })
    }
}

/// Scores class c by its softmax probability column.
pub fn map_from_logits<T: Real>(logits: &Matrix<T>, labels: &[usize]) -> Result<MetricsReport> {
    let logits = logits.cast::<f64>();
    let (n, c) = logits.shape();
    if n == 0 || labels.len() != n {
        return Err(MaaError::shape("map_from_logits", format!("{n} rows, {} labels", labels.len())));
    }
    let (mean_loss, _) = ce_loss(&logits, labels)?;
    let probs = softmax_rows(&logits);
    let per_class_ap: Vec<Option<f64>> = (0..c)
        .map(|class| {
            let scores: Vec<f64> = (0..n).map(|r| probs.get(r, class)).collect();
            let positives: Vec<bool> = labels.iter().map(|&y| y == class).collect();
            let ap = average_precision(&scores, &positives);
            if ap.is_none() {
                warn!("class {class} has no positives; left out of mAP");
            }
            ap
        })
        .collect();
    let defined: Vec<f64> = per_class_ap.iter().flatten().copied().collect();
    let map = defined.iter().sum::<f64>() / defined.len() as f64;
    let correct = (0..n).filter(|&r| argmax(logits.row(r)) == labels[r]).count();
    Ok(MetricsReport {
        per_class_ap,
        map,
        accuracy: correct as f64 / n as f64,
        mean_loss,
        n_samples: n,
    })
}

#[derive(Serialize)]
struct CsvRow<'a> {
    epoch: usize,
    split: &'a str,
    loss: f64,
    accuracy: f64,
    map: f64,
}

/// Appends `epoch,split,loss,accuracy,map`, writing the header when the
/// file is new or empty.
pub fn append_metrics_csv(path: &Path, epoch: usize, split: &str, report: &MetricsReport) -> Result<()> {
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    w.serialize(CsvRow {
        epoch,
        split,
        loss: report.mean_loss,
        accuracy: report.accuracy,
        map: report.map,
    })
    .map_err(|e| MaaError::Other(format!("writing {}: {e}", path.display())))?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[0.9, 0.8, 0.7], &[true, true, false]), Some(1.0));
        assert_eq!(average_precision(&[0.9, 0.8, 0.7], &[false, true, false]), Some(0.5));
        assert_eq!(average_precision(&[0.9, 0.8, 0.7, 0.6], &[true, false, false, true]), Some(0.75));
        assert_eq!(average_precision(&[0.1, 0.2], &[false, false]), None);
        for (s, p) in [
            (vec![0.9, 0.8, 0.7], vec![false, true, false]),
            (vec![0.9, 0.8, 0.7, 0.6], vec![true, false, false, true]),
        ] {
            assert_eq!(brute_force_ap_oracle(&s, &p), average_precision(&s, &p));
        }
    }

    #[test]
    fn ties_keep_original_order() {
        // the positive sits after the negative among equal scores
        assert_eq!(average_precision(&[0.5, 0.5], &[false, true]), Some(0.5));
        assert_eq!(average_precision(&[0.5, 0.5], &[true, false]), Some(1.0));
    }

    #[test]
    fn matches_oracle_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut checked = 0;
        while checked < 1000 {
            let n = rng.random_range(1..=32);
            // coarse scores force plenty of ties
            let levels = rng.random_range(1..=8);
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / 4.0).collect();
            let positives: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
            let fast = average_precision(&scores, &positives);
            assert_eq!(fast, brute_force_ap_oracle(&scores, &positives), "{scores:?} {positives:?}");
            checked += fast.is_some() as usize;
        }
    }

    proptest! {
        #[test]
        fn ap_invariant_under_monotone_transform(
            raw in prop::collection::vec((0i32..40, any::<bool>()), 1..32)
        ) {
            let scores: Vec<f64> = raw.iter().map(|&(s, _)| s as f64).collect();
            let positives: Vec<bool> = raw.iter().map(|&(_, p)| p).collect();
            let warped: Vec<f64> = scores.iter().map(|s| (s / 10.0).exp() * 3.0 - 7.0).collect();
            prop_assert_eq!(average_precision(&scores, &positives), average_precision(&warped, &positives));
        }

        #[test]
        fn map_invariant_under_sample_permutation(seed in any::<u64>(), n in 2usize..30) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = 4;
            let data: Vec<f64> = (0..n * c).map(|_| rng.random_range(-3.0..3.0)).collect();
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
            let logits = Matrix::from_vec(n, c, data).unwrap();
            let mut order: Vec<usize> = (0..n).collect();
            order.reverse();
            order.rotate_left(seed as usize % n);
            let mut shuffled = Matrix::zeros(n, c);
            for (r, &o) in order.iter().enumerate() {
                shuffled.row_mut(r).copy_from_slice(logits.row(o));
            }
            let shuffled_labels: Vec<usize> = order.iter().map(|&o| labels[o]).collect();
            let a = map_from_logits(&logits, &labels).unwrap();
            let b = map_from_logits(&shuffled, &shuffled_labels).unwrap();
            prop_assert!((a.map - b.map).abs() < 1e-12);
            prop_assert_eq!(a.accuracy, b.accuracy);
        }
    }

    #[test]
    fn perfect_logits_score_one() {
        let labels = [2, 0, 1, 1];
        let mut logits = Matrix::<f64>::zeros(4, 3);
        for (r, &y) in labels.iter().enumerate() {
            logits.set(r, y, 1000.0);
        }
        let report = map_from_logits(&logits, &labels).unwrap();
        assert_eq!(report.map, 1.0);
        assert_eq!(report.accuracy, 1.0);
        assert!(report.mean_loss < 1e-12);
    }

    #[test]
    fn reversed_ranking_for_one_class() {
        let labels = [0, 0, 1, 1];
        let logits = Matrix::from_rows(&[vec![0.0, 3.0], vec![0.0, 2.0], vec![0.0, 1.0], vec![0.0, 0.5]]);
        let report = map_from_logits(&logits, &labels).unwrap();
        // class 0 positives land at ranks 3 and 4
        let ap0 = (1.0 / 3.0 + 2.0 / 4.0) / 2.0;
        assert!((report.per_class_ap[0].unwrap() - ap0).abs() < 1e-15);
        // every row favours class 1, so its positives also rank last
        assert!((report.per_class_ap[1].unwrap() - ap0).abs() < 1e-15);
        assert_eq!(report.accuracy, 0.5);
    }

    #[test]
    fn identical_logits_pick_lowest_class() {
        let labels = [0, 1, 2, 0, 0];
        let report = map_from_logits(&Matrix::<f64>::filled(5, 3, 0.25), &labels).unwrap();
        assert_eq!(report.accuracy, 3.0 / 5.0);
    }

    #[test]
    fn classes_without_positives_are_skipped() {
        let logits = Matrix::from_rows(&[vec![2.0, 0.0, 0.0], vec![0.0, 2.0, 0.0]]);
        let report = map_from_logits(&logits, &[0, 1]).unwrap();
        assert_eq!(report.per_class_ap, vec![Some(1.0), Some(1.0), None]);
        assert_eq!(report.map, 1.0);
        let json = report.to_json().to_string();
        assert!(json.starts_with(r#"{"accuracy":1.0,"map":1.0"#), "{json}");
        assert!(json.contains(r#""per_class_ap":[1.0,1.0,null]"#));
    }

    #[test]
    fn csv_writes_header_once() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let report = map_from_logits(&Matrix::<f64>::identity(2), &[0, 1]).unwrap();
        append_metrics_csv(&path, 1, "val", &report).unwrap();
        append_metrics_csv(&path, 2, "val", &report).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "epoch,split,loss,accuracy,map");
        assert_eq!(lines.len(), 3);
        assert!(lines[2].starts_with("2,val,"));
    }
}
