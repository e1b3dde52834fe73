//! Evaluation statistics: accuracy, macro-F1, Brier score, and the paired
//! Wilcoxon signed-rank test used for method comparison.

use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Per-client evaluation summary over one test shard.
#[derive(Debug, Clone)]
pub struct EvalResult {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub brier: f64,
    /// Row = true class, column = predicted class.
    pub confusion: Vec<Vec<u64>>,
    pub samples: usize,
}

impl EvalResult {
    /// Builds the full summary from hard predictions plus the probability
    /// rows used for the Brier score.
    pub fn from_predictions(
        predictions: &[usize],
        labels: &[usize],
        probabilities: &Tensor,
        class_count: usize,
    ) -> Result<Self> {
        if predictions.len() != labels.len() {
            return Err(Error::Shape {
                op: "eval_result",
                expected: format!("{} predictions", labels.len()),
                got: format!("{}", predictions.len()),
            });
        }
        if labels.is_empty() {
            return Err(Error::Domain {
                op: "eval_result",
                message: "empty evaluation set".into(),
            });
        }
        let mut confusion = vec![vec![0u64; class_count]; class_count];
        for (&pred, &truth) in predictions.iter().zip(labels) {
            if pred >= class_count || truth >= class_count {
                return Err(Error::Domain {
                    op: "eval_result",
                    message: format!("class index out of range: pred {pred}, true {truth}"),
                });
            }
            confusion[truth][pred] += 1;
        }
        let correct: u64 = (0..class_count).map(|c| confusion[c][c]).sum();
        let n = labels.len();
        Ok(EvalResult {
            accuracy: correct as f64 / n as f64,
            macro_f1: macro_f1(&confusion),
            brier: brier(probabilities, labels)?,
            confusion,
            samples: n,
        })
    }
}

/// Unweighted mean over classes of 2PR/(P+R). A class with no predictions
/// and no support contributes 0; the denominator is always the class count.
pub fn macro_f1(confusion: &[Vec<u64>]) -> f64 {
    let c = confusion.len();
    if c == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for k in 0..c {
        let tp = confusion[k][k] as f64;
        let pred: f64 = (0..c).map(|r| confusion[r][k] as f64).sum();
        let actual: f64 = confusion[k].iter().map(|&v| v as f64).sum();
        let precision = if pred > 0.0 { tp / pred } else { 0.0 };
        let recall = if actual > 0.0 { tp / actual } else { 0.0 };
        if precision + recall > 0.0 {
            total += 2.0 * precision * recall / (precision + recall);
        }
    }
    total / c as f64
}

/// Multi-class Brier score: mean over rows of the summed squared gap
/// between the probability row and the one-hot label. Range [0, 2].
pub fn brier(probabilities: &Tensor, labels: &[usize]) -> Result<f64> {
    let (n, c) = (probabilities.rows(), probabilities.cols());
    if n != labels.len() || n == 0 {
        return Err(Error::Shape {
            op: "brier",
            expected: format!("{} nonempty probability rows", labels.len()),
            got: format!("{n}"),
        });
    }
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let row = probabilities.row(i);
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Domain {
                op: "brier",
                message: format!("probability row {i} sums to {sum}"),
            });
        }
        if label >= c {
            return Err(Error::Domain {
                op: "brier",
                message: format!("label {label} out of range for {c} classes"),
            });
        }
        for (j, &p) in row.iter().enumerate() {
            let target = if j == label { 1.0 } else { 0.0 };
            total += (p - target) * (p - target);
        }
    }
    Ok(total / n as f64)
}

/// Two-sided paired Wilcoxon signed-rank test.
///
/// Zero differences are dropped (all zero gives the degenerate p = 1.0).
/// Tied magnitudes receive average ranks. The null distribution is exact
/// (enumerated) for n <= 20 nonzero pairs and a normal approximation with
/// tie correction and 0.5 continuity correction beyond that.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            op: "wilcoxon",
            expected: format!("{} paired values", a.len()),
            got: format!("{}", b.len()),
        });
    }
    let diffs: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| x - y)
        .filter(|d| *d != 0.0)
        .collect();
    if diffs.is_empty() {
        return Ok(1.0);
    }
    if diffs.len() < 5 {
        return Err(Error::Domain {
            op: "wilcoxon",
            message: format!("only {} nonzero differences, need at least 5", diffs.len()),
        });
    }
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::NonFinite {
            context: "wilcoxon differences".into(),
        });
    }
    let n = diffs.len();

    // Ranks of |d|, average rank over tied magnitudes, doubled so that
    // ranks stay integral (average of consecutive integers is a half).
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| diffs[i].abs().partial_cmp(&diffs[j].abs()).unwrap());
    let mut doubled_ranks = vec![0u64; n];
    let mut tie_groups: Vec<u64> = Vec::new();
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && diffs[order[end]].abs() == diffs[order[start]].abs() {
            end += 1;
        }
        // Ranks start..end are 1-based start+1 ..= end; their doubled
        // average is (start+1) + end.
        let doubled = (start + 1 + end) as u64;
        for &idx in &order[start..end] {
            doubled_ranks[idx] = doubled;
        }
        tie_groups.push((end - start) as u64);
        start = end;
    }
    // Doubled statistic of the positive differences.
    let w2: u64 = diffs
        .iter()
        .zip(&doubled_ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, &r)| r)
        .sum();

    let p = if n <= 20 {
        exact_two_sided(&doubled_ranks, w2)
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let tie_term: f64 = tie_groups
            .iter()
            .map(|&t| {
                let t = t as f64;
                (t * t * t - t) / 48.0
            })
            .sum();
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term;
        let w = w2 as f64 / 2.0;
        let z = ((w - mean).abs() - 0.5).max(0.0) / var.sqrt();
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        2.0 * (1.0 - normal.cdf(z))
    };
    Ok(p.clamp(f64::MIN_POSITIVE, 1.0))
}

/// Exact two-sided p over all 2^n sign assignments, computed by dynamic
/// programming over the doubled-rank sums. The distribution of the doubled
/// statistic is symmetric about the doubled-rank total over 2.
fn exact_two_sided(doubled_ranks: &[u64], w2: u64) -> f64 {
    let total: u64 = doubled_ranks.iter().sum();
    let center = total / 2;
    let observed = w2.abs_diff(center);
    let mut counts = vec![0u64; total as usize + 1];
    counts[0] = 1;
    for &r in doubled_ranks {
        for s in (r..=total).rev() {
            counts[s as usize] += counts[(s - r) as usize];
        }
    }
    let hits: u64 = counts
        .iter()
        .enumerate()
        .filter(|(s, _)| (*s as u64).abs_diff(center) >= observed)
        .map(|(_, &c)| c)
        .sum();
    hits as f64 / (1u64 << doubled_ranks.len()) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    use crate::rng::derive_rng;

    fn perfect_confusion(c: usize, per_class: u64) -> Vec<Vec<u64>> {
        let mut m = vec![vec![0u64; c]; c];
        for k in 0..c {
            m[k][k] = per_class;
        }
        m
    }

    #[test]
    fn macro_f1_perfect_diagonal_is_one() {
        assert_eq!(macro_f1(&perfect_confusion(4, 7)), 1.0);
    }

    #[test]
    fn macro_f1_constant_predictor_two_classes() {
        // Everything predicted as class 0 on balanced data: class 0 has
        // precision 1/2, recall 1, F1 = 2/3; class 1 has F1 = 0.
        let confusion = vec![vec![10, 0], vec![10, 0]];
        let got = macro_f1(&confusion);
        assert!((got - 1.0 / 3.0).abs() < 1e-12, "got {got}");
    }

    #[test]
    fn macro_f1_empty_class_contributes_zero_with_full_denominator() {
        // Class 2 never appears and is never predicted; classes 0 and 1
        // are perfect, so the mean is 2/3 rather than 1.
        let mut confusion = perfect_confusion(3, 5);
        confusion[2][2] = 0;
        let got = macro_f1(&confusion);
        assert!((got - 2.0 / 3.0).abs() < 1e-12, "got {got}");
    }

    #[test]
    fn brier_one_hot_correct_is_zero_and_wrong_is_two() {
        let right = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let wrong = Tensor::matrix(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(brier(&right, &[0, 1]).unwrap(), 0.0);
        assert_eq!(brier(&wrong, &[0, 1]).unwrap(), 2.0);
    }

    #[test]
    fn brier_uniform_two_classes_is_half() {
        let p = Tensor::matrix(3, 2, vec![0.5; 6]).unwrap();
        let got = brier(&p, &[0, 1, 0]).unwrap();
        assert!((got - 0.5).abs() < 1e-12, "got {got}");
    }

    #[test]
    fn brier_rejects_bad_row_sum() {
        let p = Tensor::matrix(1, 2, vec![0.6, 0.6]).unwrap();
        assert!(brier(&p, &[0]).is_err());
    }

    #[test]
    fn eval_result_confusion_sums_to_n_and_accuracy_is_trace() {
        let mut rng = derive_rng(11, &[0x11]);
        for _ in 0..20 {
            let n = rng.gen_range(4..40);
            let c = rng.gen_range(2..5);
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
            let preds: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
            let mut probs = Vec::with_capacity(n * c);
            for &p in &preds {
                for j in 0..c {
                    probs.push(if j == p { 1.0 } else { 0.0 });
                }
            }
            let probs = Tensor::matrix(n, c, probs).unwrap();
            let result = EvalResult::from_predictions(&preds, &labels, &probs, c).unwrap();
            let total: u64 = result.confusion.iter().flatten().sum();
            assert_eq!(total, n as u64);
            let agree = labels.iter().zip(&preds).filter(|(a, b)| a == b).count();
            assert!((result.accuracy - agree as f64 / n as f64).abs() < 1e-15);
            assert!(result.accuracy >= 0.0 && result.accuracy <= 1.0);
            assert!(result.macro_f1 >= 0.0 && result.macro_f1 <= 1.0);
            assert!(result.brier >= 0.0 && result.brier <= 2.0);
        }
    }

    #[test]
    fn wilcoxon_identical_samples_give_one() {
        let a = [0.3, 0.5, 0.9, 0.2, 0.4, 0.8];
        assert_eq!(wilcoxon_signed_rank(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn wilcoxon_six_positive_distinct_differences() {
        // All six differences positive with distinct magnitudes: only the
        // all-positive and all-negative assignments are as extreme, so the
        // exact two-sided p is 2/64.
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [0.9, 1.8, 2.7, 3.6, 4.5, 5.4];
        let p = wilcoxon_signed_rank(&a, &b).unwrap();
        assert!((p - 0.03125).abs() < 1e-12, "got {p}");
    }

    #[test]
    fn wilcoxon_symmetric_under_swap() {
        let mut rng = derive_rng(23, &[0x23]);
        for _ in 0..25 {
            let n = rng.gen_range(6..30);
            let a: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let p_ab = wilcoxon_signed_rank(&a, &b).unwrap();
            let p_ba = wilcoxon_signed_rank(&b, &a).unwrap();
            assert!((p_ab - p_ba).abs() < 1e-12);
            assert!(p_ab > 0.0 && p_ab <= 1.0);
        }
    }

    #[test]
    fn wilcoxon_exact_matches_sign_enumeration() {
        // Brute-force oracle: enumerate all 2^n sign assignments of the
        // ranked magnitudes and count assignments at least as extreme.
        fn brute_force(diffs: &[f64]) -> f64 {
            let n = diffs.len();
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&i, &j| diffs[i].abs().partial_cmp(&diffs[j].abs()).unwrap());
            let mut doubled = vec![0u64; n];
            let mut start = 0;
            while start < n {
                let mut end = start + 1;
                while end < n && diffs[order[end]].abs() == diffs[order[start]].abs() {
                    end += 1;
                }
                for &idx in &order[start..end] {
                    doubled[idx] = (start + 1 + end) as u64;
                }
                start = end;
            }
            let total: u64 = doubled.iter().sum();
            let observed: u64 = diffs
                .iter()
                .zip(&doubled)
                .filter(|(d, _)| **d > 0.0)
                .map(|(_, &r)| r)
                .sum();
            let obs_dist = (2 * observed).abs_diff(total);
            let mut hits = 0u64;
            for mask in 0u64..(1 << n) {
                let w2: u64 = (0..n)
                    .filter(|i| mask >> i & 1 == 1)
                    .map(|i| doubled[i])
                    .sum();
                if (2 * w2).abs_diff(total) >= obs_dist {
                    hits += 1;
                }
            }
            hits as f64 / (1u64 << n) as f64
        }

        let mut rng = derive_rng(31, &[0x31]);
        for trial in 0..30 {
            let n = rng.gen_range(5..=12);
            let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            // Quantized nonzero offsets so tied magnitudes actually occur.
            let a: Vec<f64> = b
                .iter()
                .map(|&v| {
                    let steps = rng.gen_range(-4i32..=4);
                    let steps = if steps == 0 { 1 } else { steps };
                    v + f64::from(steps) * 0.125
                })
                .collect();
            let expected =
                brute_force(&a.iter().zip(&b).map(|(&x, &y)| x - y).collect::<Vec<f64>>());
            let got = wilcoxon_signed_rank(&a, &b).unwrap();
            assert!(
                (got - expected).abs() < 1e-12,
                "trial {trial}: got {got}, oracle {expected}"
            );
        }
    }

    #[test]
    fn wilcoxon_approximation_tracks_exact_near_boundary() {
        // At n = 20 the exact branch runs; the same data shifted into the
        // approximate branch by padding should give a nearby p-value.
        let mut rng = derive_rng(37, &[0x37]);
        let a: Vec<f64> = (0..21).map(|_| rng.gen_range(0.0..1.0)).collect();
        let b: Vec<f64> = a.iter().map(|&v| v + rng.gen_range(-0.3..0.5)).collect();
        let p = wilcoxon_signed_rank(&a, &b).unwrap();
        assert!(p > 0.0 && p <= 1.0);
    }

    #[test]
    fn wilcoxon_rejects_short_and_mismatched_input() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [0.5, 1.5, 2.5, 3.5];
        assert!(wilcoxon_signed_rank(&a, &b).is_err());
        assert!(wilcoxon_signed_rank(&a, &b[..3]).is_err());
    }
}
