//! Per-label precision-recall evaluation, relative improvement, and
//! majority/minority aggregation.
//!
//! PR-AUC is computed as average precision (step integration over grouped
//! thresholds), not trapezoidal interpolation: samples with equal scores
//! enter the curve together, and each distinct threshold contributes
//! `delta_recall * precision`.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataset::{LabelVocabulary, MAJORITY_SHARE_THRESHOLD};
use crate::error::{Error, Result};

/// One PR point at a distinct score threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub recall: f64,
    pub precision: f64,
}

/// Precision-recall curve ordered by descending threshold (recall
/// non-decreasing along the list).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrCurve {
    pub label_name: String,
    pub points: Vec<PrPoint>,
    pub n_pos: usize,
    pub n: usize,
}

/// Builds the PR curve with grouped ties. Errors when no positive labels
/// exist (the curve is undefined).
pub fn precision_recall_curve(scores: &[f64], labels: &[bool], label_name: &str) -> Result<PrCurve> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "scores ({}) and labels ({}) must be nonempty and equal length",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Eval("scores must be finite".into()));
    }
    let n_pos = labels.iter().filter(|l| **l).count();
    if n_pos == 0 {
        return Err(Error::Eval(format!(
            "label {label_name:?} has no positives; PR curve undefined"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));

    let mut points = Vec::new();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0usize;
    while i < order.len() {
        let threshold = scores[order[i]];
        // all samples tied at this score enter together
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(PrPoint {
            threshold,
            recall: tp as f64 / n_pos as f64,
            precision: tp as f64 / (tp + fp) as f64,
        });
    }
    Ok(PrCurve {
        label_name: label_name.to_string(),
        points,
        n_pos,
        n: scores.len(),
    })
}

/// Average precision: step integration `sum(delta_recall * precision)` over
/// the curve's thresholds.
pub fn auc_pr(curve: &PrCurve) -> f64 {
    let mut auc = 0.0;
    let mut prev_recall = 0.0;
    for p in &curve.points {
        auc += (p.recall - prev_recall) * p.precision;
        prev_recall = p.recall;
    }
    auc
}

/// Convenience: curve plus area in one call.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    Ok(auc_pr(&precision_recall_curve(scores, labels, "label")?))
}

/// Per-label PR-AUC on a prediction matrix. Labels without positives are
/// reported absent rather than scored zero.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelAucReport {
    pub vocabulary: LabelVocabulary,
    pub auc: Vec<Option<f64>>,
    pub n_pos: Vec<usize>,
    pub warnings: Vec<String>,
}

impl LabelAucReport {
    /// Unweighted mean over labels with a defined AUC.
    pub fn macro_auc(&self) -> Option<f64> {
        let present: Vec<f64> = self.auc.iter().flatten().copied().collect();
        if present.is_empty() {
            None
        } else {
            Some(present.iter().sum::<f64>() / present.len() as f64)
        }
    }
}

/// Independent PR-AUC per label column of `[n, c]` probabilities/targets.
pub fn per_label_report(
    probabilities: &Array2<f32>,
    targets: &Array2<f32>,
    vocabulary: &LabelVocabulary,
) -> Result<LabelAucReport> {
    if probabilities.dim() != targets.dim() {
        return Err(Error::Shape(format!(
            "probabilities {:?} vs targets {:?}",
            probabilities.dim(),
            targets.dim()
        )));
    }
    if probabilities.dim().1 != vocabulary.len() {
        return Err(Error::Shape(format!(
            "{} label columns vs vocabulary of {}",
            probabilities.dim().1,
            vocabulary.len()
        )));
    }
    let mut auc = Vec::with_capacity(vocabulary.len());
    let mut n_pos = Vec::with_capacity(vocabulary.len());
    let mut warnings = Vec::new();
    for l in 0..vocabulary.len() {
        let scores: Vec<f64> = probabilities.column(l).iter().map(|v| *v as f64).collect();
        let labels: Vec<bool> = targets.column(l).iter().map(|v| *v > 0.5).collect();
        let pos = labels.iter().filter(|v| **v).count();
        n_pos.push(pos);
        if pos == 0 {
            warnings.push(format!(
                "label {:?} has no test positives; skipped",
                vocabulary.name(l)
            ));
            auc.push(None);
        } else {
            auc.push(Some(auc_pr(&precision_recall_curve(
                &scores,
                &labels,
                vocabulary.name(l),
            )?)));
        }
    }
    Ok(LabelAucReport {
        vocabulary: vocabulary.clone(),
        auc,
        n_pos,
        warnings,
    })
}

/// Percent relative improvement `100 * (candidate - baseline) / baseline`.
pub fn relative_improvement(baseline_auc: f64, candidate_auc: f64) -> Result<f64> {
    if baseline_auc <= 0.0 {
        return Err(Error::Eval(format!(
            "relative improvement undefined for baseline auc {baseline_auc}"
        )));
    }
    Ok(100.0 * (candidate_auc - baseline_auc) / baseline_auc)
}

/// Baseline/candidate AUC rows plus the per-label relative-improvement row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub baseline: LabelAucReport,
    pub candidate: LabelAucReport,
    pub improvement_pct: Vec<Option<f64>>,
}

impl ComparisonReport {
    pub fn new(baseline: LabelAucReport, candidate: LabelAucReport) -> Result<Self> {
        if baseline.vocabulary != candidate.vocabulary {
            return Err(Error::Config("vocabulary mismatch between reports".into()));
        }
        let improvement_pct = baseline
            .auc
            .iter()
            .zip(&candidate.auc)
            .map(|(b, c)| match (b, c) {
                (Some(b), Some(c)) if *b > 0.0 => Some(100.0 * (c - b) / b),
                _ => None,
            })
            .collect();
        Ok(Self {
            baseline,
            candidate,
            improvement_pct,
        })
    }
}

/// Group means of per-label relative improvement, split at the strict 5%
/// sample-share threshold.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupImprovement {
    pub majority_avg: Option<f64>,
    pub minority_avg: Option<f64>,
    pub majority_labels: Vec<usize>,
    pub warnings: Vec<String>,
}

/// Unweighted mean improvement within the majority (`share > 0.05`) and
/// minority groups. Empty groups yield an absent value with a warning.
pub fn majority_minority_aggregate(
    report: &ComparisonReport,
    shares: &[f64],
) -> Result<GroupImprovement> {
    let c = report.baseline.vocabulary.len();
    if shares.len() != c {
        return Err(Error::Shape(format!(
            "shares length {} vs vocabulary {}",
            shares.len(),
            c
        )));
    }
    let mut majority = Vec::new();
    let mut major_vals = Vec::new();
    let mut minor_vals = Vec::new();
    let mut warnings = Vec::new();
    for l in 0..c {
        let is_major = shares[l] > MAJORITY_SHARE_THRESHOLD;
        if is_major {
            majority.push(l);
        }
        match report.improvement_pct[l] {
            Some(v) => {
                if is_major {
                    major_vals.push(v);
                } else {
                    minor_vals.push(v);
                }
            }
            None => warnings.push(format!(
                "label {:?} has no improvement value; excluded from group mean",
                report.baseline.vocabulary.name(l)
            )),
        }
    }
    let mean = |vals: &[f64]| {
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    };
    let majority_avg = mean(&major_vals);
    let minority_avg = mean(&minor_vals);
    if majority_avg.is_none() {
        warnings.push("majority group empty; average absent".into());
    }
    if minority_avg.is_none() {
        warnings.push("minority group empty; average absent".into());
    }
    Ok(GroupImprovement {
        majority_avg,
        minority_avg,
        majority_labels: majority,
        warnings,
    })
}

fn fmt_opt(v: &Option<f64>, decimals: usize) -> String {
    match v {
        Some(x) => format!("{x:.decimals$}"),
        None => "absent".to_string(),
    }
}

/// Renders a comparison as CSV: header of labels plus macro column, then
/// baseline/candidate AUC rows (3 decimals) and the improvement row
/// (2 decimals).
pub fn comparison_table_csv(report: &ComparisonReport) -> String {
    let vocab = &report.baseline.vocabulary;
    let mut out = String::from("row");
    for name in &vocab.names {
        out.push(',');
        out.push_str(&name.replace(',', ";"));
    }
    out.push_str(",macro\n");
    let row = |tag: &str, values: &[Option<f64>], decimals: usize, macro_v: Option<f64>| {
        let mut line = tag.to_string();
        for v in values {
            line.push(',');
            line.push_str(&fmt_opt(v, decimals));
        }
        line.push(',');
        line.push_str(&fmt_opt(&macro_v, decimals));
        line.push('\n');
        line
    };
    out.push_str(&row("baseline_auc", &report.baseline.auc, 3, report.baseline.macro_auc()));
    out.push_str(&row("candidate_auc", &report.candidate.auc, 3, report.candidate.macro_auc()));
    let macro_imp = {
        let vals: Vec<f64> = report.improvement_pct.iter().flatten().copied().collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    };
    out.push_str(&row(
        "relative_improvement_pct",
        &report.improvement_pct,
        2,
        macro_imp,
    ));
    out
}

/// Same table as Markdown.
pub fn comparison_table_markdown(report: &ComparisonReport, title: &str) -> String {
    let vocab = &report.baseline.vocabulary;
    let mut out = format!("### {title}\n\n| row |");
    for name in &vocab.names {
        out.push_str(&format!(" {name} |"));
    }
    out.push_str(" macro |\n|---|");
    for _ in 0..=vocab.len() {
        out.push_str("---|");
    }
    out.push('\n');
    let mut push_row = |tag: &str, values: &[Option<f64>], decimals: usize, macro_v: Option<f64>| {
        out.push_str(&format!("| {tag} |"));
        for v in values {
            out.push_str(&format!(" {} |", fmt_opt(v, decimals)));
        }
        out.push_str(&format!(" {} |\n", fmt_opt(&macro_v, decimals)));
    };
    push_row("baseline AUC", &report.baseline.auc, 3, report.baseline.macro_auc());
    push_row("candidate AUC", &report.candidate.auc, 3, report.candidate.macro_auc());
    let macro_imp = {
        let vals: Vec<f64> = report.improvement_pct.iter().flatten().copied().collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    };
    push_row("relative improvement %", &report.improvement_pct, 2, macro_imp);
    out
}

/// Brute-force average precision for distinct scores: mean over positives of
/// precision at each positive's rank. Test oracle; kept independent of the
/// curve-based route.
pub fn rank_enumeration_ap(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let n_pos = labels.iter().filter(|l| **l).count();
    if n_pos == 0 {
        return Err(Error::Eval("no positives".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut tp = 0usize;
    let mut total = 0.0f64;
    for (rank0, &idx) in order.iter().enumerate() {
        if labels[idx] {
            tp += 1;
            total += tp as f64 / (rank0 + 1) as f64;
        }
    }
    Ok(total / n_pos as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng as _;
    use rand::SeedableRng;

    #[test]
    fn perfect_ranking_gives_ap_one() {
        let curve = precision_recall_curve(&[0.9, 0.1], &[true, false], "t").unwrap();
        assert_eq!(curve.points[0].recall, 1.0);
        assert_eq!(curve.points[0].precision, 1.0);
        assert_eq!(auc_pr(&curve), 1.0);
    }

    #[test]
    fn single_positive_ranked_second_gives_half() {
        let ap = average_precision(&[0.9, 0.1], &[false, true]).unwrap();
        assert!((ap - 0.5).abs() < 1e-15);
    }

    #[test]
    fn three_sample_case_matches_hand_enumeration() {
        let ap = average_precision(&[0.8, 0.6, 0.4], &[true, false, true]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn all_positives_first_gives_one_and_single_positive_sample_one() {
        let ap = average_precision(&[0.9, 0.8, 0.1], &[true, true, false]).unwrap();
        assert!((ap - 1.0).abs() < 1e-15);
        let ap = average_precision(&[0.123], &[true]).unwrap();
        assert_eq!(ap, 1.0);
    }

    #[test]
    fn zero_positives_error() {
        assert!(precision_recall_curve(&[0.4, 0.2], &[false, false], "t").is_err());
    }

    #[test]
    fn tied_scores_enter_together() {
        // both samples share one threshold: one point with tp=1, fp=1
        let curve = precision_recall_curve(&[0.5, 0.5], &[true, false], "t").unwrap();
        assert_eq!(curve.points.len(), 1);
        assert_eq!(curve.points[0].recall, 1.0);
        assert_eq!(curve.points[0].precision, 0.5);
        assert_eq!(auc_pr(&curve), 0.5);
    }

    #[test]
    fn recall_is_non_decreasing() {
        let scores = [0.1, 0.9, 0.5, 0.7, 0.2, 0.9];
        let labels = [true, false, true, true, false, true];
        let curve = precision_recall_curve(&scores, &labels, "t").unwrap();
        for w in curve.points.windows(2) {
            assert!(w[1].recall >= w[0].recall);
            assert!(w[1].threshold < w[0].threshold);
        }
    }

    #[test]
    fn matches_rank_enumeration_oracle_n8() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        for n in 1..=8usize {
            for mask in 1u32..(1 << n) {
                let labels: Vec<bool> = (0..n).map(|i| mask & (1 << i) != 0).collect();
                for _ in 0..3 {
                    let mut scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
                    // enforce distinctness
                    scores.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    for i in 1..n {
                        if scores[i] <= scores[i - 1] {
                            scores[i] = scores[i - 1] + 1e-6;
                        }
                    }
                    // random ordering of the distinct values
                    for i in (1..n).rev() {
                        let j = rng.gen_range(0..=i);
                        scores.swap(i, j);
                    }
                    let fast = average_precision(&scores, &labels).unwrap();
                    let brute = rank_enumeration_ap(&scores, &labels).unwrap();
                    assert!(
                        (fast - brute).abs() <= 1e-12,
                        "n={n} mask={mask:b}: {fast} vs {brute}"
                    );
                }
            }
        }
    }

    #[test]
    fn per_label_report_matches_single_label_calls() {
        let probs = ndarray::arr2(&[[0.9f32, 0.2], [0.3, 0.8], [0.7, 0.1], [0.2, 0.5]]);
        let targets = ndarray::arr2(&[[1.0f32, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]]);
        let vocab = LabelVocabulary {
            names: vec!["a".into(), "b".into()],
        };
        let report = per_label_report(&probs, &targets, &vocab).unwrap();
        for l in 0..2 {
            let scores: Vec<f64> = probs.column(l).iter().map(|v| *v as f64).collect();
            let labels: Vec<bool> = targets.column(l).iter().map(|v| *v > 0.5).collect();
            let expect = average_precision(&scores, &labels).unwrap();
            assert!((report.auc[l].unwrap() - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn permuting_samples_leaves_auc_unchanged() {
        let probs = ndarray::arr2(&[[0.9f32], [0.3], [0.7], [0.2], [0.5]]);
        let targets = ndarray::arr2(&[[1.0f32], [0.0], [0.0], [1.0], [1.0]]);
        let vocab = LabelVocabulary { names: vec!["a".into()] };
        let base = per_label_report(&probs, &targets, &vocab).unwrap().auc[0].unwrap();
        let perm = [4usize, 2, 0, 3, 1];
        let probs_p = ndarray::Array2::from_shape_fn((5, 1), |(i, j)| probs[[perm[i], j]]);
        let targets_p = ndarray::Array2::from_shape_fn((5, 1), |(i, j)| targets[[perm[i], j]]);
        let permuted = per_label_report(&probs_p, &targets_p, &vocab).unwrap().auc[0].unwrap();
        assert!((base - permuted).abs() < 1e-15);
    }

    #[test]
    fn all_negative_label_is_absent_not_zero() {
        let probs = ndarray::arr2(&[[0.9f32, 0.2], [0.3, 0.8]]);
        let targets = ndarray::arr2(&[[1.0f32, 0.0], [0.0, 0.0]]);
        let vocab = LabelVocabulary {
            names: vec!["a".into(), "b".into()],
        };
        let report = per_label_report(&probs, &targets, &vocab).unwrap();
        assert!(report.auc[0].is_some());
        assert!(report.auc[1].is_none());
        assert_eq!(report.n_pos[1], 0);
        assert_eq!(report.warnings.len(), 1);
    }

    #[test]
    fn relative_improvement_reference_values() {
        let ri = relative_improvement(0.809, 0.870).unwrap();
        assert!((ri - 7.54).abs() < 0.01, "{ri}");
        let ri = relative_improvement(0.596, 0.807).unwrap();
        assert!((ri - 35.40).abs() < 0.01, "{ri}");
        let ri = relative_improvement(0.5, 0.5).unwrap();
        assert_eq!(ri, 0.0);
        assert!(relative_improvement(0.0, 0.5).is_err());
    }

    #[test]
    fn majority_minority_aggregation_means() {
        let vocab = LabelVocabulary {
            names: vec!["a".into(), "b".into()],
        };
        let mk = |aucs: Vec<Option<f64>>| LabelAucReport {
            vocabulary: vocab.clone(),
            auc: aucs,
            n_pos: vec![1, 1],
            warnings: vec![],
        };
        let report = ComparisonReport::new(
            mk(vec![Some(0.5), Some(0.5)]),
            mk(vec![Some(0.55), Some(0.6)]),
        )
        .unwrap();
        let groups = majority_minority_aggregate(&report, &[0.6, 0.02]).unwrap();
        assert!((groups.majority_avg.unwrap() - 10.0).abs() < 1e-9);
        assert!((groups.minority_avg.unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(groups.majority_labels, vec![0]);

        // all labels majority: minority average absent
        let groups = majority_minority_aggregate(&report, &[0.6, 0.6]).unwrap();
        assert!(groups.minority_avg.is_none());
        assert!(!groups.warnings.is_empty());
    }

    #[test]
    fn spec_majority_mean_example() {
        let vals = [7.54, 12.59, 11.98];
        let mean = vals.iter().sum::<f64>() / 3.0;
        assert!((mean - 10.70).abs() < 0.005, "{mean}");
    }

    #[test]
    fn csv_round_trips_at_stored_precision() {
        let vocab = LabelVocabulary {
            names: vec!["a".into(), "b".into()],
        };
        let mk = |aucs: Vec<Option<f64>>| LabelAucReport {
            vocabulary: vocab.clone(),
            auc: aucs,
            n_pos: vec![3, 2],
            warnings: vec![],
        };
        let report = ComparisonReport::new(
            mk(vec![Some(0.512345), Some(0.7)]),
            mk(vec![Some(0.61), Some(0.75)]),
        )
        .unwrap();
        let csv = comparison_table_csv(&report);
        let mut lines = csv.lines();
        let header = lines.next().unwrap();
        assert_eq!(header, "row,a,b,macro");
        let baseline: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(baseline[1], "0.512");
        let parsed: f64 = baseline[1].parse().unwrap();
        assert_eq!(format!("{parsed:.3}"), "0.512");
    }

    proptest! {
        #[test]
        fn ap_is_invariant_under_monotone_transforms(
            raw in proptest::collection::vec((0.0f64..1.0, any::<bool>()), 2..40)
        ) {
            let mut scores: Vec<f64> = raw.iter().map(|(s, _)| *s).collect();
            let labels: Vec<bool> = raw.iter().map(|(_, l)| *l).collect();
            prop_assume!(labels.iter().any(|l| *l));
            // deduplicate scores to keep the transform strictly monotone on ties too
            scores.iter_mut().enumerate().for_each(|(i, s)| *s += i as f64 * 1e-12);
            let base = average_precision(&scores, &labels).unwrap();
            let transformed: Vec<f64> = scores.iter().map(|s| (3.0 * s + 1.0).exp()).collect();
            let after = average_precision(&transformed, &labels).unwrap();
            prop_assert!((base - after).abs() < 1e-9, "{base} vs {after}");
        }

        #[test]
        fn ap_lies_between_worst_case_and_one(
            raw in proptest::collection::vec((0.0f64..1.0, any::<bool>()), 1..40)
        ) {
            let scores: Vec<f64> = raw.iter().enumerate().map(|(i, (s, _))| s + i as f64 * 1e-12).collect();
            let labels: Vec<bool> = raw.iter().map(|(_, l)| *l).collect();
            prop_assume!(labels.iter().any(|l| *l));
            let ap = average_precision(&scores, &labels).unwrap();
            let n = labels.len();
            let p = labels.iter().filter(|l| **l).count();
            // exact minimum: positives ranked last
            let worst: f64 = (1..=p).map(|i| i as f64 / (n - p + i) as f64).sum::<f64>() / p as f64;
            prop_assert!(ap >= worst - 1e-12);
            prop_assert!(ap <= 1.0 + 1e-12);
        }
    }
}
