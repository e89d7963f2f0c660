//! Ranking and correlation metrics, fold aggregation, modality ablations,
//! per-family structure/yield analysis, and the screen-then-confirm policy.
//!
//! Ties are handled deterministically throughout: AUROC credits tied
//! positive/negative pairs 0.5, the average-precision sum groups equal
//! scores into one threshold, and rank correlations use average ranks.

use std::collections::BTreeMap;

use ndarray::Axis;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::SignatureSet;
use crate::error::{CoreError, Result};
use crate::fusion::{assemble, fit_apply_scaler, FeatureBlock, Modality, ModalityMask};
use crate::linear::{fit_logistic, predict_proba, LinearConfig};
use crate::splits::SplitPlan;

fn check_scores_labels(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(CoreError::dimension("scores and labels differ in length"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(CoreError::numerical("scores contain non-finite values"));
    }
    if labels.iter().any(|l| *l > 1) {
        return Err(CoreError::config("labels must be 0 or 1"));
    }
    Ok(())
}

/// Average ranks (1-based); tied values share the mean of their ranks.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap().then(a.cmp(&b)));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[order[k]] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Probability that a random positive outranks a random negative, ties
/// credited one half. Requires both classes.
pub fn auroc(scores: &[f64], labels: &[u8], positive_class: u8) -> Result<f64> {
    check_scores_labels(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l == positive_class).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(CoreError::config("AUROC is undefined with a single class"));
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == positive_class)
        .map(|(r, _)| *r)
        .sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Average precision: `Σ (Rᵢ − Rᵢ₋₁)·Pᵢ` over descending-score thresholds,
/// with equal scores grouped into a single threshold. Requires at least
/// one positive.
pub fn auprc(scores: &[f64], labels: &[u8], positive_class: u8) -> Result<f64> {
    check_scores_labels(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l == positive_class).count();
    if n_pos == 0 {
        return Err(CoreError::config("average precision is undefined without positives"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));

    let mut ap = 0.0;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        for k in i..=j {
            if labels[order[k]] == positive_class {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j + 1;
    }
    Ok(ap)
}

/// Product-moment correlation. Errors on constant input.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(CoreError::dimension("vectors differ in length"));
    }
    if x.len() < 2 {
        return Err(CoreError::config("correlation needs at least 2 points"));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(CoreError::numerical("correlation input contains non-finite values"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for i in 0..x.len() {
        let dx = x[i] - mx;
        let dy = y[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(CoreError::config("correlation is undefined for a constant vector"));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Rank correlation: Pearson on average-ranked data.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(CoreError::dimension("vectors differ in length"));
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Binary confusion counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn new(tp: usize, fp: usize, fn_: usize, tn: usize) -> Confusion {
        Confusion { tp, fp, fn_, tn }
    }

    pub fn from_labels(predicted: &[u8], actual: &[u8], positive_class: u8) -> Confusion {
        let mut c = Confusion::new(0, 0, 0, 0);
        for (&p, &a) in predicted.iter().zip(actual) {
            match (p == positive_class, a == positive_class) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// Accuracy/precision/recall; a metric with a zero denominator is `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMetrics {
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

pub fn confusion_metrics(c: &Confusion) -> ConfusionMetrics {
    let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    ConfusionMetrics {
        accuracy: ratio(c.tp + c.tn, c.total()),
        precision: ratio(c.tp, c.tp + c.fp),
        recall: ratio(c.tp, c.tp + c.fn_),
    }
}

/// Screen-then-confirm policy outcome: advancing only predicted positives
/// makes the fraction of confirmed passes equal the classifier precision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScreeningReport {
    pub efficiency: f64,
    pub abs_gain: f64,
    pub mult_gain: f64,
}

pub fn screening_efficiency(c: &Confusion, baseline_prevalence: f64) -> Result<ScreeningReport> {
    if c.tp + c.fp == 0 {
        return Err(CoreError::config("no predicted positives; efficiency undefined"));
    }
    if !(baseline_prevalence > 0.0 && baseline_prevalence <= 1.0) {
        return Err(CoreError::config("baseline prevalence must be in (0, 1]"));
    }
    let efficiency = c.tp as f64 / (c.tp + c.fp) as f64;
    Ok(ScreeningReport {
        efficiency,
        abs_gain: efficiency - baseline_prevalence,
        mult_gain: efficiency / baseline_prevalence,
    })
}

/// Mean, population standard deviation, and raw per-fold values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub mean: f64,
    pub std: f64,
    pub folds: Vec<f64>,
}

pub fn aggregate_folds(values: &[f64]) -> Result<FoldSummary> {
    if values.is_empty() {
        return Err(CoreError::config("need at least one fold value"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(FoldSummary { mean, std: var.sqrt(), folds: values.to_vec() })
}

/// Named metric summaries over a set of folds.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FoldReport {
    pub metrics: BTreeMap<String, FoldSummary>,
}

impl FoldReport {
    pub fn from_per_fold(per_fold: &BTreeMap<String, Vec<f64>>) -> Result<FoldReport> {
        let mut metrics = BTreeMap::new();
        for (name, values) in per_fold {
            metrics.insert(name.clone(), aggregate_folds(values)?);
        }
        Ok(FoldReport { metrics })
    }

    pub fn get(&self, name: &str) -> Option<&FoldSummary> {
        self.metrics.get(name)
    }
}

/// The seven ablation masks: each single modality among {seq, struct, rmsd},
/// each pair, and the triple.
pub fn ablation_masks() -> [ModalityMask; 7] {
    use Modality::{Rmsd, Seq, Struct};
    [
        ModalityMask::of(&[Seq]),
        ModalityMask::of(&[Struct]),
        ModalityMask::of(&[Rmsd]),
        ModalityMask::of(&[Seq, Struct]),
        ModalityMask::of(&[Seq, Rmsd]),
        ModalityMask::of(&[Struct, Rmsd]),
        ModalityMask::of(&[Seq, Struct, Rmsd]),
    ]
}

/// One ablation row: a mask and its fold-aggregated metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub mask: ModalityMask,
    pub report: FoldReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

/// Fit and score one mask on one fold; returns (auroc, auprc, accuracy).
fn eval_mask_fold(
    blocks: &[&FeatureBlock],
    mask: &ModalityMask,
    fold: &SplitPlan,
    labels: &[Option<u8>],
    cfg: &LinearConfig,
    positive_class: u8,
) -> Result<(f64, f64, f64)> {
    let design = assemble(blocks, mask)?;
    let labeled =
        |idx: &[usize]| -> Vec<usize> { idx.iter().copied().filter(|&i| labels[i].is_some()).collect() };
    let train_idx = labeled(&fold.train);
    let test_idx = labeled(&fold.test);
    if train_idx.len() < 2 || test_idx.is_empty() {
        return Err(CoreError::config("fold has too few labeled rows"));
    }

    let mut x_train = design.data.select(Axis(0), &train_idx);
    let mut x_test = design.data.select(Axis(0), &test_idx);
    fit_apply_scaler(&mut x_train, &mut x_test, &design.continuous_columns())?;

    let y_train: Vec<f64> = train_idx.iter().map(|&i| f64::from(labels[i].unwrap())).collect();
    let y_test: Vec<u8> = test_idx.iter().map(|&i| labels[i].unwrap()).collect();

    let model = fit_logistic(x_train.view(), &y_train, *cfg)?;
    let proba = predict_proba(&model, x_test.view())?;
    let scores: Vec<f64> =
        if positive_class == 1 { proba.clone() } else { proba.iter().map(|p| 1.0 - p).collect() };
    let auroc_v = auroc(&scores, &y_test, positive_class)?;
    let auprc_v = auprc(&scores, &y_test, positive_class)?;
    let pred: Vec<u8> = proba.iter().map(|&p| u8::from(p >= 0.5)).collect();
    let acc = confusion_metrics(&Confusion::from_labels(&pred, &y_test, 1))
        .accuracy
        .expect("non-empty test set");
    Ok((auroc_v, auprc_v, acc))
}

/// Run the seven-configuration modality ablation with a linear classifier.
///
/// The same folds are reused across every mask. The mask set must be
/// exactly the canonical seven.
pub fn ablation_run(
    blocks: &[&FeatureBlock],
    masks: &[ModalityMask],
    folds: &[SplitPlan],
    labels: &[Option<u8>],
    cfg: LinearConfig,
    positive_class: u8,
) -> Result<AblationTable> {
    let expected = ablation_masks();
    if masks.len() != 7 || masks.iter().any(|m| !expected.contains(m)) {
        return Err(CoreError::config(
            "ablation requires exactly the seven canonical modality masks",
        ));
    }
    if folds.is_empty() {
        return Err(CoreError::config("ablation needs at least one fold"));
    }

    let mut rows = Vec::with_capacity(masks.len());
    for mask in masks {
        let per_fold: Vec<Result<(f64, f64, f64)>> = folds
            .par_iter()
            .map(|fold| eval_mask_fold(blocks, mask, fold, labels, &cfg, positive_class))
            .collect();
        let mut metric_values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for r in per_fold {
            let (a, p, acc) = r?;
            metric_values.entry("auroc".into()).or_default().push(a);
            metric_values.entry("auprc".into()).or_default().push(p);
            metric_values.entry("accuracy".into()).or_default().push(acc);
        }
        rows.push(AblationRow { mask: *mask, report: FoldReport::from_per_fold(&metric_values)? });
    }
    Ok(AblationTable { rows })
}

/// One family's RMSD/yield correlations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FamilyCorrRow {
    pub family: String,
    pub n: usize,
    pub r_vh: f64,
    pub r_vl: f64,
    pub r_sum: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FamilyRmsdReport {
    /// Qualifying families, sorted by |combined correlation| descending.
    pub rows: Vec<FamilyCorrRow>,
    /// Families skipped, with the reason.
    pub skipped: Vec<(String, String)>,
}

/// Within-family Pearson correlations between yield and VH RMSD, VL RMSD,
/// and their sum. Families with fewer than 3 yield-bearing members, or with
/// constant columns, are skipped with a note.
pub fn family_rmsd_yield_report(
    sigs: &SignatureSet,
    rmsd_vh: &[f64],
    rmsd_vl: &[f64],
) -> Result<FamilyRmsdReport> {
    if rmsd_vh.len() != sigs.len() || rmsd_vl.len() != sigs.len() {
        return Err(CoreError::dimension("RMSD vectors must align with the signature set"));
    }
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for (family, members) in &sigs.family_index {
        let mut yields = Vec::new();
        let mut vh = Vec::new();
        let mut vl = Vec::new();
        for &i in members {
            if let Some(y) = sigs.signatures[i].yield_mean {
                yields.push(y);
                vh.push(rmsd_vh[i]);
                vl.push(rmsd_vl[i]);
            }
        }
        if yields.len() < 3 {
            skipped.push((family.clone(), format!("only {} yield values", yields.len())));
            continue;
        }
        let sum: Vec<f64> = vh.iter().zip(&vl).map(|(a, b)| a + b).collect();
        match (pearson(&vh, &yields), pearson(&vl, &yields), pearson(&sum, &yields)) {
            (Ok(r_vh), Ok(r_vl), Ok(r_sum)) => {
                rows.push(FamilyCorrRow { family: family.clone(), n: yields.len(), r_vh, r_vl, r_sum });
            }
            _ => skipped.push((family.clone(), "constant column".to_string())),
        }
    }
    rows.sort_by(|a, b| {
        b.r_sum.abs().partial_cmp(&a.r_sum.abs()).unwrap().then(a.family.cmp(&b.family))
    });
    Ok(FamilyRmsdReport { rows, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_perfect_and_ties() {
        let labels = [1u8, 1, 0, 0];
        assert_eq!(auroc(&[0.9, 0.8, 0.2, 0.1], &labels, 1).unwrap(), 1.0);
        assert_eq!(auroc(&[0.5, 0.5, 0.5, 0.5], &labels, 1).unwrap(), 0.5);
        // (0.9,1),(0.8,0),(0.7,1),(0.6,0): 3 of 4 pos–neg pairs concordant.
        assert_eq!(auroc(&[0.9, 0.8, 0.7, 0.6], &[1, 0, 1, 0], 1).unwrap(), 0.75);
    }

    #[test]
    fn auroc_single_class_errors() {
        assert!(auroc(&[0.1, 0.9], &[1, 1], 1).is_err());
    }

    #[test]
    fn auroc_complement_identity() {
        let scores = [0.3, 0.1, 0.9, 0.5, 0.5, 0.2];
        let labels = [0u8, 1, 1, 0, 1, 0];
        let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
        let a = auroc(&scores, &labels, 1).unwrap();
        let b = auroc(&neg, &labels, 1).unwrap();
        assert_eq!(a + b, 1.0);
    }

    #[test]
    fn auprc_perfect_and_flat() {
        let labels = [1u8, 1, 0, 0];
        assert_eq!(auprc(&[0.9, 0.8, 0.2, 0.1], &labels, 1).unwrap(), 1.0);
        // All-equal scores collapse to one threshold: AP = prevalence.
        assert_eq!(auprc(&[0.4; 4], &labels, 1).unwrap(), 0.5);
        assert!(auprc(&[0.4; 4], &[0, 0, 0, 0], 1).is_err());
    }

    #[test]
    fn pearson_spearman_basics() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        assert!((pearson(&x, &y).unwrap() - 1.0).abs() <= 1e-12);
        assert!((spearman(&x, &y).unwrap() - 1.0).abs() <= 1e-12);

        let cubic: Vec<f64> = x.iter().map(|v| -v.powi(3)).collect();
        assert!((spearman(&x, &cubic).unwrap() + 1.0).abs() <= 1e-12);

        assert!(pearson(&[1.0, 1.0], &[2.0, 3.0]).is_err());
    }

    #[test]
    fn spearman_matches_rank_then_pearson_with_ties() {
        let x = [1.0, 1.0, 2.0];
        let y = [3.0, 5.0, 4.0];
        // ranks x = (1.5, 1.5, 3), ranks y = (1, 3, 2)
        let expected = pearson(&[1.5, 1.5, 3.0], &[1.0, 3.0, 2.0]).unwrap();
        assert_eq!(spearman(&x, &y).unwrap(), expected);
    }

    #[test]
    fn confusion_case_study() {
        let c = Confusion::new(34, 5, 0, 16);
        let m = confusion_metrics(&c);
        assert!((m.precision.unwrap() - 0.872).abs() <= 1e-3);
        assert_eq!(m.recall.unwrap(), 1.0);
        assert!((m.accuracy.unwrap() - 0.909).abs() <= 1e-3);

        let s = screening_efficiency(&c, 0.618).unwrap();
        assert!((s.abs_gain - 0.254).abs() <= 1e-3);
        assert!((s.mult_gain - 1.41).abs() <= 1e-2);
    }

    #[test]
    fn undefined_metrics_are_none() {
        let m = confusion_metrics(&Confusion::new(0, 3, 0, 5));
        assert!(m.recall.is_none());
        assert!(m.precision.is_some());
        assert!(screening_efficiency(&Confusion::new(0, 0, 2, 2), 0.5).is_err());
        assert!(screening_efficiency(&Confusion::new(1, 1, 0, 0), 1.5).is_err());
    }

    #[test]
    fn all_positive_predictions_make_efficiency_equal_prevalence() {
        // Classifier predicts everything positive: precision = prevalence.
        let actual = [1u8, 0, 1, 1, 0];
        let predicted = [1u8; 5];
        let c = Confusion::from_labels(&predicted, &actual, 1);
        let prevalence = 3.0 / 5.0;
        let s = screening_efficiency(&c, prevalence).unwrap();
        assert_eq!(s.efficiency, prevalence);
        assert_eq!(s.abs_gain, 0.0);
    }

    #[test]
    fn fold_aggregation() {
        let s = aggregate_folds(&[80.0, 90.0]).unwrap();
        assert_eq!(s.mean, 85.0);
        assert_eq!(s.std, 5.0);
        let one = aggregate_folds(&[42.0]).unwrap();
        assert_eq!(one.std, 0.0);
        let same = aggregate_folds(&[7.0; 10]).unwrap();
        assert_eq!(same.std, 0.0);
    }

    #[test]
    fn ablation_mask_set_is_enforced() {
        let masks = [ModalityMask::of(&[Modality::Seq]); 7];
        let err = ablation_run(&[], &masks, &[], &[], LinearConfig::classification_default(), 0);
        assert!(err.is_err());
    }

    #[test]
    fn family_report_reproduces_planted_signs() {
        use crate::dataset::{aggregate_by_signature, Orientation, ReformatRecord};
        let mut records = Vec::new();
        let mut rmsd_values = Vec::new();
        for (f, sign) in [("famA", 1.0), ("famB", -1.0)] {
            for m in 0..6 {
                let r = m as f64 + 1.0;
                records.push(ReformatRecord {
                    record_id: format!("{f}{m}"),
                    vh_seq: format!("{}CDEF{}", if f == "famA" { "A" } else { "W" }, "G".repeat(m + 1)),
                    vl_seq: "GHIKL".to_string(),
                    linker_id: "L1".to_string(),
                    orientation: Orientation::VhVl,
                    parental_family: f.to_string(),
                    campaign: "c".to_string(),
                    qc_pass: None,
                    yield_ng_per_ul: Some(10.0 + sign * 2.0 * r),
                    sec_main_peak_pct: None,
                });
                rmsd_values.push((f.to_string(), r));
            }
        }
        let sigs = aggregate_by_signature(&records).unwrap();
        // Align the RMSD vector to the aggregated order via the family and yield.
        let mut vh = vec![0.0; sigs.len()];
        for (i, sig) in sigs.signatures.iter().enumerate() {
            let y = sig.yield_mean.unwrap();
            let sign = if sig.parental_family == "famA" { 1.0 } else { -1.0 };
            vh[i] = (y - 10.0) / (2.0 * sign);
        }
        let vl = vh.clone();
        let report = family_rmsd_yield_report(&sigs, &vh, &vl).unwrap();
        assert_eq!(report.rows.len(), 2);
        for row in &report.rows {
            let expected = if row.family == "famA" { 1.0 } else { -1.0 };
            assert!((row.r_vh - expected).abs() <= 1e-9, "{row:?}");
            assert!((row.r_sum - expected).abs() <= 1e-9);
        }
    }

    #[test]
    fn family_report_skips_small_families() {
        use crate::splits::tests_support::toy_sigs_with_yields;
        let sigs = toy_sigs_with_yields(&[2, 5]);
        let vh: Vec<f64> = (0..sigs.len()).map(|i| i as f64).collect();
        let vl = vh.clone();
        let report = family_rmsd_yield_report(&sigs, &vh, &vl).unwrap();
        assert_eq!(report.rows.len(), 1);
        assert_eq!(report.skipped.len(), 1);
    }
}
