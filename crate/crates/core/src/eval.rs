//! Macro (per-class mean) accuracy, expert top-k curves, confusion matrices,
//! confusion diffs, accuracy-binned class comparisons and confidence routing.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data_model::{ClassId, ExpertPrediction, SpeciesVocabulary, TestItem};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("no prediction for test image {0}")]
    MissingPrediction(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("bins do not partition [0, 1]: {0}")]
    NonPartitionBins(String),
    #[error("class {0} is not in the vocabulary")]
    UnknownClass(ClassId),
}

/// Final per-image answers. `None` is the open-vocabulary no-match sentinel
/// and always counts as wrong.
pub type FinalPredictions = BTreeMap<String, Option<ClassId>>;

/// Row = true class, column = predicted class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub rows: Vec<Vec<u64>>,
    /// Per true class, items whose answer matched no class.
    pub unmatched: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn zeros(classes: usize) -> Self {
        Self {
            rows: vec![vec![0; classes]; classes],
            unmatched: vec![0; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.rows.len()
    }

    pub fn trace(&self) -> u64 {
        (0..self.rows.len()).map(|i| self.rows[i][i]).sum()
    }

    pub fn total(&self) -> u64 {
        self.rows.iter().flatten().sum::<u64>() + self.unmatched.iter().sum::<u64>()
    }

    /// Items of true class `i`, unmatched answers included.
    pub fn row_total(&self, i: usize) -> u64 {
        self.rows[i].iter().sum::<u64>() + self.unmatched[i]
    }

    pub fn to_csv(&self) -> String {
        let c = self.classes();
        let mut out = String::from("true\\pred");
        for j in 0..c {
            let _ = write!(out, ",{j}");
        }
        out.push_str(",unmatched\n");
        for (i, row) in self.rows.iter().enumerate() {
            let _ = write!(out, "{i}");
            for v in row {
                let _ = write!(out, ",{v}");
            }
            let _ = writeln!(out, ",{}", self.unmatched[i]);
        }
        out
    }
}

/// Everything computed from predictions and ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Unweighted mean of `per_class_accuracy`.
    pub mean_accuracy: f64,
    /// `trace / total`; for reference only.
    pub micro_accuracy: f64,
    /// Classes with at least one test item.
    pub per_class_accuracy: BTreeMap<ClassId, f64>,
    pub n_per_class: BTreeMap<ClassId, u64>,
    /// Expert-side macro top-k accuracy, when expert predictions are known.
    #[serde(default)]
    pub topk_accuracy: BTreeMap<usize, f64>,
    pub confusion: ConfusionMatrix,
}

/// Per-class accuracies from a confusion matrix, macro-averaged over classes
/// with items.
fn summarize(confusion: ConfusionMatrix) -> Metrics {
    let mut per_class = BTreeMap::new();
    let mut n_per_class = BTreeMap::new();
    for i in 0..confusion.classes() {
        let n = confusion.row_total(i);
        if n > 0 {
            per_class.insert(ClassId(i as u32), confusion.rows[i][i] as f64 / n as f64);
            n_per_class.insert(ClassId(i as u32), n);
        }
    }
    let mean = if per_class.is_empty() {
        0.0
    } else {
        per_class.values().sum::<f64>() / per_class.len() as f64
    };
    let total = confusion.total();
    let micro = if total == 0 {
        0.0
    } else {
        confusion.trace() as f64 / total as f64
    };
    Metrics {
        mean_accuracy: mean,
        micro_accuracy: micro,
        per_class_accuracy: per_class,
        n_per_class,
        topk_accuracy: BTreeMap::new(),
        confusion,
    }
}

/// Scores final predictions against the test set.
pub fn evaluate(
    final_preds: &FinalPredictions,
    truth: &[TestItem],
    vocab: &SpeciesVocabulary,
) -> Result<Metrics, EvalError> {
    let mut confusion = ConfusionMatrix::zeros(vocab.len());
    for item in truth {
        if !vocab.contains(item.ground_truth) {
            return Err(EvalError::UnknownClass(item.ground_truth));
        }
        let pred = final_preds
            .get(&item.image_id)
            .ok_or_else(|| EvalError::MissingPrediction(item.image_id.clone()))?;
        let row = item.ground_truth.index();
        match pred {
            Some(p) if vocab.contains(*p) => confusion.rows[row][p.index()] += 1,
            Some(p) => return Err(EvalError::UnknownClass(*p)),
            None => confusion.unmatched[row] += 1,
        }
    }
    Ok(summarize(confusion))
}

/// Expert top-1 as final predictions.
pub fn expert_top1(experts: &[ExpertPrediction]) -> FinalPredictions {
    experts
        .iter()
        .map(|e| (e.image_id.clone(), Some(e.top1())))
        .collect()
}

/// Macro-averaged fraction of items whose true class is among the expert's
/// first `min(k, entries)` predictions.
pub fn topk_accuracy(
    experts: &[ExpertPrediction],
    truth: &[TestItem],
    k: usize,
) -> Result<f64, EvalError> {
    let by_id: HashMap<&str, &ExpertPrediction> =
        experts.iter().map(|e| (e.image_id.as_str(), e)).collect();
    let mut hits: BTreeMap<ClassId, (u64, u64)> = BTreeMap::new();
    for item in truth {
        let e = by_id
            .get(item.image_id.as_str())
            .ok_or_else(|| EvalError::MissingPrediction(item.image_id.clone()))?;
        let slot = hits.entry(item.ground_truth).or_default();
        slot.1 += 1;
        if e.top_classes(k).any(|c| c == item.ground_truth) {
            slot.0 += 1;
        }
    }
    if hits.is_empty() {
        return Ok(0.0);
    }
    Ok(hits
        .values()
        .map(|(h, n)| *h as f64 / *n as f64)
        .sum::<f64>()
        / hits.len() as f64)
}

/// Top-k accuracies for every `k` in `ks`.
pub fn topk_curve(
    experts: &[ExpertPrediction],
    truth: &[TestItem],
    ks: impl IntoIterator<Item = usize>,
) -> Result<BTreeMap<usize, f64>, EvalError> {
    ks.into_iter()
        .map(|k| topk_accuracy(experts, truth, k).map(|a| (k, a)))
        .collect()
}

/// Run context stored next to the metrics. Holds no timings, so a rerun with
/// the same fingerprint and the same model answers writes identical bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub strategy: String,
    pub model: Option<String>,
    pub k: Option<usize>,
    pub seed: Option<u64>,
    pub threshold: Option<f64>,
    pub dataset: String,
    pub items: usize,
    /// Items sent to the model; the rest keep the expert's top-1.
    pub routed: usize,
    pub fingerprint: String,
    /// The canonical settings the fingerprint digests.
    #[serde(default)]
    pub config: serde_json::Value,
    #[serde(default)]
    pub parse_status: BTreeMap<String, usize>,
    #[serde(default)]
    pub hard_errors: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: Metrics,
    pub metadata: ReportMetadata,
}

/// `after - before`, entrywise. Each row (including its unmatched column)
/// sums to zero when both reports cover the same test set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionDiff {
    pub rows: Vec<Vec<i64>>,
    pub unmatched: Vec<i64>,
}

impl ConfusionDiff {
    pub fn row_sum(&self, i: usize) -> i64 {
        self.rows[i].iter().sum::<i64>() + self.unmatched[i]
    }

    /// Non-zero cells as `(true, predicted, delta)`.
    pub fn nonzero(&self) -> Vec<(usize, usize, i64)> {
        let mut out = Vec::new();
        for (i, row) in self.rows.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                if *v != 0 {
                    out.push((i, j, *v));
                }
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let c = self.rows.len();
        let mut out = String::from("true\\pred");
        for j in 0..c {
            let _ = write!(out, ",{j}");
        }
        out.push_str(",unmatched\n");
        for (i, row) in self.rows.iter().enumerate() {
            let _ = write!(out, "{i}");
            for v in row {
                let _ = write!(out, ",{v}");
            }
            let _ = writeln!(out, ",{}", self.unmatched[i]);
        }
        out
    }
}

pub fn confusion_diff(before: &Metrics, after: &Metrics) -> Result<ConfusionDiff, EvalError> {
    let (b, a) = (&before.confusion, &after.confusion);
    if b.classes() != a.classes() {
        return Err(EvalError::ShapeMismatch(format!(
            "{} vs {} classes",
            b.classes(),
            a.classes()
        )));
    }
    if before.n_per_class != after.n_per_class {
        return Err(EvalError::ShapeMismatch(
            "reports cover different test sets".into(),
        ));
    }
    let rows = b
        .rows
        .iter()
        .zip(&a.rows)
        .map(|(rb, ra)| {
            rb.iter()
                .zip(ra)
                .map(|(x, y)| *y as i64 - *x as i64)
                .collect()
        })
        .collect();
    let unmatched = b
        .unmatched
        .iter()
        .zip(&a.unmatched)
        .map(|(x, y)| *y as i64 - *x as i64)
        .collect();
    Ok(ConfusionDiff { rows, unmatched })
}

/// Accuracy interval `[lo, hi)`; the last bin of a partition is closed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub lo: f64,
    pub hi: f64,
}

/// Ten equal-width bins over `[0, 1]`.
pub fn decile_bins() -> Vec<Bin> {
    (0..10)
        .map(|i| Bin {
            lo: i as f64 / 10.0,
            hi: (i + 1) as f64 / 10.0,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinRow {
    pub bin: Bin,
    pub classes: usize,
    pub mean_before: Option<f64>,
    pub mean_after: Option<f64>,
}

fn check_partition(bins: &[Bin]) -> Result<(), EvalError> {
    let first = bins
        .first()
        .ok_or_else(|| EvalError::NonPartitionBins("no bins".into()))?;
    if first.lo != 0.0 {
        return Err(EvalError::NonPartitionBins(format!(
            "starts at {}",
            first.lo
        )));
    }
    if bins.last().is_some_and(|b| b.hi != 1.0) {
        return Err(EvalError::NonPartitionBins("does not end at 1".into()));
    }
    for b in bins {
        if b.lo.partial_cmp(&b.hi) != Some(std::cmp::Ordering::Less) {
            return Err(EvalError::NonPartitionBins(format!(
                "empty bin [{}, {})",
                b.lo, b.hi
            )));
        }
    }
    for w in bins.windows(2) {
        if w[0].hi != w[1].lo {
            return Err(EvalError::NonPartitionBins(format!(
                "gap or overlap at {}",
                w[0].hi
            )));
        }
    }
    Ok(())
}

/// Groups classes by their `before` accuracy and averages both reports'
/// per-class accuracies inside each bin.
pub fn binned_improvement(
    before: &Metrics,
    after: &Metrics,
    bins: &[Bin],
) -> Result<Vec<BinRow>, EvalError> {
    check_partition(bins)?;
    let mut groups: Vec<Vec<(f64, f64)>> = vec![Vec::new(); bins.len()];
    for (class, &acc_before) in &before.per_class_accuracy {
        let acc_after = *after
            .per_class_accuracy
            .get(class)
            .ok_or_else(|| EvalError::ShapeMismatch(format!("class {class} missing from after")))?;
        let last = bins.len() - 1;
        let idx = bins
            .iter()
            .position(|b| acc_before >= b.lo && acc_before < b.hi)
            .unwrap_or(last);
        groups[idx].push((acc_before, acc_after));
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    Ok(bins
        .iter()
        .zip(groups)
        .map(|(bin, g)| {
            let b: Vec<f64> = g.iter().map(|x| x.0).collect();
            let a: Vec<f64> = g.iter().map(|x| x.1).collect();
            BinRow {
                bin: *bin,
                classes: g.len(),
                mean_before: mean(&b),
                mean_after: mean(&a),
            }
        })
        .collect())
}

/// Images whose maximum expert confidence is strictly below `threshold`.
pub fn threshold_select(experts: &[ExpertPrediction], threshold: f64) -> BTreeSet<String> {
    experts
        .iter()
        .filter(|e| e.max_confidence() < threshold)
        .map(|e| e.image_id.clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::SpeciesRecord;
    use std::path::PathBuf;

    fn vocab(n: u32) -> SpeciesVocabulary {
        SpeciesVocabulary::new(
            "t",
            (0..n)
                .map(|i| SpeciesRecord {
                    class_id: ClassId(i),
                    scientific_name: format!("G s{i}"),
                    common_names: vec![],
                    taxonomy: vec![],
                })
                .collect(),
        )
        .unwrap()
    }

    fn item(id: &str, gt: u32) -> TestItem {
        TestItem {
            image_id: id.into(),
            image_path: PathBuf::new(),
            ground_truth: ClassId(gt),
            resolved_path: PathBuf::new(),
        }
    }

    fn preds(pairs: &[(&str, Option<u32>)]) -> FinalPredictions {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.map(ClassId)))
            .collect()
    }

    fn expert(id: &str, order: &[(u32, f64)]) -> ExpertPrediction {
        ExpertPrediction {
            image_id: id.into(),
            expert_tag: "e".into(),
            entries: order.iter().map(|(c, p)| (ClassId(*c), *p)).collect(),
        }
    }

    #[test]
    fn two_class_macro() {
        let truth = [item("a", 0), item("b", 0), item("c", 1)];
        let m = evaluate(
            &preds(&[("a", Some(0)), ("b", Some(0)), ("c", Some(0))]),
            &truth,
            &vocab(2),
        )
        .unwrap();
        assert_eq!(m.per_class_accuracy[&ClassId(0)], 1.0);
        assert_eq!(m.per_class_accuracy[&ClassId(1)], 0.0);
        assert_eq!(m.mean_accuracy, 0.5);
        assert!((m.micro_accuracy - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn all_correct_and_absent_classes() {
        let truth = [item("a", 0), item("b", 2)];
        let m = evaluate(&preds(&[("a", Some(0)), ("b", Some(2))]), &truth, &vocab(4)).unwrap();
        assert_eq!(m.mean_accuracy, 1.0);
        assert_eq!(m.per_class_accuracy.len(), 2);
    }

    #[test]
    fn imbalanced_is_macro_not_micro() {
        let mut truth: Vec<TestItem> = (0..99).map(|i| item(&format!("a{i}"), 0)).collect();
        truth.push(item("b", 1));
        let mut p: FinalPredictions = (0..99)
            .map(|i| (format!("a{i}"), Some(ClassId(0))))
            .collect();
        p.insert("b".into(), Some(ClassId(0)));
        let m = evaluate(&p, &truth, &vocab(2)).unwrap();
        assert_eq!(m.mean_accuracy, 0.5);
        assert!((m.micro_accuracy - 0.99).abs() < 1e-12);
    }

    #[test]
    fn missing_and_no_match() {
        let truth = [item("a", 0), item("b", 1)];
        assert_eq!(
            evaluate(&preds(&[("a", Some(0))]), &truth, &vocab(2)),
            Err(EvalError::MissingPrediction("b".into()))
        );
        let m = evaluate(&preds(&[("a", None), ("b", Some(1))]), &truth, &vocab(2)).unwrap();
        assert_eq!(m.mean_accuracy, 0.5);
        assert_eq!(m.confusion.unmatched, vec![1, 0]);
        assert_eq!(m.confusion.row_total(0), m.n_per_class[&ClassId(0)]);
    }

    #[test]
    fn topk_definitions() {
        let truth = [item("a", 0), item("b", 1)];
        let experts = [
            expert("a", &[(2, 0.5), (1, 0.3), (0, 0.2)]),
            expert("b", &[(0, 0.5), (2, 0.3), (1, 0.2)]),
        ];
        assert_eq!(topk_accuracy(&experts, &truth, 2).unwrap(), 0.0);
        assert_eq!(topk_accuracy(&experts, &truth, 3).unwrap(), 1.0);
        assert_eq!(topk_accuracy(&experts, &truth, 10).unwrap(), 1.0);
        let top1 = evaluate(&expert_top1(&experts), &truth, &vocab(3)).unwrap();
        assert_eq!(
            topk_accuracy(&experts, &truth, 1).unwrap(),
            top1.mean_accuracy
        );
    }

    #[test]
    fn diff_identity_and_single_move() {
        let truth = [item("a", 0), item("b", 1)];
        let v = vocab(2);
        let before = evaluate(&preds(&[("a", Some(1)), ("b", Some(1))]), &truth, &v).unwrap();
        let after = evaluate(&preds(&[("a", Some(0)), ("b", Some(1))]), &truth, &v).unwrap();
        assert!(confusion_diff(&before, &before)
            .unwrap()
            .nonzero()
            .is_empty());
        let d = confusion_diff(&before, &after).unwrap();
        assert_eq!(d.nonzero(), vec![(0, 0, 1), (0, 1, -1)]);
        assert_eq!(d.row_sum(0), 0);
        let other = evaluate(&preds(&[("a", Some(0))]), &truth[..1], &vocab(3)).unwrap();
        assert!(matches!(
            confusion_diff(&before, &other),
            Err(EvalError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn bins() {
        let truth: Vec<TestItem> = (0..10)
            .map(|i| item(&format!("a{i}"), 0))
            .chain((0..10).map(|i| item(&format!("b{i}"), 1)))
            .collect();
        let v = vocab(2);
        // class 0 at 0.2, class 1 at 0.8
        let before: FinalPredictions = (0..10)
            .map(|i| (format!("a{i}"), Some(ClassId(if i < 2 { 0 } else { 1 }))))
            .chain((0..10).map(|i| (format!("b{i}"), Some(ClassId(if i < 8 { 1 } else { 0 })))))
            .collect();
        let m = evaluate(&before, &truth, &v).unwrap();
        let all = binned_improvement(&m, &m, &[Bin { lo: 0.0, hi: 1.0 }]).unwrap();
        assert_eq!(all[0].classes, 2);
        assert_eq!(all[0].mean_before, Some(m.mean_accuracy));
        let two = binned_improvement(
            &m,
            &m,
            &[Bin { lo: 0.0, hi: 0.5 }, Bin { lo: 0.5, hi: 1.0 }],
        )
        .unwrap();
        assert_eq!((two[0].classes, two[1].classes), (1, 1));
        assert_eq!(
            binned_improvement(&m, &m, &decile_bins()).unwrap().len(),
            10
        );
        for bad in [
            vec![],
            vec![Bin { lo: 0.1, hi: 1.0 }],
            vec![Bin { lo: 0.0, hi: 0.4 }, Bin { lo: 0.5, hi: 1.0 }],
            vec![Bin { lo: 0.0, hi: 0.9 }],
        ] {
            assert!(matches!(
                binned_improvement(&m, &m, &bad),
                Err(EvalError::NonPartitionBins(_))
            ));
        }
    }

    #[test]
    fn perfect_class_lands_in_last_bin() {
        let truth = [item("a", 0)];
        let m = evaluate(&preds(&[("a", Some(0))]), &truth, &vocab(2)).unwrap();
        let rows = binned_improvement(&m, &m, &decile_bins()).unwrap();
        assert_eq!(rows[9].classes, 1);
    }

    #[test]
    fn thresholds() {
        let experts = [
            expert("x", &[(0, 0.05)]),
            expert("y", &[(1, 0.5)]),
            expert("z", &[(1, 1.0)]),
        ];
        assert!(threshold_select(&experts, 0.0).is_empty());
        assert_eq!(
            threshold_select(&experts, 0.1),
            BTreeSet::from(["x".to_string()])
        );
        assert_eq!(threshold_select(&experts, 1.0 + 1e-9).len(), 3);
    }
}
