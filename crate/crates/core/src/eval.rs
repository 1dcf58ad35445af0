//! Confusion matrices, accuracy and macro-averaged precision/recall.

use std::fmt::Write as _;

use crate::dsp::FeatureMatrix;
use crate::error::{Error, Result};
use crate::inference::{score_line, Classifier};

/// `K x K` counts; rows are reference classes, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn zeros(k: usize) -> Self {
        Self { k, counts: vec![0; k * k] }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::Dimension("confusion matrix must be square".into()));
        }
        Ok(Self { k, counts: rows.concat() })
    }

    pub fn n_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, reference: usize, predicted: usize) -> u64 {
        self.counts[reference * self.k + predicted]
    }

    pub fn add(&mut self, reference: usize, predicted: usize) -> Result<()> {
        for label in [reference, predicted] {
            if label >= self.k {
                return Err(Error::LabelOutOfRange { label, classes: self.k });
            }
        }
        self.counts[reference * self.k + predicted] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.k.max(1)).map(<[u64]>::to_vec).collect()
    }

    fn row_sum(&self, r: usize) -> u64 {
        (0..self.k).map(|c| self.get(r, c)).sum()
    }

    fn col_sum(&self, c: usize) -> u64 {
        (0..self.k).map(|r| self.get(r, c)).sum()
    }
}

pub fn confusion(preds: &[usize], refs: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if preds.len() != refs.len() {
        return Err(Error::Dimension(format!("{} predictions for {} references", preds.len(), refs.len())));
    }
    let mut cm = ConfusionMatrix::zeros(k);
    for (&p, &r) in preds.iter().zip(refs) {
        cm.add(r, p)?;
    }
    Ok(cm)
}

/// Fractions in `[0, 1]`; precision and recall are unweighted class means.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetrics {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
}

pub fn per_class(cm: &ConfusionMatrix) -> ClassMetrics {
    let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    ClassMetrics {
        precision: (0..cm.k).map(|c| ratio(cm.get(c, c), cm.col_sum(c))).collect(),
        recall: (0..cm.k).map(|c| ratio(cm.get(c, c), cm.row_sum(c))).collect(),
    }
}

pub fn metrics(cm: &ConfusionMatrix) -> Result<Metrics> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::EmptyEvaluation);
    }
    let pc = per_class(cm);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let trace: u64 = (0..cm.k).map(|c| cm.get(c, c)).sum();
    Ok(Metrics {
        accuracy: trace as f64 / total as f64,
        precision: mean(&pc.precision),
        recall: mean(&pc.recall),
    })
}

impl Metrics {
    /// `accuracy<TAB>precision<TAB>recall` in percent with one decimal.
    pub fn tsv(&self) -> String {
        format!("{:.1}\t{:.1}\t{:.1}", 100.0 * self.accuracy, 100.0 * self.precision, 100.0 * self.recall)
    }
}

/// One utterance to evaluate: its reference class and one feature matrix per
/// classifier system.
#[derive(Debug, Clone)]
pub struct EvalItem {
    pub id: String,
    pub label: usize,
    pub features: Vec<FeatureMatrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub labels: Vec<String>,
    pub confusion: ConfusionMatrix,
    pub metrics: Metrics,
    /// Score export lines, one per utterance.
    pub scores: Vec<String>,
}

impl Report {
    pub fn text(&self) -> String {
        let mut s = String::new();
        let width = self.labels.iter().map(String::len).max().unwrap_or(0).max(6);
        let _ = writeln!(s, "utterances: {}", self.confusion.total());
        let _ = writeln!(s, "confusion (rows = reference, columns = prediction):");
        let _ = write!(s, "{:width$}", "");
        for l in &self.labels {
            let _ = write!(s, " {l:>width$}");
        }
        s.push('\n');
        for (l, row) in self.labels.iter().zip(self.confusion.rows()) {
            let _ = write!(s, "{l:width$}");
            for c in row {
                let _ = write!(s, " {c:>width$}");
            }
            s.push('\n');
        }
        let pc = per_class(&self.confusion);
        for (k, l) in self.labels.iter().enumerate() {
            let _ = writeln!(s, "{l}: precision {:.1}% recall {:.1}%", 100.0 * pc.precision[k], 100.0 * pc.recall[k]);
        }
        let m = &self.metrics;
        let _ = writeln!(
            s,
            "accuracy {:.1}%, macro precision {:.1}%, macro recall {:.1}%",
            100.0 * m.accuracy,
            100.0 * m.precision,
            100.0 * m.recall
        );
        let _ = writeln!(s, "# accuracy\tprecision\trecall");
        let _ = writeln!(s, "{}", m.tsv());
        s
    }

    pub fn scores_tsv(&self) -> String {
        self.scores.iter().map(|l| format!("{l}\n")).collect()
    }
}

/// Classifies every item and summarizes the decisions.
pub fn evaluate(classifier: &Classifier, items: &[EvalItem]) -> Result<Report> {
    let labels = classifier.labels().to_vec();
    let mut cm = ConfusionMatrix::zeros(labels.len());
    let mut scores = Vec::with_capacity(items.len());
    for item in items {
        let refs: Vec<&FeatureMatrix> = item.features.iter().collect();
        let d = classifier.classify(&refs)?;
        cm.add(item.label, d.label)?;
        scores.push(score_line(&item.id, &d.fused, &labels[d.label]));
    }
    let metrics = metrics(&cm)?;
    Ok(Report { labels, confusion: cm, metrics, scores })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_tally() {
        let cm = confusion(&[0, 1, 1], &[0, 0, 1], 2).unwrap();
        assert_eq!(cm.rows(), vec![vec![1, 1], vec![0, 1]]);
        assert_eq!(confusion(&[], &[], 3).unwrap().total(), 0);
        assert!(confusion(&[3], &[0], 3).is_err());
        assert!(confusion(&[0, 1], &[0], 3).is_err());
    }

    #[test]
    fn worked_metrics_example() {
        let cm = ConfusionMatrix::from_rows(&[vec![2, 1], vec![0, 3]]).unwrap();
        let m = metrics(&cm).unwrap();
        assert_eq!(m.tsv(), "83.3\t87.5\t83.3");
        assert!((m.precision - 0.875).abs() < 1e-12);
        assert!((m.recall - (2.0 / 3.0 + 1.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_and_empty() {
        let cm = confusion(&[0, 1, 2, 2], &[0, 1, 2, 2], 3).unwrap();
        assert_eq!(metrics(&cm).unwrap().tsv(), "100.0\t100.0\t100.0");
        assert!(matches!(metrics(&ConfusionMatrix::zeros(3)), Err(Error::EmptyEvaluation)));
    }

    #[test]
    fn unpredicted_class_has_zero_precision() {
        let cm = confusion(&[0, 0], &[0, 1], 2).unwrap();
        let pc = per_class(&cm);
        assert_eq!(pc.precision, vec![0.5, 0.0]);
        assert_eq!(pc.recall, vec![1.0, 0.0]);
    }

    #[test]
    fn uniform_random_predictions_score_near_chance() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let (k, n) = (4usize, 8000usize);
        let refs: Vec<usize> = (0..n).map(|i| i % k).collect();
        let preds: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let acc = metrics(&confusion(&preds, &refs, k).unwrap()).unwrap().accuracy;
        let p = 1.0 / k as f64;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        assert!((acc - p).abs() < 3.0 * sigma, "{acc}");
    }

    fn labels_strategy() -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
        prop::collection::vec((0usize..4, 0usize..4), 1..60).prop_map(|v| v.into_iter().unzip())
    }

    proptest! {
        #[test]
        fn class_permutation_leaves_metrics_unchanged((p, r) in labels_strategy(), shift in 1usize..4) {
            let perm = |v: &[usize]| v.iter().map(|x| (x + shift) % 4).collect::<Vec<_>>();
            let a = metrics(&confusion(&p, &r, 4).unwrap()).unwrap();
            let b = metrics(&confusion(&perm(&p), &perm(&r), 4).unwrap()).unwrap();
            prop_assert!((a.accuracy - b.accuracy).abs() < 1e-12);
            prop_assert!((a.precision - b.precision).abs() < 1e-12);
            prop_assert!((a.recall - b.recall).abs() < 1e-12);
        }

        #[test]
        fn accuracy_is_micro_recall_on_balanced_sets(preds in prop::collection::vec(0usize..3, 30)) {
            let refs: Vec<usize> = (0..30).map(|i| i % 3).collect();
            let m = metrics(&confusion(&preds, &refs, 3).unwrap()).unwrap();
            prop_assert!((m.accuracy - m.recall).abs() < 1e-12);
        }
    }
}
