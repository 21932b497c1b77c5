//! Confusion matrix, accuracy and one-vs-rest precision/recall/F1.

use std::fmt::Write as _;

use num_traits::{Float, FromPrimitive};
use serde::Serialize;

use crate::labels::{ClassLabel, NUM_CLASSES};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricsError {
    #[error("y_true has {true_len} labels but y_pred has {pred_len}")]
    LengthMismatch { true_len: usize, pred_len: usize },
    #[error("label index {0} outside 0..{NUM_CLASSES}")]
    LabelOutOfRange(usize),
    #[error("confusion matrix is empty")]
    EmptyMatrix,
    #[error("malformed report: {0}")]
    Parse(String),
}

/// Rows are true classes, columns predicted classes, both in canonical order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
    n: u64,
}

impl ConfusionMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_counts(counts: [[u64; NUM_CLASSES]; NUM_CLASSES]) -> Self {
        let n = counts.iter().flatten().sum();
        Self { counts, n }
    }

    /// Tallies index pairs.
    pub fn from_indices(y_true: &[usize], y_pred: &[usize]) -> Result<Self, MetricsError> {
        if y_true.len() != y_pred.len() {
            return Err(MetricsError::LengthMismatch { true_len: y_true.len(), pred_len: y_pred.len() });
        }
        let mut cm = Self::new();
        for (&t, &p) in y_true.iter().zip(y_pred) {
            for v in [t, p] {
                if v >= NUM_CLASSES {
                    return Err(MetricsError::LabelOutOfRange(v));
                }
            }
            cm.counts[t][p] += 1;
            cm.n += 1;
        }
        Ok(cm)
    }

    pub fn record(&mut self, truth: ClassLabel, predicted: ClassLabel) {
        self.counts[truth.index()][predicted.index()] += 1;
        self.n += 1;
    }

    pub fn counts(&self) -> &[[u64; NUM_CLASSES]; NUM_CLASSES] {
        &self.counts
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth][predicted]
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn trace(&self) -> u64 {
        (0..NUM_CLASSES).map(|k| self.counts[k][k]).sum()
    }

    pub fn row_sum(&self, k: usize) -> u64 {
        self.counts[k].iter().sum()
    }

    pub fn col_sum(&self, k: usize) -> u64 {
        self.counts.iter().map(|r| r[k]).sum()
    }

    /// Header `true\predicted,<classes...>`, one row per true class.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("true\\predicted");
        for name in ClassLabel::names() {
            write!(out, ",{name}").unwrap();
        }
        out.push('\n');
        for (label, row) in ClassLabel::ALL.iter().zip(&self.counts) {
            out.push_str(label.name());
            for c in row {
                write!(out, ",{c}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

pub fn confusion(y_true: &[ClassLabel], y_pred: &[ClassLabel]) -> Result<ConfusionMatrix, MetricsError> {
    let t: Vec<usize> = y_true.iter().map(|l| l.index()).collect();
    let p: Vec<usize> = y_pred.iter().map(|l| l.index()).collect();
    ConfusionMatrix::from_indices(&t, &p)
}

fn ratio<F: Float + FromPrimitive>(num: u64, den: u64) -> F {
    if den == 0 {
        F::zero()
    } else {
        F::from_u64(num).unwrap() / F::from_u64(den).unwrap()
    }
}

/// Correct predictions over total predictions.
pub fn accuracy<F: Float + FromPrimitive>(cm: &ConfusionMatrix) -> Result<F, MetricsError> {
    if cm.n == 0 {
        return Err(MetricsError::EmptyMatrix);
    }
    Ok(ratio(cm.trace(), cm.n))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Prf<F> {
    pub precision: F,
    pub recall: F,
    pub f1: F,
}

/// One-vs-rest scores for class `k`; any ratio with a zero denominator is 0.
pub fn precision_recall_f1<F: Float + FromPrimitive>(cm: &ConfusionMatrix, k: usize) -> Result<Prf<F>, MetricsError> {
    if cm.n == 0 {
        return Err(MetricsError::EmptyMatrix);
    }
    if k >= NUM_CLASSES {
        return Err(MetricsError::LabelOutOfRange(k));
    }
    let tp = cm.counts[k][k];
    let precision: F = ratio(tp, cm.col_sum(k));
    let recall: F = ratio(tp, cm.row_sum(k));
    let sum = precision + recall;
    let f1 = if sum == F::zero() { F::zero() } else { F::from_f64(2.0).unwrap() * precision * recall / sum };
    Ok(Prf { precision, recall, f1 })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassReport<F> {
    pub per_class: [Prf<F>; NUM_CLASSES],
    pub support: [u64; NUM_CLASSES],
    pub accuracy: F,
    pub macro_f1: F,
}

pub fn report<F: Float + FromPrimitive>(cm: &ConfusionMatrix) -> Result<ClassReport<F>, MetricsError> {
    let accuracy = accuracy(cm)?;
    let mut per_class = [Prf { precision: F::zero(), recall: F::zero(), f1: F::zero() }; NUM_CLASSES];
    for (k, slot) in per_class.iter_mut().enumerate() {
        *slot = precision_recall_f1(cm, k)?;
    }
    let macro_f1 = per_class.iter().fold(F::zero(), |a, p| a + p.f1) / F::from_usize(NUM_CLASSES).unwrap();
    Ok(ClassReport { per_class, support: std::array::from_fn(|k| cm.row_sum(k)), accuracy, macro_f1 })
}

impl<F: Float + FromPrimitive> ClassReport<F> {
    /// Class with the smallest F1 (lowest index on ties).
    pub fn weakest_class(&self) -> ClassLabel {
        let mut best = 0;
        for k in 1..NUM_CLASSES {
            if self.per_class[k].f1 < self.per_class[best].f1 {
                best = k;
            }
        }
        ClassLabel::from_index(best).unwrap()
    }
}

impl ClassReport<f64> {
    /// `class,precision,recall,f1` rows in canonical order, then
    /// `accuracy,<v>` and `macro_f1,<v>`. Values use the shortest
    /// representation that parses back to the same `f64`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,precision,recall,f1\n");
        for (label, p) in ClassLabel::ALL.iter().zip(&self.per_class) {
            writeln!(out, "{},{},{},{}", label.name(), p.precision, p.recall, p.f1).unwrap();
        }
        writeln!(out, "accuracy,{}", self.accuracy).unwrap();
        writeln!(out, "macro_f1,{}", self.macro_f1).unwrap();
        out
    }

    /// Parses [`ClassReport::to_csv`] output. Support counts are not part of
    /// the format and come back as zero.
    pub fn from_csv(text: &str) -> Result<Self, MetricsError> {
        let bad = |m: String| MetricsError::Parse(m);
        let num = |s: &str| s.trim().parse::<f64>().map_err(|e| bad(format!("`{s}`: {e}")));
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        if lines.next() != Some("class,precision,recall,f1") {
            return Err(bad("missing header".into()));
        }
        let zero = Prf { precision: 0.0, recall: 0.0, f1: 0.0 };
        let mut report = ClassReport { per_class: [zero; NUM_CLASSES], support: [0; NUM_CLASSES], accuracy: 0.0, macro_f1: 0.0 };
        for label in ClassLabel::ALL {
            let line = lines.next().ok_or_else(|| bad(format!("missing row for {label}")))?;
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != 4 || cells[0] != label.name() {
                return Err(bad(format!("expected row for {label}, got `{line}`")));
            }
            report.per_class[label.index()] = Prf { precision: num(cells[1])?, recall: num(cells[2])?, f1: num(cells[3])? };
        }
        for (key, slot) in [("accuracy", &mut report.accuracy), ("macro_f1", &mut report.macro_f1)] {
            let line = lines.next().ok_or_else(|| bad(format!("missing {key} row")))?;
            match line.split_once(',') {
                Some((k, v)) if k == key => *slot = num(v)?,
                _ => return Err(bad(format!("expected {key} row, got `{line}`"))),
            }
        }
        Ok(report)
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{:<10} {:>9} {:>9} {:>9} {:>8}\n", "class", "precision", "recall", "f1", "support");
        for (k, label) in ClassLabel::ALL.iter().enumerate() {
            let p = &self.per_class[k];
            writeln!(out, "{:<10} {:>9.4} {:>9.4} {:>9.4} {:>8}", label.name(), p.precision, p.recall, p.f1, self.support[k]).unwrap();
        }
        writeln!(out, "{:<10} {:>9.4}", "accuracy", self.accuracy).unwrap();
        writeln!(out, "{:<10} {:>9.4}", "macro_f1", self.macro_f1).unwrap();
        out
    }
}

/// One row per backbone: `backbone,split,accuracy,macro_f1,<class>_f1...`.
pub fn comparison_csv<'a>(rows: impl IntoIterator<Item = (&'a str, &'a str, &'a ClassReport<f64>)>) -> String {
    let mut out = String::from("backbone,split,accuracy,macro_f1");
    for name in ClassLabel::names() {
        write!(out, ",{name}_f1").unwrap();
    }
    out.push('\n');
    for (backbone, split, r) in rows {
        write!(out, "{backbone},{split},{},{}", r.accuracy, r.macro_f1).unwrap();
        for p in &r.per_class {
            write!(out, ",{}", p.f1).unwrap();
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_prediction() {
        let cm = ConfusionMatrix::from_indices(&[0, 1, 2], &[0, 1, 2]).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                assert_eq!(cm.get(i, j), u64::from(i == j && i < 3));
            }
        }
        let r = report::<f64>(&cm).unwrap();
        assert_eq!(r.accuracy, 1.0);
        for k in 0..3 {
            assert_eq!(r.per_class[k].f1, 1.0);
        }
    }

    #[test]
    fn single_cell() {
        let cm = ConfusionMatrix::from_indices(&[0, 0], &[1, 1]).unwrap();
        assert_eq!(cm.get(0, 1), 2);
        assert_eq!(cm.trace(), 0);
        assert_eq!(cm.n(), 2);
    }

    #[test]
    fn hand_tallied_accuracy() {
        let cm = ConfusionMatrix::from_indices(&[0, 1, 1], &[0, 1, 0]).unwrap();
        assert_eq!(accuracy::<f64>(&cm).unwrap(), 2.0 / 3.0);
    }

    #[test]
    fn errors() {
        assert_eq!(
            ConfusionMatrix::from_indices(&[0, 1], &[0]),
            Err(MetricsError::LengthMismatch { true_len: 2, pred_len: 1 })
        );
        assert_eq!(ConfusionMatrix::from_indices(&[6], &[0]), Err(MetricsError::LabelOutOfRange(6)));
        assert_eq!(accuracy::<f64>(&ConfusionMatrix::new()), Err(MetricsError::EmptyMatrix));
        assert!(matches!(report::<f64>(&ConfusionMatrix::new()), Err(MetricsError::EmptyMatrix)));
        let cm = ConfusionMatrix::from_indices(&[0], &[0]).unwrap();
        assert_eq!(precision_recall_f1::<f64>(&cm, 6), Err(MetricsError::LabelOutOfRange(6)));
    }

    #[test]
    fn absent_class_scores_zero() {
        let cm = ConfusionMatrix::from_indices(&[0, 1], &[0, 1]).unwrap();
        let p = precision_recall_f1::<f64>(&cm, 5).unwrap();
        assert_eq!((p.precision, p.recall, p.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn equal_precision_and_recall() {
        // Class 0: TP 2, FP 1, FN 1 -> P = R = 2/3 -> F1 = 2/3.
        let cm = ConfusionMatrix::from_indices(&[0, 0, 0, 1], &[0, 0, 1, 0]).unwrap();
        let p = precision_recall_f1::<f64>(&cm, 0).unwrap();
        assert_eq!(p.precision, p.recall);
        assert!((p.f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn f32_and_f64_agree() {
        let cm = ConfusionMatrix::from_counts([[5, 1, 0, 0, 0, 2], [0, 7, 1, 0, 0, 0], [1, 0, 9, 0, 0, 0], [0, 0, 0, 4, 3, 0], [0, 2, 0, 0, 6, 0], [1, 0, 0, 1, 0, 2]]);
        let a = report::<f64>(&cm).unwrap();
        let b = report::<f32>(&cm).unwrap();
        assert!((a.macro_f1 - b.macro_f1 as f64).abs() < 1e-6);
        assert_eq!(a.weakest_class(), ClassLabel::Trash);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let cm = ConfusionMatrix::from_indices(&[0, 1, 2, 3, 4, 5, 5, 2, 1], &[0, 2, 2, 3, 1, 5, 0, 2, 1]).unwrap();
        let r = report::<f64>(&cm).unwrap();
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 9);
        let back = ClassReport::from_csv(&csv).unwrap();
        assert_eq!(back.per_class, r.per_class);
        assert_eq!((back.accuracy, back.macro_f1), (r.accuracy, r.macro_f1));
        assert!(ClassReport::from_csv("class,precision,recall,f1\nglass,1,1,1\n").is_err());
    }

    #[test]
    fn confusion_csv_layout() {
        let cm = ConfusionMatrix::from_indices(&[5], &[4]).unwrap();
        let csv = cm.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "true\\predicted,cardboard,glass,metal,paper,plastic,trash");
        assert_eq!(lines[6], "trash,0,0,0,0,1,0");
    }

    fn labels(n: usize) -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
        (1..n).prop_flat_map(|len| (prop::collection::vec(0..NUM_CLASSES, len), prop::collection::vec(0..NUM_CLASSES, len)))
    }

    proptest! {
        #[test]
        fn metrics_in_unit_range((t, p) in labels(200)) {
            let r = report::<f64>(&ConfusionMatrix::from_indices(&t, &p).unwrap()).unwrap();
            for m in r.per_class.iter().flat_map(|x| [x.precision, x.recall, x.f1]).chain([r.accuracy, r.macro_f1]) {
                prop_assert!((0.0..=1.0).contains(&m));
            }
        }

        #[test]
        fn accuracy_is_mean_indicator((t, p) in labels(200)) {
            let acc = accuracy::<f64>(&ConfusionMatrix::from_indices(&t, &p).unwrap()).unwrap();
            let hits = t.iter().zip(&p).filter(|(a, b)| a == b).count();
            prop_assert!((acc - hits as f64 / t.len() as f64).abs() < 1e-15);
        }

        #[test]
        fn invariant_under_sample_permutation((t, p) in labels(100), seed in any::<u64>()) {
            use rand::SeedableRng;
            let mut idx: Vec<usize> = (0..t.len()).collect();
            crate::dataset::shuffle(&mut idx, &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let t2: Vec<usize> = idx.iter().map(|&i| t[i]).collect();
            let p2: Vec<usize> = idx.iter().map(|&i| p[i]).collect();
            let a = report::<f64>(&ConfusionMatrix::from_indices(&t, &p).unwrap()).unwrap();
            let b = report::<f64>(&ConfusionMatrix::from_indices(&t2, &p2).unwrap()).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
