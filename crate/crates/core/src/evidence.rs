//! Confusion matrices and the basic probability assignment (BPA) derived
//! from them.
//!
//! Per class `i`, the recall ratio `r_ii = n_ii / Σ_k n_ki` (column sum) and
//! the precision ratio `s_ii = n_ii / Σ_k n_ik` (row sum) are normalized over
//! the diagonal into `R_i` and `S_i`, then merged with Dempster's rule for
//! singleton hypotheses:
//!
//! ```text
//! M_i = R_i·S_i / Σ_j R_j·S_j
//! ```
//!
//! The scalar `Γ = ‖M‖₂` lies in `[1/√|C|, 1]` and scales gradient steps in
//! the trainer.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EvidenceError {
    #[error("prediction and label sequences differ in length ({predictions} vs {labels})")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error("class index {index} out of range for {classes} classes")]
    IndexOutOfRange { index: usize, classes: usize },
    #[error("no samples to score")]
    Empty,
    #[error("mass vector is empty")]
    EmptyVector,
    #[error("confusion matrix is malformed: {0}")]
    Malformed(String),
}

/// Square table of counts: `counts[i][j]` samples of actual class `i` were
/// assigned label `j`.
#[derive(Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self, EvidenceError> {
        let classes = rows.len();
        if classes == 0 {
            return Err(EvidenceError::Malformed("no rows".into()));
        }
        let mut counts = Vec::with_capacity(classes * classes);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != classes {
                return Err(EvidenceError::Malformed(format!(
                    "row {i} has {} entries, expected {classes}",
                    row.len()
                )));
            }
            counts.extend_from_slice(row);
        }
        Ok(Self { classes, counts })
    }

    /// Parses the headerless CSV layout: one line per actual class, one
    /// comma-separated non-negative integer per predicted label.
    pub fn from_csv(text: &str) -> Result<Self, EvidenceError> {
        let rows = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(lineno, line)| {
                line.split(',')
                    .map(|cell| {
                        cell.trim().parse::<u64>().map_err(|e| {
                            EvidenceError::Malformed(format!(
                                "line {}: {:?}: {e}",
                                lineno + 1,
                                cell.trim()
                            ))
                        })
                    })
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_rows(&rows)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for i in 0..self.classes {
            let row: Vec<String> = self.row(i).iter().map(u64::to_string).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    #[inline]
    pub fn classes(&self) -> usize {
        self.classes
    }

    #[inline]
    pub fn get(&self, actual: usize, predicted: usize) -> u64 {
        self.counts[actual * self.classes + predicted]
    }

    pub fn row(&self, actual: usize) -> &[u64] {
        &self.counts[actual * self.classes..(actual + 1) * self.classes]
    }

    pub fn record(&mut self, actual: usize, predicted: usize) -> Result<(), EvidenceError> {
        for index in [actual, predicted] {
            if index >= self.classes {
                return Err(EvidenceError::IndexOutOfRange {
                    index,
                    classes: self.classes,
                });
            }
        }
        self.counts[actual * self.classes + predicted] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Number of samples whose actual class is `i`.
    pub fn row_sum(&self, i: usize) -> u64 {
        self.row(i).iter().sum()
    }

    /// Number of samples that received label `j`.
    pub fn col_sum(&self, j: usize) -> u64 {
        (0..self.classes).map(|i| self.get(i, j)).sum()
    }

    pub fn correct(&self) -> u64 {
        (0..self.classes).map(|i| self.get(i, i)).sum()
    }

    /// Misclassification rate in percent.
    pub fn error_pct(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        100.0 * (total - self.correct()) as f64 / total as f64
    }
}

impl fmt::Debug for ConfusionMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "ConfusionMatrix {}x{} [", self.classes, self.classes)?;
        for i in 0..self.classes {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        write!(f, "]")
    }
}

/// Counts `(label, prediction)` pairs into a `classes × classes` matrix.
pub fn confusion_matrix(
    predictions: &[usize],
    labels: &[usize],
    classes: usize,
) -> Result<ConfusionMatrix, EvidenceError> {
    if predictions.len() != labels.len() {
        return Err(EvidenceError::LengthMismatch {
            predictions: predictions.len(),
            labels: labels.len(),
        });
    }
    if predictions.is_empty() {
        return Err(EvidenceError::Empty);
    }
    let mut cm = ConfusionMatrix::new(classes);
    for (&p, &l) in predictions.iter().zip(labels) {
        cm.record(l, p)?;
    }
    Ok(cm)
}

/// Per-class probability masses of one classifier plus their Euclidean norm.
#[derive(Debug, Clone, PartialEq)]
pub struct Bpa {
    pub masses: Vec<f64>,
    pub gamma: f64,
    /// Set when the evidence was undefined and uniform masses were substituted.
    pub degenerate: bool,
}

impl Bpa {
    /// The most uncertain assignment: `1/|C|` everywhere, `Γ = 1/√|C|`.
    pub fn uniform(classes: usize) -> Self {
        let m = 1.0 / classes as f64;
        Self {
            masses: vec![m; classes],
            gamma: 1.0 / (classes as f64).sqrt(),
            degenerate: false,
        }
    }

    fn degenerate(classes: usize) -> Self {
        Self {
            degenerate: true,
            ..Self::uniform(classes)
        }
    }

    pub fn classes(&self) -> usize {
        self.masses.len()
    }
}

#[inline]
fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Combines recall- and precision-derived masses into a BPA.
///
/// Undefined ratios (a label never predicted, a class never present) count as
/// zero evidence. If the diagonal carries no evidence at all the uniform
/// assignment is returned with `degenerate` set.
pub fn bpa_from_confusion(cm: &ConfusionMatrix) -> Bpa {
    let c = cm.classes();
    let recall: Vec<f64> = (0..c).map(|i| ratio(cm.get(i, i), cm.col_sum(i))).collect();
    let precision: Vec<f64> = (0..c).map(|i| ratio(cm.get(i, i), cm.row_sum(i))).collect();

    let recall_total: f64 = recall.iter().sum();
    let precision_total: f64 = precision.iter().sum();
    if recall_total == 0.0 || precision_total == 0.0 {
        return Bpa::degenerate(c);
    }

    let joint: Vec<f64> = recall
        .iter()
        .zip(&precision)
        .map(|(r, s)| (r / recall_total) * (s / precision_total))
        .collect();
    let agreement: f64 = joint.iter().sum();
    if agreement == 0.0 {
        return Bpa::degenerate(c);
    }
    let masses: Vec<f64> = joint.iter().map(|m| m / agreement).collect();
    let gamma = l2_norm(&masses);
    Bpa {
        masses,
        gamma,
        degenerate: false,
    }
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `Γ = ‖M‖₂`.
pub fn gamma(masses: &[f64]) -> Result<f64, EvidenceError> {
    if masses.is_empty() {
        return Err(EvidenceError::EmptyVector);
    }
    Ok(l2_norm(masses))
}
