//! Objective heads attached to the trunk output.
//!
//! Every head returns a loss to *minimize* together with `∂loss/∂a` for each
//! sample of the batch, where `a` is the trunk output. Batch losses are sums
//! over samples (the SVM regularizer and the LDA objective are per batch).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{dot, generalized_eigh, LinalgError, Matrix};
use crate::rng::SplitMix64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HeadError {
    #[error("non-finite head input")]
    NonFiniteInput,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("class {class} has {count} samples in the batch, at least {required} required")]
    InsufficientClassSamples {
        class: usize,
        count: usize,
        required: usize,
    },
    #[error("head has not been fitted yet")]
    UntrainedHead,
    #[error("invalid head parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Softmax,
    Svm,
    Lda,
}

impl HeadKind {
    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Softmax => "softmax",
            HeadKind::Svm => "svm",
            HeadKind::Lda => "lda",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "softmax" => Some(HeadKind::Softmax),
            "svm" => Some(HeadKind::Svm),
            "lda" => Some(HeadKind::Lda),
            _ => None,
        }
    }
}

impl std::fmt::Display for HeadKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Max-shifted softmax.
pub fn softmax(a: &[f64]) -> Vec<f64> {
    let max = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = a.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Cross-entropy of `softmax(a)` against a one-hot label, and `p − y`.
pub fn softmax_loss(a: &[f64], label: usize) -> Result<(f64, Vec<f64>), HeadError> {
    if label >= a.len() {
        return Err(HeadError::LabelOutOfRange {
            label,
            classes: a.len(),
        });
    }
    if a.iter().any(|x| !x.is_finite()) {
        return Err(HeadError::NonFiniteInput);
    }
    let max = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = a.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let loss = total.ln() - (a[label] - max);
    let mut grad: Vec<f64> = exps.into_iter().map(|e| e / total).collect();
    grad[label] -= 1.0;
    Ok((loss, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxHead {
    pub classes: usize,
}

/// One-vs-rest L2-SVM. Row `c` of `weights` scores class `c` against the
/// input augmented with a trailing constant 1 (the last column is the bias).
#[derive(Debug, Clone, PartialEq)]
pub struct SvmHead {
    weights: Matrix,
    lambda: f64,
}

#[derive(Debug, Clone)]
pub struct SvmLoss {
    pub loss: f64,
    /// One row per sample, `∂loss/∂a`.
    pub grad_a: Matrix,
    /// Same shape as the head weights.
    pub grad_w: Matrix,
}

impl SvmHead {
    /// Glorot-uniform weights over `(dim + 1) → classes`.
    pub fn new(classes: usize, dim: usize, lambda: f64, seed: u64) -> Result<Self, HeadError> {
        let limit = (6.0 / (dim + 1 + classes) as f64).sqrt();
        let mut rng = SplitMix64::new(seed);
        let mut weights = Matrix::zeros(classes, dim + 1);
        for w in weights.as_mut_slice() {
            *w = rng.uniform(-limit, limit);
        }
        Self::from_weights(weights, lambda)
    }

    pub fn from_weights(weights: Matrix, lambda: f64) -> Result<Self, HeadError> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(HeadError::InvalidParameter(format!("lambda {lambda} must be > 0")));
        }
        if weights.rows() == 0 || weights.cols() < 2 {
            return Err(HeadError::ShapeMismatch("SVM weights need ≥1 class and ≥1 input".into()));
        }
        if !weights.is_finite() {
            return Err(HeadError::NonFiniteInput);
        }
        Ok(Self { weights, lambda })
    }

    pub fn classes(&self) -> usize {
        self.weights.rows()
    }

    /// Head-input width (without the bias feature).
    pub fn dim(&self) -> usize {
        self.weights.cols() - 1
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Matrix {
        &mut self.weights
    }

    /// `w_cᵀ[a, 1]` for every class.
    pub fn margins(&self, a: &[f64]) -> Result<Vec<f64>, HeadError> {
        if a.len() != self.dim() {
            return Err(HeadError::ShapeMismatch(format!(
                "SVM input has {} features, head expects {}",
                a.len(),
                self.dim()
            )));
        }
        let d = self.dim();
        Ok((0..self.classes())
            .map(|c| {
                let w = self.weights.row(c);
                dot(&w[..d], a) + w[d]
            })
            .collect())
    }
}

/// Squared-hinge loss summed over classes (one-vs-rest) and samples:
/// `Σ_c [½‖w_c‖² + λ Σ_n max(0, 1 − t_nc·w_cᵀâ_n)²]`.
pub fn svm_loss(batch: &Matrix, labels: &[usize], head: &SvmHead) -> Result<SvmLoss, HeadError> {
    check_batch(batch, labels, head.classes())?;
    if batch.cols() != head.dim() {
        return Err(HeadError::ShapeMismatch(format!(
            "SVM input has {} features, head expects {}",
            batch.cols(),
            head.dim()
        )));
    }
    let d = head.dim();
    let lambda = head.lambda;
    let mut loss = 0.5 * dot(head.weights.as_slice(), head.weights.as_slice());
    let mut grad_w = head.weights.clone();
    let mut grad_a = Matrix::zeros(batch.rows(), d);
    for (n, &label) in labels.iter().enumerate() {
        let a = batch.row(n);
        let margins = head.margins(a)?;
        for (c, &m) in margins.iter().enumerate() {
            let t = if c == label { 1.0 } else { -1.0 };
            let slack = 1.0 - t * m;
            if slack <= 0.0 {
                continue;
            }
            loss += lambda * slack * slack;
            let k = -2.0 * lambda * t * slack;
            let w = head.weights.row(c);
            for (g, &wi) in grad_a.row_mut(n).iter_mut().zip(&w[..d]) {
                *g += k * wi;
            }
            let gw = grad_w.row_mut(c);
            for (g, &ai) in gw[..d].iter_mut().zip(a) {
                *g += k * ai;
            }
            gw[d] += k;
        }
    }
    Ok(SvmLoss { loss, grad_a, grad_w })
}

/// Class with the largest margin; ties go to the lowest index.
pub fn svm_predict(a: &[f64], head: &SvmHead) -> Result<usize, HeadError> {
    Ok(argmax(&head.margins(a)?))
}

/// Projection fitted from the last full pass: top generalized eigenvectors
/// (columns, `S_w`-normalized) and each class mean in that space.
#[derive(Debug, Clone, PartialEq)]
pub struct LdaProjection {
    pub vectors: Matrix,
    pub class_means: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LdaHead {
    classes: usize,
    eps: f64,
    min_per_class: usize,
    projection: Option<LdaProjection>,
}

/// Scatter matrices and the generalized eigenproblem for one batch.
struct LdaFit {
    class_counts: Vec<usize>,
    class_means: Matrix,
    total_mean: Vec<f64>,
    /// Eigenvalues of the kept (largest) eigenpairs, ascending.
    values: Vec<f64>,
    /// Matching `S_w`-normalized eigenvectors as columns.
    vectors: Matrix,
}

impl LdaHead {
    pub fn new(classes: usize, eps: f64, min_per_class: usize) -> Result<Self, HeadError> {
        if classes < 2 {
            return Err(HeadError::InvalidParameter("LDA needs at least 2 classes".into()));
        }
        if !(eps >= 0.0 && eps.is_finite()) {
            return Err(HeadError::InvalidParameter(format!("eps {eps} must be ≥ 0")));
        }
        if min_per_class < 2 {
            return Err(HeadError::InvalidParameter(format!(
                "min_per_class {min_per_class} must be ≥ 2"
            )));
        }
        Ok(Self {
            classes,
            eps,
            min_per_class,
            projection: None,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn min_per_class(&self) -> usize {
        self.min_per_class
    }

    pub fn projection(&self) -> Option<&LdaProjection> {
        self.projection.as_ref()
    }

    pub fn set_projection(&mut self, projection: LdaProjection) {
        self.projection = Some(projection);
    }

    fn solve(&self, batch: &Matrix, labels: &[usize]) -> Result<LdaFit, HeadError> {
        check_batch(batch, labels, self.classes)?;
        let (n, d) = (batch.rows(), batch.cols());
        let mut class_counts = vec![0usize; self.classes];
        let mut class_means = Matrix::zeros(self.classes, d);
        for (i, &l) in labels.iter().enumerate() {
            class_counts[l] += 1;
            for (m, &x) in class_means.row_mut(l).iter_mut().zip(batch.row(i)) {
                *m += x;
            }
        }
        for (class, &count) in class_counts.iter().enumerate() {
            if count < self.min_per_class {
                return Err(HeadError::InsufficientClassSamples {
                    class,
                    count,
                    required: self.min_per_class,
                });
            }
            class_means.row_mut(class).iter_mut().for_each(|m| *m /= count as f64);
        }
        let mut total_mean = vec![0.0; d];
        for i in 0..n {
            for (m, &x) in total_mean.iter_mut().zip(batch.row(i)) {
                *m += x;
            }
        }
        total_mean.iter_mut().for_each(|m| *m /= n as f64);

        let inv_n = 1.0 / n as f64;
        let mut within = Matrix::zeros(d, d);
        let mut centered = vec![0.0; d];
        for (i, &l) in labels.iter().enumerate() {
            for ((c, &x), &m) in centered.iter_mut().zip(batch.row(i)).zip(class_means.row(l)) {
                *c = x - m;
            }
            add_outer(&mut within, &centered, inv_n);
        }
        for k in 0..d {
            within[(k, k)] += self.eps;
        }
        let mut between = Matrix::zeros(d, d);
        for (class, &count) in class_counts.iter().enumerate() {
            for ((c, &m), &t) in centered.iter_mut().zip(class_means.row(class)).zip(&total_mean) {
                *c = m - t;
            }
            add_outer(&mut between, &centered, count as f64 * inv_n);
        }

        let eig = generalized_eigh(&between, &within)?;
        let keep = (self.classes - 1).min(d);
        let start = d - keep;
        let values = eig.values[start..].to_vec();
        let mut vectors = Matrix::zeros(d, keep);
        for (dst, src) in (start..d).enumerate() {
            for r in 0..d {
                vectors[(r, dst)] = eig.vectors[(r, src)];
            }
        }
        Ok(LdaFit {
            class_counts,
            class_means,
            total_mean,
            values,
            vectors,
        })
    }

    /// Refits the scoring projection on a labelled pass (typically the whole
    /// training set). Returns the objective value of that pass.
    pub fn fit_projection(&mut self, batch: &Matrix, labels: &[usize]) -> Result<f64, HeadError> {
        let fit = self.solve(batch, labels)?;
        let keep = fit.vectors.cols();
        let mut projected = Matrix::zeros(self.classes, keep);
        for c in 0..self.classes {
            let m = fit.class_means.row(c);
            for j in 0..keep {
                projected[(c, j)] = (0..m.len()).map(|r| fit.vectors[(r, j)] * m[r]).sum();
            }
        }
        let objective = fit.values.iter().sum::<f64>() / keep as f64;
        self.projection = Some(LdaProjection {
            vectors: fit.vectors,
            class_means: projected,
        });
        Ok(objective)
    }

    /// Negative squared distance to each projected class mean.
    pub fn scores(&self, a: &[f64]) -> Result<Vec<f64>, HeadError> {
        let p = self.projection.as_ref().ok_or(HeadError::UntrainedHead)?;
        if a.len() != p.vectors.rows() {
            return Err(HeadError::ShapeMismatch(format!(
                "LDA input has {} features, projection expects {}",
                a.len(),
                p.vectors.rows()
            )));
        }
        let keep = p.vectors.cols();
        let z: Vec<f64> = (0..keep)
            .map(|j| (0..a.len()).map(|r| p.vectors[(r, j)] * a[r]).sum())
            .collect();
        Ok((0..self.classes)
            .map(|c| {
                -z.iter()
                    .zip(p.class_means.row(c))
                    .map(|(x, m)| (x - m) * (x - m))
                    .sum::<f64>()
            })
            .collect())
    }
}

fn add_outer(m: &mut Matrix, v: &[f64], scale: f64) {
    let d = v.len();
    for i in 0..d {
        let vi = v[i] * scale;
        if vi == 0.0 {
            continue;
        }
        let row = m.row_mut(i);
        for j in 0..d {
            row[j] += vi * v[j];
        }
    }
}

fn check_batch(batch: &Matrix, labels: &[usize], classes: usize) -> Result<(), HeadError> {
    if batch.rows() != labels.len() {
        return Err(HeadError::ShapeMismatch(format!(
            "{} samples but {} labels",
            batch.rows(),
            labels.len()
        )));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(HeadError::LabelOutOfRange { label, classes });
    }
    if !batch.is_finite() {
        return Err(HeadError::NonFiniteInput);
    }
    Ok(())
}

/// Negated mean of the `|C| − 1` largest generalized eigenvalues of
/// `S_b·e = v·S_w·e`, with its gradient for every sample.
///
/// For `S_w`-normalized `e_j`, first-order eigenvalue perturbation gives
/// `∂v_j/∂x_n = (2/N)·[e_jᵀ(m_c − m̄) − v_j·e_jᵀ(x_n − m_c)]·e_j`, `c` the class of `x_n`.
pub fn lda_loss(batch: &Matrix, labels: &[usize], head: &LdaHead) -> Result<(f64, Matrix), HeadError> {
    let fit = head.solve(batch, labels)?;
    let (n, d) = (batch.rows(), batch.cols());
    let keep = fit.values.len();
    let objective = fit.values.iter().sum::<f64>() / keep as f64;
    debug_assert_eq!(fit.class_counts.iter().sum::<usize>(), n);

    let vecs: Vec<Vec<f64>> = (0..keep).map(|j| fit.vectors.column(j)).collect();
    // e_jᵀ(m_c − m̄) per class and eigenvector.
    let between_proj: Vec<Vec<f64>> = (0..head.classes)
        .map(|c| {
            vecs.iter()
                .map(|e| {
                    e.iter()
                        .zip(fit.class_means.row(c))
                        .zip(&fit.total_mean)
                        .map(|((ei, m), t)| ei * (m - t))
                        .sum()
                })
                .collect()
        })
        .collect();

    let scale = -2.0 / (n as f64 * keep as f64);
    let mut grad = Matrix::zeros(n, d);
    for (i, &c) in labels.iter().enumerate() {
        let x = batch.row(i);
        let m = fit.class_means.row(c);
        let g = grad.row_mut(i);
        for (j, e) in vecs.iter().enumerate() {
            let within_proj: f64 = e.iter().zip(x).zip(m).map(|((ei, xi), mi)| ei * (xi - mi)).sum();
            let coeff = scale * (between_proj[c][j] - fit.values[j] * within_proj);
            for (gk, &ek) in g.iter_mut().zip(e) {
                *gk += coeff * ek;
            }
        }
    }
    Ok((-objective, grad))
}

/// A head with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum Head {
    Softmax(SoftmaxHead),
    Svm(SvmHead),
    Lda(LdaHead),
}

/// Loss and gradients of one head on one batch.
#[derive(Debug, Clone)]
pub struct HeadGrad {
    pub loss: f64,
    pub grad_a: Matrix,
    /// Gradient of the head's own parameters, if it has any.
    pub param_grad: Option<Matrix>,
}

impl Head {
    pub fn kind(&self) -> HeadKind {
        match self {
            Head::Softmax(_) => HeadKind::Softmax,
            Head::Svm(_) => HeadKind::Svm,
            Head::Lda(_) => HeadKind::Lda,
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            Head::Softmax(h) => h.classes,
            Head::Svm(h) => h.classes(),
            Head::Lda(h) => h.classes(),
        }
    }

    pub fn batch_loss(&self, outputs: &Matrix, labels: &[usize]) -> Result<HeadGrad, HeadError> {
        match self {
            Head::Softmax(h) => {
                check_batch(outputs, labels, h.classes)?;
                if outputs.cols() != h.classes {
                    return Err(HeadError::ShapeMismatch(format!(
                        "softmax head over {} classes fed {} features",
                        h.classes,
                        outputs.cols()
                    )));
                }
                let mut loss = 0.0;
                let mut grad_a = Matrix::zeros(outputs.rows(), outputs.cols());
                for (n, &label) in labels.iter().enumerate() {
                    let (l, g) = softmax_loss(outputs.row(n), label)?;
                    loss += l;
                    grad_a.row_mut(n).copy_from_slice(&g);
                }
                Ok(HeadGrad {
                    loss,
                    grad_a,
                    param_grad: None,
                })
            }
            Head::Svm(h) => {
                let out = svm_loss(outputs, labels, h)?;
                Ok(HeadGrad {
                    loss: out.loss,
                    grad_a: out.grad_a,
                    param_grad: Some(out.grad_w),
                })
            }
            Head::Lda(h) => {
                let (loss, grad_a) = lda_loss(outputs, labels, h)?;
                Ok(HeadGrad {
                    loss,
                    grad_a,
                    param_grad: None,
                })
            }
        }
    }

    /// `θ ← θ − step·∂φ/∂θ` for heads with parameters; no-op otherwise.
    pub fn apply_update(&mut self, param_grad: Option<&Matrix>, step: f64) -> Result<(), HeadError> {
        if let (Head::Svm(h), Some(g)) = (self, param_grad) {
            if g.rows() != h.weights.rows() || g.cols() != h.weights.cols() {
                return Err(HeadError::ShapeMismatch("SVM weight gradient".into()));
            }
            if !g.is_finite() {
                return Err(HeadError::NonFiniteInput);
            }
            for (w, dw) in h.weights.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *w -= step * dw;
            }
        }
        Ok(())
    }

    /// Uniform per-class score interface; argmax is the head's prediction.
    pub fn scores(&self, a: &[f64]) -> Result<Vec<f64>, HeadError> {
        head_scores(self, a)
    }

    pub fn predict(&self, a: &[f64]) -> Result<usize, HeadError> {
        Ok(argmax(&self.scores(a)?))
    }

    /// Refreshes state fitted from a full labelled pass (LDA projection).
    pub fn refit(&mut self, outputs: &Matrix, labels: &[usize]) -> Result<(), HeadError> {
        if let Head::Lda(h) = self {
            h.fit_projection(outputs, labels)?;
        }
        Ok(())
    }
}

/// Softmax probabilities, SVM margins, or LDA negative squared distances.
pub fn head_scores(head: &Head, a: &[f64]) -> Result<Vec<f64>, HeadError> {
    if a.iter().any(|x| !x.is_finite()) {
        return Err(HeadError::NonFiniteInput);
    }
    match head {
        Head::Softmax(h) => {
            if a.len() != h.classes {
                return Err(HeadError::ShapeMismatch(format!(
                    "softmax head over {} classes fed {} features",
                    h.classes,
                    a.len()
                )));
            }
            Ok(softmax(a))
        }
        Head::Svm(h) => h.margins(a),
        Head::Lda(h) => h.scores(a),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_symmetric_logits() {
        let (loss, grad) = softmax_loss(&[0.0, 0.0], 0).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(grad, vec![-0.5, 0.5]);
    }

    #[test]
    fn softmax_closed_form() {
        let (loss, grad) = softmax_loss(&[std::f64::consts::LN_2, 0.0], 0).unwrap();
        assert!((loss - 1.5_f64.ln()).abs() < 1e-15);
        assert!((grad[0] + 1.0 / 3.0).abs() < 1e-15);
        assert!((grad[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_is_stable() {
        let (loss, grad) = softmax_loss(&[1000.0, 0.0], 0).unwrap();
        assert!(loss.is_finite() && loss.abs() < 1e-300);
        assert!(grad.iter().all(|g| g.is_finite()));
        let (loss, _) = softmax_loss(&[1000.0, 0.0], 1).unwrap();
        assert!((loss - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn softmax_errors() {
        assert_eq!(softmax_loss(&[f64::NAN, 0.0], 0).unwrap_err(), HeadError::NonFiniteInput);
        assert!(matches!(
            softmax_loss(&[0.0, 0.0], 2),
            Err(HeadError::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn svm_satisfied_margin() {
        let head = SvmHead::from_weights(Matrix::from_rows(&[[1.0, 0.0]]).unwrap(), 1.0).unwrap();
        let out = svm_loss(&Matrix::from_rows(&[[2.0]]).unwrap(), &[0], &head).unwrap();
        assert_eq!(out.loss, 0.5);
        assert_eq!(out.grad_a[(0, 0)], 0.0);
    }

    #[test]
    fn svm_violated_margin() {
        let head = SvmHead::from_weights(Matrix::from_rows(&[[1.0, 0.0]]).unwrap(), 1.0).unwrap();
        let out = svm_loss(&Matrix::from_rows(&[[0.5]]).unwrap(), &[0], &head).unwrap();
        assert_eq!(out.loss, 0.75);
        assert_eq!(out.grad_a[(0, 0)], -1.0);
        // ∂/∂w: w − 2λ·t·a·slack = 1 − 0.5, bias: 0 − 2·0.5 = −1.
        assert_eq!(out.grad_w.row(0), &[0.5, -1.0]);
    }

    #[test]
    fn svm_predict_ties_and_argmax() {
        let w = Matrix::from_rows(&[[0.1, 0.0], [0.9, 0.0], [0.3, 0.0]]).unwrap();
        let head = SvmHead::from_weights(w, 1.0).unwrap();
        assert_eq!(svm_predict(&[1.0], &head).unwrap(), 1);
        let tie = SvmHead::from_weights(Matrix::from_rows(&[[0.5, 0.0], [0.5, 0.0]]).unwrap(), 1.0).unwrap();
        assert_eq!(svm_predict(&[1.0], &tie).unwrap(), 0);
    }

    #[test]
    fn svm_rejects_bad_lambda() {
        let w = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        assert!(SvmHead::from_weights(w.clone(), 0.0).is_err());
        assert!(SvmHead::from_weights(w, -1.0).is_err());
    }

    fn one_d_example() -> (Matrix, Vec<usize>) {
        (
            Matrix::from_rows(&[[0.0], [2.0], [6.0], [8.0]]).unwrap(),
            vec![0, 0, 1, 1],
        )
    }

    #[test]
    fn lda_one_dimensional() {
        let (x, y) = one_d_example();
        let head = LdaHead::new(2, 0.0, 2).unwrap();
        let (loss, _) = lda_loss(&x, &y, &head).unwrap();
        assert!((loss + 9.0).abs() < 1e-12, "{loss}");
    }

    #[test]
    fn lda_identical_means() {
        let x = Matrix::from_rows(&[[0.0, 1.0], [2.0, -1.0], [2.0, 1.0], [0.0, -1.0]]).unwrap();
        let head = LdaHead::new(2, 1e-3, 2).unwrap();
        let (loss, grad) = lda_loss(&x, &[0, 0, 1, 1], &head).unwrap();
        assert!(loss.abs() < 1e-12);
        assert!(grad.max_abs() < 1e-12);
    }

    #[test]
    fn lda_needs_samples_per_class() {
        let (x, _) = one_d_example();
        let head = LdaHead::new(2, 0.0, 2).unwrap();
        assert_eq!(
            lda_loss(&x, &[0, 0, 0, 1], &head).unwrap_err(),
            HeadError::InsufficientClassSamples {
                class: 1,
                count: 1,
                required: 2
            }
        );
    }

    #[test]
    fn lda_singular_within_scatter() {
        // Zero within-class spread and no ridge.
        let x = Matrix::from_rows(&[[0.0], [0.0], [1.0], [1.0]]).unwrap();
        let head = LdaHead::new(2, 0.0, 2).unwrap();
        assert!(matches!(
            lda_loss(&x, &[0, 0, 1, 1], &head),
            Err(HeadError::Linalg(LinalgError::NotPositiveDefinite { .. }))
        ));
    }

    #[test]
    fn lda_scores_prefer_near_class() {
        let (x, y) = one_d_example();
        let mut head = Head::Lda(LdaHead::new(2, 0.0, 2).unwrap());
        assert_eq!(head.scores(&[0.5]).unwrap_err(), HeadError::UntrainedHead);
        head.refit(&x, &y).unwrap();
        let s = head.scores(&[0.5]).unwrap();
        // e = 1/√S_w = 1: distances 0.25 and 42.25.
        assert!((s[0] + 0.25).abs() < 1e-12 && (s[1] + 42.25).abs() < 1e-12, "{s:?}");
        assert_eq!(head.predict(&[0.5]).unwrap(), 0);
    }

    #[test]
    fn lda_head_validates_parameters() {
        assert!(LdaHead::new(1, 0.0, 2).is_err());
        assert!(LdaHead::new(3, -1.0, 2).is_err());
        assert!(LdaHead::new(3, 0.0, 1).is_err());
    }

    #[test]
    fn scores_interface() {
        let head = Head::Softmax(SoftmaxHead { classes: 2 });
        assert_eq!(head.scores(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let svm = SvmHead::new(3, 2, 1.0, 4).unwrap();
        let a = [0.3, -0.7];
        let margins = svm.margins(&a).unwrap();
        let head = Head::Svm(svm.clone());
        assert_eq!(head.scores(&a).unwrap(), margins);
        assert_eq!(head.predict(&a).unwrap(), svm_predict(&a, &svm).unwrap());
    }

    #[test]
    fn head_kind_names() {
        for k in [HeadKind::Softmax, HeadKind::Svm, HeadKind::Lda] {
            assert_eq!(HeadKind::parse(k.name()), Some(k));
        }
        assert_eq!(HeadKind::parse("boost"), None);
    }
}
