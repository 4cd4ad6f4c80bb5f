//! Central finite-difference checks of analytic gradients.
//!
//! Every check perturbs one coordinate θ by `h = 1e-6·max(1, |θ|)` in both
//! directions and compares `(φ(θ+h) − φ(θ−h)) / 2h` with the analytic value.
//!
//! The comparison metric is `|a − n| / max(|a|, |n|, floor)` where
//! `floor = REL_FLOOR·max(1, |φ|)`. Without a floor, coordinates whose true
//! derivative is near zero would be judged on rounding noise alone: the
//! central difference carries an absolute error around `κ·ε·|φ|/h`, and the
//! eigenvalue-based LDA loss shows amplification κ near 100 (its derivative
//! with respect to a final-layer bias is exactly zero, yet the difference
//! quotient reads about `1e-8·|φ|`).
//!
//! Coordinates whose perturbation changes a ReLU mask or the SVM hinge
//! active set are skipped (the loss is not differentiable there) and
//! counted in the report.

use thiserror::Error;

use crate::heads::{Head, HeadError, HeadKind, LdaHead, SoftmaxHead, SvmHead};
use crate::linalg::Matrix;
use crate::nn::{init_params, LayerSpec, Network, NetworkSpec, NnError};
use crate::rng::SplitMix64;

/// Magnitude below which differences are measured against `|φ|` instead of
/// the gradient itself.
pub const REL_FLOOR: f64 = 1e-2;

#[derive(Debug, Error)]
pub enum GradcheckError {
    #[error("head: {0}")]
    Head(#[from] HeadError),
    #[error("network: {0}")]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub target: String,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradcheckReport {
    fn new(target: impl Into<String>, tolerance: f64) -> Self {
        Self {
            target: target.into(),
            checked: 0,
            skipped: 0,
            max_rel_err: 0.0,
            tolerance,
        }
    }

    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_err <= self.tolerance
    }

    fn record(&mut self, analytic: f64, numeric: f64, loss: f64) {
        self.checked += 1;
        let e = relative_error(analytic, numeric, REL_FLOOR * loss.abs().max(1.0));
        if e > self.max_rel_err || e.is_nan() {
            self.max_rel_err = e;
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let d = (analytic - numeric).abs();
    if d == 0.0 {
        return 0.0;
    }
    d / analytic.abs().max(numeric.abs()).max(floor)
}

pub fn step_for(theta: f64) -> f64 {
    1e-6 * theta.abs().max(1.0)
}

/// Tolerance for the head-only check of `kind`.
pub fn head_tolerance(kind: HeadKind) -> f64 {
    match kind {
        HeadKind::Softmax | HeadKind::Svm => 1e-6,
        HeadKind::Lda => 1e-4,
    }
}

/// Tolerance for checks through a trunk.
pub const TRUNK_TOLERANCE: f64 = 1e-5;

fn gaussian_matrix(rng: &mut SplitMix64, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| scale * rng.gaussian()).collect();
    Matrix::from_vec(rows, cols, data).expect("sized above")
}

/// Samples around well-separated random class centers, class-sorted.
fn clustered_batch(rng: &mut SplitMix64, classes: usize, per_class: usize, dim: usize) -> (Matrix, Vec<usize>) {
    let centers = gaussian_matrix(rng, classes, dim, 3.0);
    let mut data = Vec::with_capacity(classes * per_class * dim);
    let mut labels = Vec::with_capacity(classes * per_class);
    for c in 0..classes {
        for _ in 0..per_class {
            data.extend(centers.row(c).iter().map(|m| m + rng.gaussian()));
            labels.push(c);
        }
    }
    (
        Matrix::from_vec(classes * per_class, dim, data).expect("sized above"),
        labels,
    )
}

/// Non-smooth points of the head loss near `a`.
fn hinge_pattern(head: &Head, a: &Matrix, labels: &[usize]) -> Vec<bool> {
    match head {
        Head::Svm(h) => {
            let mut pattern = Vec::new();
            for (i, &y) in labels.iter().enumerate() {
                let m = h.margins(a.row(i)).expect("dimension checked by caller");
                for (c, mc) in m.iter().enumerate() {
                    let t = if c == y { 1.0 } else { -1.0 };
                    pattern.push(1.0 - t * mc > 0.0);
                }
            }
            pattern
        }
        _ => Vec::new(),
    }
}

/// Sets of active units of every ReLU layer.
fn relu_pattern(net: &Network, x: &Matrix) -> Result<Vec<bool>, NnError> {
    let tape = net.forward(x)?;
    let mut pattern = Vec::new();
    for (l, layer) in net.layers().iter().enumerate() {
        if matches!(layer.spec(), LayerSpec::Relu) {
            pattern.extend(tape.layer_output(l).as_slice().iter().map(|v| *v > 0.0));
        }
    }
    Ok(pattern)
}

fn random_head(kind: HeadKind, rng: &mut SplitMix64, classes: usize, dim: usize) -> Result<Head, HeadError> {
    Ok(match kind {
        HeadKind::Softmax => Head::Softmax(SoftmaxHead { classes }),
        HeadKind::Svm => Head::Svm(SvmHead::from_weights(gaussian_matrix(rng, classes, dim + 1, 0.5), 0.5)?),
        HeadKind::Lda => Head::Lda(LdaHead::new(classes, 1e-3, 2)?),
    })
}

/// Checks `∂φ/∂a` (and the SVM weights) of one head on a random batch.
///
/// Sizes: softmax |C|=4 with 6 samples; SVM |C|=4, dim 6, 10 samples;
/// LDA |C|=5, dim 8, 6 samples per class.
pub fn check_head(kind: HeadKind, seed: u64) -> Result<GradcheckReport, GradcheckError> {
    let mut rng = SplitMix64::derive(seed, 0x6763_6865_6164);
    let (a, labels, classes) = match kind {
        HeadKind::Softmax => {
            let a = gaussian_matrix(&mut rng, 6, 4, 2.0);
            let labels = (0..6).map(|_| rng.below(4)).collect();
            (a, labels, 4)
        }
        HeadKind::Svm => {
            let a = gaussian_matrix(&mut rng, 10, 6, 1.0);
            let labels = (0..10).map(|_| rng.below(4)).collect();
            (a, labels, 4)
        }
        HeadKind::Lda => {
            let (a, labels) = clustered_batch(&mut rng, 5, 6, 8);
            (a, labels, 5)
        }
    };
    let mut head = random_head(kind, &mut rng, classes, a.cols())?;
    let mut report = GradcheckReport::new(format!("{kind} head"), head_tolerance(kind));
    let base = head.batch_loss(&a, &labels)?;
    let pattern = hinge_pattern(&head, &a, &labels);

    let mut probe = a.clone();
    for i in 0..a.as_slice().len() {
        let theta = a.as_slice()[i];
        let h = step_for(theta);
        probe.as_mut_slice()[i] = theta + h;
        let plus_kink = hinge_pattern(&head, &probe, &labels) != pattern;
        let fp = head.batch_loss(&probe, &labels)?.loss;
        probe.as_mut_slice()[i] = theta - h;
        let minus_kink = hinge_pattern(&head, &probe, &labels) != pattern;
        let fm = head.batch_loss(&probe, &labels)?.loss;
        probe.as_mut_slice()[i] = theta;
        if plus_kink || minus_kink {
            report.skipped += 1;
            continue;
        }
        report.record(base.grad_a.as_slice()[i], (fp - fm) / (2.0 * h), base.loss);
    }

    if let (Head::Svm(_), Some(gw)) = (&head, base.param_grad.as_ref()) {
        for i in 0..gw.as_slice().len() {
            let theta = svm_weights(&head).as_slice()[i];
            let h = step_for(theta);
            let eval = |head: &mut Head, v: f64| -> Result<(f64, bool), GradcheckError> {
                svm_weights_mut(head).as_mut_slice()[i] = v;
                let kink = hinge_pattern(head, &a, &labels) != pattern;
                Ok((head.batch_loss(&a, &labels)?.loss, kink))
            };
            let (fp, kp) = eval(&mut head, theta + h)?;
            let (fm, km) = eval(&mut head, theta - h)?;
            svm_weights_mut(&mut head).as_mut_slice()[i] = theta;
            if kp || km {
                report.skipped += 1;
                continue;
            }
            report.record(gw.as_slice()[i], (fp - fm) / (2.0 * h), base.loss);
        }
    }
    Ok(report)
}

fn svm_weights(head: &Head) -> &Matrix {
    match head {
        Head::Svm(h) => h.weights(),
        _ => unreachable!("only called for SVM heads"),
    }
}

fn svm_weights_mut(head: &mut Head) -> &mut Matrix {
    match head {
        Head::Svm(h) => h.weights_mut(),
        _ => unreachable!("only called for SVM heads"),
    }
}

/// Random dense trunk: `input → h1 → h2 → out` with ReLUs between.
fn random_trunk_spec(rng: &mut SplitMix64, input: usize, out: usize) -> NetworkSpec {
    let h1 = 4 + rng.below(12);
    let h2 = 4 + rng.below(12);
    NetworkSpec {
        input: vec![input],
        layers: vec![
            LayerSpec::Dense { inputs: input, out: h1 },
            LayerSpec::Relu,
            LayerSpec::Dense { inputs: h1, out: h2 },
            LayerSpec::Relu,
            LayerSpec::Dense { inputs: h2, out },
        ],
    }
}

/// Small convolutional trunk on 1×6×6 images.
fn conv_trunk_spec(out: usize) -> NetworkSpec {
    NetworkSpec {
        input: vec![1, 6, 6],
        layers: vec![
            LayerSpec::Conv2d {
                in_ch: 1,
                out_ch: 2,
                k: 3,
                stride: 1,
            },
            LayerSpec::Relu,
            LayerSpec::MaxPool { k: 2 },
            LayerSpec::Flatten,
            LayerSpec::Dense { inputs: 8, out },
        ],
    }
}

/// Checks every trunk parameter of a random 3-layer network under `kind`.
pub fn check_trunk(kind: HeadKind, seed: u64) -> Result<GradcheckReport, GradcheckError> {
    let mut rng = SplitMix64::derive(seed, 0x6763_7472_756e);
    let (classes, out, per_class) = match kind {
        HeadKind::Softmax => (4, 4, 2),
        HeadKind::Svm => (4, 5, 2),
        HeadKind::Lda => (3, 4, 8),
    };
    let input = 5;
    let spec = random_trunk_spec(&mut rng, input, out);
    let net = init_params(&spec, rng.next_u64())?;
    let (x, labels) = clustered_batch(&mut rng, classes, per_class, input);
    let head = random_head(kind, &mut rng, classes, out)?;
    check_network(format!("{kind} through 3-layer trunk"), net, &head, &x, &labels)
}

/// Same as [`check_trunk`] for a conv · relu · maxpool · dense trunk.
pub fn check_conv_trunk(kind: HeadKind, seed: u64) -> Result<GradcheckReport, GradcheckError> {
    let mut rng = SplitMix64::derive(seed, 0x6763_636f_6e76);
    let (classes, out, per_class) = match kind {
        HeadKind::Softmax => (3, 3, 2),
        HeadKind::Svm => (3, 4, 2),
        HeadKind::Lda => (3, 4, 8),
    };
    let net = init_params(&conv_trunk_spec(out), rng.next_u64())?;
    let (x, labels) = clustered_batch(&mut rng, classes, per_class, 36);
    let head = random_head(kind, &mut rng, classes, out)?;
    check_network(format!("{kind} through conv trunk"), net, &head, &x, &labels)
}

fn check_network(
    target: String,
    mut net: Network,
    head: &Head,
    x: &Matrix,
    labels: &[usize],
) -> Result<GradcheckReport, GradcheckError> {
    let mut report = GradcheckReport::new(target, TRUNK_TOLERANCE);
    let tape = net.forward(x)?;
    let hg = head.batch_loss(tape.output(), labels)?;
    let grads = net.backward(&tape, &hg.grad_a)?;
    let relu = relu_pattern(&net, x)?;
    let hinge = hinge_pattern(head, tape.output(), labels);

    let loss_at = |net: &Network| -> Result<(f64, bool), GradcheckError> {
        let a = net.predict(x)?;
        let kink = relu_pattern(net, x)? != relu || hinge_pattern(head, &a, labels) != hinge;
        Ok((head.batch_loss(&a, labels)?.loss, kink))
    };

    for l in 0..net.layers().len() {
        if !net.layers()[l].has_params() {
            continue;
        }
        for biases in [false, true] {
            let len = if biases {
                net.layers()[l].biases().len()
            } else {
                net.layers()[l].weights().as_slice().len()
            };
            for i in 0..len {
                let theta = *param_mut(&mut net, l, biases, i);
                let h = step_for(theta);
                *param_mut(&mut net, l, biases, i) = theta + h;
                let (fp, kp) = loss_at(&net)?;
                *param_mut(&mut net, l, biases, i) = theta - h;
                let (fm, km) = loss_at(&net)?;
                *param_mut(&mut net, l, biases, i) = theta;
                if kp || km {
                    report.skipped += 1;
                    continue;
                }
                let analytic = if biases {
                    grads.layers[l].biases[i]
                } else {
                    grads.layers[l].weights.as_slice()[i]
                };
                report.record(analytic, (fp - fm) / (2.0 * h), hg.loss);
            }
        }
    }
    Ok(report)
}

fn param_mut(net: &mut Network, layer: usize, biases: bool, i: usize) -> &mut f64 {
    let layer = &mut net.layers_mut()[layer];
    if biases {
        &mut layer.biases_mut()[i]
    } else {
        &mut layer.weights_mut().as_mut_slice()[i]
    }
}

/// Head check plus dense and conv trunk checks for one head kind.
pub fn run_suite(kind: HeadKind, seed: u64) -> Result<Vec<GradcheckReport>, GradcheckError> {
    Ok(vec![
        check_head(kind, seed)?,
        check_trunk(kind, seed)?,
        check_conv_trunk(kind, seed)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(1.0, 1.0, 1e-2), 0.0);
        assert!((relative_error(2.0, 1.0, 1e-2) - 0.5).abs() < 1e-15);
        assert!((relative_error(1e-9, 0.0, 1e-2) - 1e-7).abs() < 1e-20);
    }

    #[test]
    fn every_head_passes_on_a_few_seeds() {
        for kind in [HeadKind::Softmax, HeadKind::Svm, HeadKind::Lda] {
            for seed in 0..3 {
                for r in run_suite(kind, seed).unwrap() {
                    assert!(r.passed(), "{r:?}");
                }
            }
        }
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let mut r = GradcheckReport::new("x", 1e-6);
        r.record(1.0, 1.01, 1.0);
        assert!(!r.passed());
    }
}
