//! Linear probe: multinomial logistic regression on frozen embeddings.

use super::EvalError;
use crate::model::tensor::{dot, Tensor};

pub const PROBE_MAX_ITERS: usize = 500;
pub const PROBE_GRAD_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub predictions: Vec<usize>,
    /// Penalized training loss before each iteration, then the final value.
    pub loss_history: Vec<f64>,
}

/// Class labels seen in training, sorted, and each training row's class index.
fn class_index(labels: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut classes = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let idx = labels
        .iter()
        .map(|l| classes.binary_search(l).expect("label is a class"))
        .collect();
    (classes, idx)
}

/// Per-dimension centering and scaling fitted on the training rows.
struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    fn fit(x: &Tensor) -> Self {
        let (n, d) = (x.rows() as f64, x.cols());
        let mut mean = vec![0.0; d];
        for i in 0..x.rows() {
            for (m, v) in mean.iter_mut().zip(x.row(i)) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; d];
        for i in 0..x.rows() {
            for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
                *s += (v - m).powi(2) / n;
            }
        }
        let scale = var
            .iter()
            .map(|v| if *v > 1e-24 { 1.0 / v.sqrt() } else { 1.0 })
            .collect();
        Standardizer { mean, scale }
    }

    /// Standardized rows with a trailing constant 1 for the intercept, flattened.
    fn design(&self, x: &Tensor) -> Vec<f64> {
        let d = x.cols();
        let mut out = Vec::with_capacity(x.rows() * (d + 1));
        for i in 0..x.rows() {
            for (k, v) in x.row(i).iter().enumerate() {
                out.push((v - self.mean[k]) * self.scale[k]);
            }
            out.push(1.0);
        }
        out
    }
}

/// Largest eigenvalue of XᵀX/n by power iteration on the Gram matrix.
fn gram_top_eigenvalue(x: &[f64], d: usize) -> f64 {
    let n = (x.len() / d) as f64;
    let mut gram = vec![0.0; d * d];
    for r in x.chunks_exact(d) {
        for a in 0..d {
            for b in 0..d {
                gram[a * d + b] += r[a] * r[b] / n;
            }
        }
    }
    let mut v = vec![1.0 / (d as f64).sqrt(); d];
    let mut lambda = 0.0;
    for _ in 0..1000 {
        let w: Vec<f64> = (0..d).map(|a| dot(&gram[a * d..(a + 1) * d], &v)).collect();
        let norm = dot(&w, &w).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        let next = dot(&v, &w);
        v = w.iter().map(|x| x / norm).collect();
        if (next - lambda).abs() <= 1e-12 * next.abs() {
            lambda = next;
            break;
        }
        lambda = next;
    }
    lambda
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Softmax regression state: `w` holds one row of `d` weights per class,
/// the last weight being the unpenalized intercept.
struct Softmax<'a> {
    x: &'a [f64],
    y: &'a [usize],
    d: usize,
    classes: usize,
    l2: f64,
}

impl Softmax<'_> {
    fn logits(&self, w: &[f64], row: &[f64], out: &mut [f64]) {
        for (c, o) in out.iter_mut().enumerate() {
            *o = dot(&w[c * self.d..(c + 1) * self.d], row);
        }
    }

    /// Mean cross-entropy plus `l2/2·‖W‖²`, and its gradient into `grad`.
    fn loss_and_grad(&self, w: &[f64], grad: &mut [f64]) -> f64 {
        let (d, c) = (self.d, self.classes);
        let n = self.y.len() as f64;
        grad.fill(0.0);
        let mut z = vec![0.0; c];
        let mut loss = 0.0;
        for (row, &yi) in self.x.chunks_exact(d).zip(self.y) {
            self.logits(w, row, &mut z);
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in z.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            loss += (sum.ln() - (z[yi].ln())) / n;
            for (k, p) in z.iter().enumerate() {
                let coef = (p / sum - f64::from(u8::from(k == yi))) / n;
                for (g, v) in grad[k * d..(k + 1) * d].iter_mut().zip(row) {
                    *g += coef * v;
                }
            }
        }
        for k in 0..c {
            for a in 0..d - 1 {
                let wv = w[k * d + a];
                loss += 0.5 * self.l2 * wv * wv;
                grad[k * d + a] += self.l2 * wv;
            }
        }
        loss
    }
}

/// Full-batch gradient descent on standardized embeddings. Each iteration
/// tries a step slightly longer than the last accepted one and halves it
/// until the Armijo condition holds; steps never shrink below `1/L`, where
/// `L = ½·λmax(XᵀX/n) + l2` bounds the curvature, so the loss never
/// increases. Stops after [`PROBE_MAX_ITERS`] steps or when the gradient
/// norm drops below [`PROBE_GRAD_TOL`]. Test rows whose label never appears
/// in training are counted as errors.
pub fn linear_probe(
    train_embeddings: &Tensor,
    train_labels: &[usize],
    test_embeddings: &Tensor,
    test_labels: &[usize],
    l2: f64,
) -> Result<ProbeResult, EvalError> {
    if train_embeddings.rows() != train_labels.len() {
        return Err(EvalError::LengthMismatch(
            train_embeddings.rows(),
            train_labels.len(),
        ));
    }
    if test_embeddings.rows() != test_labels.len() {
        return Err(EvalError::LengthMismatch(
            test_embeddings.rows(),
            test_labels.len(),
        ));
    }
    if test_labels.is_empty() {
        return Err(EvalError::EmptyQuerySet);
    }
    let (classes, y) = class_index(train_labels);
    if classes.len() < 2 {
        return Err(EvalError::SingleClassTrainingSet);
    }
    let std = Standardizer::fit(train_embeddings);
    let x = std.design(train_embeddings);
    let d = train_embeddings.cols() + 1;
    let problem = Softmax {
        x: &x,
        y: &y,
        d,
        classes: classes.len(),
        l2,
    };
    // the softmax Hessian is bounded by ½·XᵀX/n in every class block; the
    // small margin covers power-iteration error
    let lipschitz = 0.5 * gram_top_eigenvalue(&x, d) * (1.0 + 1e-6) + l2;
    let min_step = 1.0 / lipschitz;

    let mut w = vec![0.0; classes.len() * d];
    let mut grad = vec![0.0; w.len()];
    let mut trial = vec![0.0; w.len()];
    let mut trial_grad = vec![0.0; w.len()];
    let mut loss = problem.loss_and_grad(&w, &mut grad);
    let mut step = min_step;
    let mut history = Vec::with_capacity(PROBE_MAX_ITERS + 1);
    for _ in 0..PROBE_MAX_ITERS {
        history.push(loss);
        let g2 = dot(&grad, &grad);
        if g2.sqrt() < PROBE_GRAD_TOL {
            break;
        }
        step *= 1.5;
        loop {
            for ((t, a), g) in trial.iter_mut().zip(&w).zip(&grad) {
                *t = a - step * g;
            }
            let next = problem.loss_and_grad(&trial, &mut trial_grad);
            if next <= loss - 0.5 * step * g2 || step <= min_step {
                loss = next;
                break;
            }
            step = (step * 0.5).max(min_step);
        }
        std::mem::swap(&mut w, &mut trial);
        std::mem::swap(&mut grad, &mut trial_grad);
    }
    history.push(loss);

    let test = std.design(test_embeddings);
    let mut z = vec![0.0; classes.len()];
    let predictions: Vec<usize> = test
        .chunks_exact(d)
        .map(|row| {
            problem.logits(&w, row, &mut z);
            classes[argmax(&z)]
        })
        .collect();
    let correct = predictions
        .iter()
        .zip(test_labels)
        .filter(|(p, t)| p == t)
        .count();
    Ok(ProbeResult {
        accuracy: correct as f64 / test_labels.len() as f64,
        predictions,
        loss_history: history,
    })
}
