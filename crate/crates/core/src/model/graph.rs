//! Reverse-mode differentiation over a tape of matrix operations.
//!
//! Nodes are appended in evaluation order, so walking the tape backwards
//! visits every node after all of its consumers.

use super::tensor::{dot, Tensor};
use super::ModelError;
use crate::loss::{sharded_loss, ContrastiveBatch, LossKind, ShardPlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Silu(Var),
    MeanPool {
        table: Var,
        lists: Vec<Vec<usize>>,
    },
    NormalizeRows {
        input: Var,
        norms: Vec<f64>,
    },
    HalfSumSquares(Var),
    Contrastive {
        images: Var,
        texts: Var,
        log_temperature: Var,
        d_images: Tensor,
        d_texts: Tensor,
        d_log_temperature: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Temperature bounds; the forward pass clamps `exp(log_temperature)`.
pub const TEMPERATURE_MIN: f64 = 0.01;
pub const TEMPERATURE_MAX: f64 = 1.0;

pub fn temperature_from_log(log_t: f64) -> f64 {
    log_t.exp().clamp(TEMPERATURE_MIN, TEMPERATURE_MAX)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn expect_row_vector(t: &Tensor, cols: usize) -> Result<(), ModelError> {
    if t.rows() == 1 && t.cols() == cols {
        Ok(())
    } else {
        Err(ModelError::ShapeMismatch {
            expected: vec![1, cols],
            found: t.shape.clone(),
        })
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, ModelError> {
        let (x, w) = (self.value(a), self.value(b));
        let (m, k, n) = (x.rows(), x.cols(), w.cols());
        if w.rows() != k {
            return Err(ModelError::ShapeMismatch {
                expected: vec![k, n],
                found: w.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let xr = x.row(i);
            let orow = &mut out[i * n..(i + 1) * n];
            for (p, xv) in xr.iter().enumerate() {
                if *xv == 0.0 {
                    continue;
                }
                for (o, wv) in orow.iter_mut().zip(w.row(p)) {
                    *o += xv * wv;
                }
            }
        }
        let value = Tensor::matrix(m, n, out)?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, ModelError> {
        let (xv, bv) = (self.value(x), self.value(bias));
        expect_row_vector(bv, xv.cols())?;
        let mut value = xv.clone();
        for i in 0..value.rows() {
            for (o, b) in value.row_mut(i).iter_mut().zip(&bv.data) {
                *o += b;
            }
        }
        Ok(self.push(value, Op::AddBias(x, bias)))
    }

    /// x·sigmoid(x)
    pub fn silu(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        for v in value.data.iter_mut() {
            *v *= sigmoid(*v);
        }
        self.push(value, Op::Silu(x))
    }

    /// Mean of the table rows listed for each output row.
    pub fn mean_pool(&mut self, table: Var, lists: Vec<Vec<usize>>) -> Result<Var, ModelError> {
        let t = self.value(table);
        let d = t.cols();
        let mut value = Tensor::zeros(&[lists.len(), d]);
        for (r, list) in lists.iter().enumerate() {
            if list.is_empty() {
                return Err(ModelError::EmptyTokenList);
            }
            let scale = 1.0 / list.len() as f64;
            let out = value.row_mut(r);
            for &tok in list {
                if tok >= t.rows() {
                    return Err(ModelError::TokenIdOutOfRange {
                        id: tok,
                        rows: t.rows(),
                    });
                }
                for (o, v) in out.iter_mut().zip(t.row(tok)) {
                    *o += v * scale;
                }
            }
        }
        Ok(self.push(value, Op::MeanPool { table, lists }))
    }

    /// Scales every row to unit L2 norm.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        let mut norms = Vec::with_capacity(value.rows());
        for i in 0..value.rows() {
            let row = value.row_mut(i);
            let n = dot(row, row).sqrt().max(1e-12);
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
        }
        self.push(value, Op::NormalizeRows { input: x, norms })
    }

    /// ½‖x‖²
    pub fn half_sum_squares(&mut self, x: Var) -> Var {
        let v = 0.5 * self.value(x).sq_norm();
        self.push(Tensor::scalar(v), Op::HalfSumSquares(x))
    }

    /// Bidirectional contrastive loss of unit-norm image and text rows, with
    /// temperature `exp(log_temperature)` clamped to the allowed range.
    pub fn contrastive(
        &mut self,
        images: Var,
        texts: Var,
        log_temperature: Var,
        labels: &[usize],
        kind: LossKind,
        plan: &ShardPlan,
    ) -> Result<Var, ModelError> {
        let log_t = self.value(log_temperature).data[0];
        let tau = temperature_from_log(log_t);
        let clamped = !(TEMPERATURE_MIN..=TEMPERATURE_MAX).contains(&log_t.exp());
        let batch = ContrastiveBatch {
            image_embeddings: self.value(images),
            text_embeddings: self.value(texts),
            labels,
            temperature: tau,
        };
        let out = sharded_loss(&batch, kind, plan)?;
        let d_log_temperature = if clamped {
            0.0
        } else {
            out.d_temperature * tau
        };
        Ok(self.push(
            Tensor::scalar(out.loss),
            Op::Contrastive {
                images,
                texts,
                log_temperature,
                d_images: out.d_images,
                d_texts: out.d_texts,
                d_log_temperature,
            },
        ))
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients, ModelError> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let out = Gradients(grads);
        if out.0.iter().flatten().any(|g| !g.is_finite()) {
            return Err(ModelError::NonFiniteGradient);
        }
        Ok(out)
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let mut accumulate = |v: Var, delta: Tensor| match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (x, w) = (self.value(*a), self.value(*b));
                let (m, k, n) = (x.rows(), x.cols(), w.cols());
                let mut dx = Tensor::zeros(&x.shape);
                let mut dw = Tensor::zeros(&w.shape);
                for r in 0..m {
                    let grow = g.row(r);
                    let xr = x.row(r);
                    let dxr = dx.row_mut(r);
                    for p in 0..k {
                        dxr[p] = dot(grow, w.row(p));
                    }
                    for p in 0..k {
                        let xv = xr[p];
                        if xv == 0.0 {
                            continue;
                        }
                        for (d, gv) in dw.data[p * n..(p + 1) * n].iter_mut().zip(grow) {
                            *d += xv * gv;
                        }
                    }
                }
                accumulate(*a, dx);
                accumulate(*b, dw);
            }
            Op::AddBias(x, bias) => {
                let mut db = Tensor::zeros(&self.value(*bias).shape);
                for r in 0..g.rows() {
                    for (d, gv) in db.data.iter_mut().zip(g.row(r)) {
                        *d += gv;
                    }
                }
                accumulate(*x, g.clone());
                accumulate(*bias, db);
            }
            Op::Silu(x) => {
                let xv = self.value(*x);
                let mut dx = g.clone();
                for (d, v) in dx.data.iter_mut().zip(&xv.data) {
                    let s = sigmoid(*v);
                    *d *= s * (1.0 + v * (1.0 - s));
                }
                accumulate(*x, dx);
            }
            Op::MeanPool { table, lists } => {
                let mut dt = Tensor::zeros(&self.value(*table).shape);
                for (r, list) in lists.iter().enumerate() {
                    let scale = 1.0 / list.len() as f64;
                    let grow = g.row(r);
                    for &tok in list {
                        for (d, gv) in dt.row_mut(tok).iter_mut().zip(grow) {
                            *d += gv * scale;
                        }
                    }
                }
                accumulate(*table, dt);
            }
            Op::NormalizeRows { input, norms } => {
                let y = &node.value;
                let mut dx = Tensor::zeros(&y.shape);
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let proj = dot(yr, gr);
                    for ((d, yv), gv) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *d = (gv - yv * proj) / norms[r];
                    }
                }
                accumulate(*input, dx);
            }
            Op::HalfSumSquares(x) => {
                let mut dx = self.value(*x).clone();
                for v in dx.data.iter_mut() {
                    *v *= g.data[0];
                }
                accumulate(*x, dx);
            }
            Op::Contrastive {
                images,
                texts,
                log_temperature,
                d_images,
                d_texts,
                d_log_temperature,
            } => {
                let s = g.data[0];
                let scaled = |t: &Tensor| Tensor {
                    shape: t.shape.clone(),
                    data: t.data.iter().map(|v| v * s).collect(),
                };
                accumulate(*images, scaled(d_images));
                accumulate(*texts, scaled(d_texts));
                accumulate(*log_temperature, Tensor::scalar(d_log_temperature * s));
            }
        }
    }
}

#[derive(Debug)]
pub struct Gradients(Vec<Option<Tensor>>);

impl Gradients {
    /// Gradient of a node, or zeros shaped like `like` when the loss does not
    /// depend on it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.0[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&like.shape))
    }

    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0[v.0].as_ref()
    }
}
