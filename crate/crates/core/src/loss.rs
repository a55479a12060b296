//! Bidirectional supervised contrastive loss between image and text
//! embeddings, the one-positive InfoNCE baseline, and anchor-sharded
//! evaluation of both.
//!
//! For anchor `i` with candidates `c_j` and logits `s_ij = a_i·c_j / τ`,
//!
//! ```text
//! loss_i = logsumexp_j s_ij − mean_{p ∈ P(i)} s_ip
//! ```
//!
//! where `P(i)` holds every candidate sharing the anchor's label (its own
//! paired candidate included). The directional loss is the mean over anchors
//! and the final loss averages the image→text and text→image directions.
//! InfoNCE is the special case `P(i) = {i}`.

use std::ops::Range;

use thiserror::Error;

use crate::model::tensor::{dot, Tensor};

const UNIT_NORM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("batch parts disagree: {images} images, {texts} texts, {labels} labels")]
    LengthMismatch {
        images: usize,
        texts: usize,
        labels: usize,
    },
    #[error("embedding {index} has norm {norm}, expected 1")]
    NonUnitEmbedding { index: usize, norm: f64 },
    #[error("temperature must be positive and finite, got {0}")]
    NonPositiveTemperature(f64),
    #[error("shard plan does not partition 0..{n}")]
    InvalidPlan { n: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    SupCon,
    InfoNce,
}

/// Paired image and text embeddings (one row each) with grouped labels.
#[derive(Debug, Clone, Copy)]
pub struct ContrastiveBatch<'a> {
    pub image_embeddings: &'a Tensor,
    pub text_embeddings: &'a Tensor,
    pub labels: &'a [usize],
    pub temperature: f64,
}

impl ContrastiveBatch<'_> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn check_shapes(&self) -> Result<(), LossError> {
        let (ni, nt, nl) = (
            self.image_embeddings.rows(),
            self.text_embeddings.rows(),
            self.labels.len(),
        );
        if nl == 0 {
            return Err(LossError::EmptyBatch);
        }
        if ni != nl || nt != nl || self.image_embeddings.cols() != self.text_embeddings.cols() {
            return Err(LossError::LengthMismatch {
                images: ni,
                texts: nt,
                labels: nl,
            });
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(LossError::NonPositiveTemperature(self.temperature));
        }
        Ok(())
    }

    /// Full validation, including the unit-norm contract.
    pub fn validate(&self) -> Result<(), LossError> {
        self.check_shapes()?;
        check_unit_rows(self.image_embeddings)?;
        check_unit_rows(self.text_embeddings)
    }
}

fn check_unit_rows(t: &Tensor) -> Result<(), LossError> {
    for i in 0..t.rows() {
        let norm = dot(t.row(i), t.row(i)).sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(LossError::NonUnitEmbedding { index: i, norm });
        }
    }
    Ok(())
}

/// Contiguous anchor ranges that tile `0..n` in order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardPlan {
    shards: Vec<Range<usize>>,
}

impl ShardPlan {
    pub fn new(shards: Vec<Range<usize>>) -> Self {
        ShardPlan { shards }
    }

    pub fn single(n: usize) -> Self {
        ShardPlan {
            shards: std::iter::once(0..n).collect(),
        }
    }

    /// `k` shards whose sizes differ by at most one.
    pub fn even(n: usize, k: usize) -> Self {
        let k = k.clamp(1, n.max(1));
        let (base, extra) = (n / k, n % k);
        let mut start = 0;
        let shards = (0..k)
            .map(|i| {
                let len = base + usize::from(i < extra);
                let r = start..start + len;
                start += len;
                r
            })
            .collect();
        ShardPlan { shards }
    }

    pub fn from_sizes(sizes: &[usize]) -> Self {
        let mut start = 0;
        ShardPlan {
            shards: sizes
                .iter()
                .map(|s| {
                    let r = start..start + s;
                    start += s;
                    r
                })
                .collect(),
        }
    }

    pub fn shards(&self) -> &[Range<usize>] {
        &self.shards
    }

    /// Shards must be disjoint, non-empty and cover `0..n` exactly.
    pub fn validate(&self, n: usize) -> Result<(), LossError> {
        let mut sorted = self.shards.clone();
        sorted.sort_by_key(|r| r.start);
        let mut expect = 0;
        for r in &sorted {
            if r.start != expect || r.end <= r.start {
                return Err(LossError::InvalidPlan { n });
            }
            expect = r.end;
        }
        if expect != n {
            return Err(LossError::InvalidPlan { n });
        }
        Ok(())
    }
}

/// Loss value with gradients for both embedding matrices and the temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct LossAndGrads {
    pub loss: f64,
    pub d_images: Tensor,
    pub d_texts: Tensor,
    pub d_temperature: f64,
}

impl LossAndGrads {
    fn zeros(n: usize, d: usize) -> Self {
        LossAndGrads {
            loss: 0.0,
            d_images: Tensor::zeros(&[n, d]),
            d_texts: Tensor::zeros(&[n, d]),
            d_temperature: 0.0,
        }
    }

    fn add(&mut self, other: &LossAndGrads) {
        self.loss += other.loss;
        self.d_images.add_assign(&other.d_images);
        self.d_texts.add_assign(&other.d_texts);
        self.d_temperature += other.d_temperature;
    }
}

/// Accumulates `weight · (1/N) Σ_{i ∈ anchors} loss_i` and its gradients.
#[allow(clippy::too_many_arguments)]
fn directional_part(
    anchors: &Tensor,
    candidates: &Tensor,
    labels: &[usize],
    kind: LossKind,
    tau: f64,
    range: Range<usize>,
    weight: f64,
    d_anchors: &mut Tensor,
    d_candidates: &mut Tensor,
) -> (f64, f64) {
    let n = labels.len();
    let scale = weight / n as f64;
    let mut loss = 0.0;
    let mut d_tau = 0.0;
    let mut logits = vec![0.0; n];
    let mut coeff = vec![0.0; n];
    for i in range {
        let a = anchors.row(i);
        for (j, l) in logits.iter_mut().enumerate() {
            *l = dot(a, candidates.row(j)) / tau;
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        let lse = max + sum_exp.ln();
        let is_pos = |j: usize| match kind {
            LossKind::SupCon => labels[j] == labels[i],
            LossKind::InfoNce => j == i,
        };
        let n_pos = (0..n).filter(|&j| is_pos(j)).count();
        debug_assert!(n_pos > 0, "own pair is always a positive");
        let inv_pos = 1.0 / n_pos as f64;
        let pos_mean: f64 = (0..n)
            .filter(|&j| is_pos(j))
            .map(|j| logits[j])
            .sum::<f64>()
            * inv_pos;
        loss += scale * (lse - pos_mean);

        // dL/ds_ij = scale · (softmax_ij − 1[j ∈ P(i)]/|P(i)|)
        for (j, c) in coeff.iter_mut().enumerate() {
            let soft = (logits[j] - lse).exp();
            *c = scale * (soft - if is_pos(j) { inv_pos } else { 0.0 });
        }
        let da = d_anchors.row_mut(i);
        for (j, &c) in coeff.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            let cand = candidates.row(j);
            for (d, v) in da.iter_mut().zip(cand) {
                *d += c * v / tau;
            }
            d_tau -= c * logits[j] / tau;
        }
        for (j, &c) in coeff.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            for (d, v) in d_candidates.row_mut(j).iter_mut().zip(a) {
                *d += c * v / tau;
            }
        }
    }
    (loss, d_tau)
}

fn shard_terms(batch: &ContrastiveBatch<'_>, kind: LossKind, range: Range<usize>) -> LossAndGrads {
    let (n, d) = (batch.len(), batch.image_embeddings.cols());
    let mut out = LossAndGrads::zeros(n, d);
    let (l1, t1) = directional_part(
        batch.image_embeddings,
        batch.text_embeddings,
        batch.labels,
        kind,
        batch.temperature,
        range.clone(),
        0.5,
        &mut out.d_images,
        &mut out.d_texts,
    );
    let (l2, t2) = directional_part(
        batch.text_embeddings,
        batch.image_embeddings,
        batch.labels,
        kind,
        batch.temperature,
        range,
        0.5,
        &mut out.d_texts,
        &mut out.d_images,
    );
    out.loss = l1 + l2;
    out.d_temperature = t1 + t2;
    out
}

/// Bidirectional loss and gradients computed shard by shard: each shard
/// evaluates its anchors against the full candidate set, and the partial
/// results are summed in shard order.
pub fn sharded_loss(
    batch: &ContrastiveBatch<'_>,
    kind: LossKind,
    plan: &ShardPlan,
) -> Result<LossAndGrads, LossError> {
    batch.validate()?;
    plan.validate(batch.len())?;
    let mut shards = plan
        .shards()
        .iter()
        .map(|r| shard_terms(batch, kind, r.clone()));
    let mut total = shards.next().expect("validated plans are non-empty");
    for part in shards {
        total.add(&part);
    }
    Ok(total)
}

pub fn loss_and_grads(
    batch: &ContrastiveBatch<'_>,
    kind: LossKind,
) -> Result<LossAndGrads, LossError> {
    sharded_loss(batch, kind, &ShardPlan::single(batch.len()))
}

/// One direction of the supervised contrastive loss, averaged over anchors.
pub fn supcon_directional(
    anchors: &Tensor,
    candidates: &Tensor,
    labels: &[usize],
    temperature: f64,
) -> Result<f64, LossError> {
    let batch = ContrastiveBatch {
        image_embeddings: anchors,
        text_embeddings: candidates,
        labels,
        temperature,
    };
    batch.validate()?;
    let n = labels.len();
    let d = anchors.cols();
    let (mut da, mut dc) = (Tensor::zeros(&[n, d]), Tensor::zeros(&[n, d]));
    let (loss, _) = directional_part(
        anchors,
        candidates,
        labels,
        LossKind::SupCon,
        temperature,
        0..n,
        1.0,
        &mut da,
        &mut dc,
    );
    Ok(loss)
}

pub fn supcon_bidirectional(batch: &ContrastiveBatch<'_>) -> Result<f64, LossError> {
    Ok(loss_and_grads(batch, LossKind::SupCon)?.loss)
}

pub fn infonce_bidirectional(batch: &ContrastiveBatch<'_>) -> Result<f64, LossError> {
    Ok(loss_and_grads(batch, LossKind::InfoNce)?.loss)
}

/// Unvalidated forward/backward for finite-difference checks, where perturbed
/// embeddings are no longer exactly unit norm.
#[doc(hidden)]
pub fn loss_and_grads_unchecked(batch: &ContrastiveBatch<'_>, kind: LossKind) -> LossAndGrads {
    shard_terms(batch, kind, 0..batch.len())
}
