//! Cross-modal retrieval: slice-level image→text, scan-level image→text by
//! majority vote, and text→image.
//!
//! Similarities are dot products of unit embeddings. Every ranking breaks
//! ties by ascending index, so results are reproducible bit for bit.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use super::EvalError;
use crate::model::tensor::{dot, Tensor};

/// One text embedding per label, sorted by label id.
#[derive(Debug, Clone, PartialEq)]
pub struct Gallery {
    pub label_ids: Vec<usize>,
    pub embeddings: Tensor,
}

impl Gallery {
    pub fn new(label_ids: Vec<usize>, embeddings: Tensor) -> Result<Self, EvalError> {
        if label_ids.is_empty() {
            return Err(EvalError::EmptyGallery);
        }
        if embeddings.rows() != label_ids.len() || label_ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(EvalError::InvalidGallery);
        }
        Ok(Gallery {
            label_ids,
            embeddings,
        })
    }

    pub fn len(&self) -> usize {
        self.label_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.label_ids.is_empty()
    }

    fn position(&self, label: usize) -> Option<usize> {
        self.label_ids.binary_search(&label).ok()
    }

    pub fn similarities(&self, query: &[f64]) -> Vec<f64> {
        (0..self.len())
            .map(|g| dot(query, self.embeddings.row(g)))
            .collect()
    }
}

/// Indices sorted by descending score, ties by ascending index.
pub fn rank_desc(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// 0-based rank of entry `target` under [`rank_desc`] ordering.
fn rank_of(scores: &[f64], target: usize) -> usize {
    let s = scores[target];
    scores
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v.total_cmp(&s) == Ordering::Greater || (v == s && j < target))
        .count()
}

/// Top-1 gallery label and its similarity for every query row.
pub fn nearest_labels(queries: &Tensor, gallery: &Gallery) -> Vec<(usize, f64)> {
    (0..queries.rows())
        .map(|q| {
            let sims = gallery.similarities(queries.row(q));
            let best = rank_desc(&sims)[0];
            (gallery.label_ids[best], sims[best])
        })
        .collect()
}

/// Fraction of queries whose true label ranks within the top `k` gallery
/// entries. Queries whose label is absent from the gallery count as misses.
pub fn recall_at_k(
    queries: &Tensor,
    query_labels: &[usize],
    gallery: &Gallery,
    k: usize,
) -> Result<f64, EvalError> {
    if gallery.is_empty() {
        return Err(EvalError::EmptyGallery);
    }
    check_lengths(queries.rows(), query_labels.len())?;
    if query_labels.is_empty() {
        return Err(EvalError::EmptyQuerySet);
    }
    let hits = (0..queries.rows())
        .filter(|&q| match gallery.position(query_labels[q]) {
            Some(pos) => rank_of(&gallery.similarities(queries.row(q)), pos) < k,
            None => false,
        })
        .count();
    Ok(hits as f64 / query_labels.len() as f64)
}

/// For each label text, success when any of the `k` most similar images
/// carries that label.
pub fn text_to_image_recall(
    label_queries: &Gallery,
    image_embeddings: &Tensor,
    image_labels: &[usize],
    k: usize,
) -> Result<f64, EvalError> {
    if image_labels.is_empty() {
        return Err(EvalError::EmptyImageSet);
    }
    check_lengths(image_embeddings.rows(), image_labels.len())?;
    let hits = label_queries
        .label_ids
        .iter()
        .enumerate()
        .filter(|&(q, &label)| {
            let text = label_queries.embeddings.row(q);
            let sims: Vec<f64> = (0..image_embeddings.rows())
                .map(|i| dot(text, image_embeddings.row(i)))
                .collect();
            top_k(&sims, k).iter().any(|&i| image_labels[i] == label)
        })
        .count();
    Ok(hits as f64 / label_queries.len() as f64)
}

/// Indices of the `k` largest scores, ties by ascending index.
fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut ranked = rank_desc(scores);
    ranked.truncate(k);
    ranked
}

/// Most frequent prediction; ties go to the higher mean score, then the
/// smaller label id.
pub fn scan_majority_vote(
    slice_predictions: &[usize],
    slice_scores: &[f64],
) -> Result<usize, EvalError> {
    Ok(vote_order(slice_predictions, slice_scores)?[0].0)
}

/// Voted labels in vote order, with (count, mean score).
fn vote_order(
    predictions: &[usize],
    scores: &[f64],
) -> Result<Vec<(usize, usize, f64)>, EvalError> {
    if predictions.is_empty() {
        return Err(EvalError::EmptyPredictionList);
    }
    check_lengths(predictions.len(), scores.len())?;
    let mut tally: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
    for (&p, &s) in predictions.iter().zip(scores) {
        let e = tally.entry(p).or_insert((0, 0.0));
        e.0 += 1;
        e.1 += s;
    }
    let mut out: Vec<(usize, usize, f64)> = tally
        .into_iter()
        .map(|(label, (count, sum))| (label, count, sum / count as f64))
        .collect();
    out.sort_by(|a, b| b.1.cmp(&a.1).then(b.2.total_cmp(&a.2)).then(a.0.cmp(&b.0)));
    Ok(out)
}

/// Scan-level retrieval result.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanRanking {
    pub scan: u64,
    pub true_label: usize,
    /// Gallery label ids, best first.
    pub ranking: Vec<usize>,
}

/// Ranks gallery labels for every scan: labels that won at least one slice
/// come first in vote order, the rest follow by mean slice similarity.
pub fn scan_rankings(
    image_embeddings: &Tensor,
    image_labels: &[usize],
    scan_ids: &[u64],
    gallery: &Gallery,
) -> Result<Vec<ScanRanking>, EvalError> {
    check_lengths(image_embeddings.rows(), image_labels.len())?;
    check_lengths(image_embeddings.rows(), scan_ids.len())?;
    if gallery.is_empty() {
        return Err(EvalError::EmptyGallery);
    }
    let mut scans: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, &s) in scan_ids.iter().enumerate() {
        scans.entry(s).or_default().push(i);
    }
    let mut out = Vec::with_capacity(scans.len());
    for (scan, slices) in scans {
        let true_label = image_labels[slices[0]];
        if slices.iter().any(|&i| image_labels[i] != true_label) {
            return Err(EvalError::InconsistentScanLabels(scan));
        }
        let mut mean_sims = vec![0.0; gallery.len()];
        let mut preds = Vec::with_capacity(slices.len());
        let mut pred_scores = Vec::with_capacity(slices.len());
        for &i in &slices {
            let sims = gallery.similarities(image_embeddings.row(i));
            let best = rank_desc(&sims)[0];
            preds.push(gallery.label_ids[best]);
            pred_scores.push(sims[best]);
            for (m, s) in mean_sims.iter_mut().zip(&sims) {
                *m += s / slices.len() as f64;
            }
        }
        let voted = vote_order(&preds, &pred_scores)?;
        let mut ranking: Vec<usize> = voted.iter().map(|v| v.0).collect();
        let rest: Vec<usize> = rank_desc(&mean_sims)
            .into_iter()
            .map(|g| gallery.label_ids[g])
            .filter(|l| !ranking.contains(l))
            .collect();
        ranking.extend(rest);
        out.push(ScanRanking {
            scan,
            true_label,
            ranking,
        });
    }
    Ok(out)
}

pub fn scan_recall_at_k(rankings: &[ScanRanking], k: usize) -> Result<f64, EvalError> {
    if rankings.is_empty() {
        return Err(EvalError::EmptyQuerySet);
    }
    let hits = rankings
        .iter()
        .filter(|r| r.ranking.iter().take(k).any(|&l| l == r.true_label))
        .count();
    Ok(hits as f64 / rankings.len() as f64)
}

fn check_lengths(a: usize, b: usize) -> Result<(), EvalError> {
    if a == b {
        Ok(())
    } else {
        Err(EvalError::LengthMismatch(a, b))
    }
}
