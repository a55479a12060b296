//! Lloyd's k-means with k-means++ seeding, used as a data-driven alternative
//! to the TE×TR grid.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::LabelError;
use crate::ingest::MetadataRecord;

pub const MAX_ITERATIONS: usize = 300;
pub const MOVEMENT_TOLERANCE: f64 = 1e-8;

/// Result of a Lloyd run over arbitrary points.
#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub centroids: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    pub inertia_history: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid; ties go to the lowest index.
pub fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn assign(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let mut inertia = 0.0;
    let assignment = points
        .iter()
        .map(|p| {
            let (i, d) = nearest(p, centroids);
            inertia += d;
            i
        })
        .collect();
    (assignment, inertia)
}

fn kmeans_plus_plus(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let mut target = rng.random::<f64>() * total;
        let mut pick = None;
        for (i, d) in d2.iter().enumerate() {
            if *d <= 0.0 {
                continue;
            }
            pick = Some(i);
            if target < *d {
                break;
            }
            target -= d;
        }
        // total > 0 while fewer than `distinct` centroids have been chosen
        let chosen = points[pick.expect("a point with positive distance")].clone();
        for (slot, p) in d2.iter_mut().zip(points) {
            *slot = slot.min(sq_dist(p, &chosen));
        }
        centroids.push(chosen);
    }
    centroids
}

fn means(points: &[Vec<f64>], assignment: &[usize], previous: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let dim = previous[0].len();
    let mut sums = vec![vec![0.0; dim]; previous.len()];
    let mut counts = vec![0usize; previous.len()];
    for (p, &a) in points.iter().zip(assignment) {
        counts[a] += 1;
        for (s, x) in sums[a].iter_mut().zip(p) {
            *s += x;
        }
    }
    sums.into_iter()
        .zip(counts)
        .zip(previous)
        .map(|((s, n), prev)| {
            if n == 0 {
                prev.clone()
            } else {
                s.into_iter().map(|v| v / n as f64).collect()
            }
        })
        .collect()
}

fn distinct_count(points: &[Vec<f64>]) -> usize {
    let mut sorted: Vec<&Vec<f64>> = points.iter().collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    sorted.dedup();
    sorted.len()
}

/// Clusters `points` into `k` groups. Deterministic for a given seed.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<Clustering, LabelError> {
    if k == 0 || distinct_count(points) < k {
        return Err(LabelError::TooFewDistinctPoints {
            needed: k,
            found: distinct_count(points),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_plus_plus(points, k, &mut rng);
    let (mut assignment, inertia) = assign(points, &centroids);
    let mut inertia_history = vec![inertia];
    for _ in 0..MAX_ITERATIONS {
        let updated = means(points, &assignment, &centroids);
        let movement = updated
            .iter()
            .zip(&centroids)
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = updated;
        let (next, inertia) = assign(points, &centroids);
        inertia_history.push(inertia);
        assignment = next;
        if movement < MOVEMENT_TOLERANCE {
            break;
        }
    }
    Ok(Clustering {
        centroids,
        assignment,
        inertia_history,
    })
}

/// Per-dimension min/max scaling onto [0, 1]; constant dimensions map to 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Normalization {
    fn fit(points: &[Vec<f64>]) -> Self {
        let dim = points[0].len();
        let mut min = vec![f64::INFINITY; dim];
        let mut max = vec![f64::NEG_INFINITY; dim];
        for p in points {
            for d in 0..dim {
                min[d] = min[d].min(p[d]);
                max[d] = max[d].max(p[d]);
            }
        }
        Normalization { min, max }
    }

    pub fn apply(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter()
            .enumerate()
            .map(|(d, v)| {
                let span = self.max[d] - self.min[d];
                if span > 0.0 {
                    (v - self.min[d]) / span
                } else {
                    0.0
                }
            })
            .collect()
    }

    pub fn invert(&self, normalized: &[f64]) -> Vec<f64> {
        normalized
            .iter()
            .enumerate()
            .map(|(d, v)| self.min[d] + v * (self.max[d] - self.min[d]))
            .collect()
    }
}

/// Fitted clustering of acquisitions in normalized
/// (TE, TR, TI present, TI or 0) space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansModel {
    pub centroids: Vec<Vec<f64>>,
    pub normalization: Normalization,
    pub inertia_history: Vec<f64>,
    pub seed: u64,
}

/// Raw clustering coordinates of a record.
pub fn record_features(r: &MetadataRecord) -> Vec<f64> {
    match r.ti_ms {
        Some(ti) => vec![r.te_ms, r.tr_ms, 1.0, ti],
        None => vec![r.te_ms, r.tr_ms, 0.0, 0.0],
    }
}

pub fn fit_kmeans(
    records: &[MetadataRecord],
    n_clusters: usize,
    seed: u64,
) -> Result<KMeansModel, LabelError> {
    if records.is_empty() {
        return Err(LabelError::EmptyDataset);
    }
    let raw: Vec<Vec<f64>> = records.iter().map(record_features).collect();
    let normalization = Normalization::fit(&raw);
    let points: Vec<Vec<f64>> = raw.iter().map(|p| normalization.apply(p)).collect();
    let c = kmeans(&points, n_clusters, seed)?;
    Ok(KMeansModel {
        centroids: c.centroids,
        normalization,
        inertia_history: c.inertia_history,
        seed,
    })
}

impl KMeansModel {
    pub fn assign(&self, record: &MetadataRecord) -> usize {
        nearest(
            &self.normalization.apply(&record_features(record)),
            &self.centroids,
        )
        .0
    }

    /// Centroids mapped back to raw (ms) coordinates.
    pub fn raw_centroids(&self) -> Vec<Vec<f64>> {
        self.centroids
            .iter()
            .map(|c| self.normalization.invert(c))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_force_best_means(points: &[Vec<f64>], k: usize) -> (f64, Vec<Vec<f64>>) {
        // enumerate every labelling of the points into k groups
        let n = points.len();
        let mut best = (f64::INFINITY, vec![]);
        for code in 0..k.pow(n as u32) {
            let mut labels = vec![0; n];
            let mut c = code;
            for l in labels.iter_mut() {
                *l = c % k;
                c /= k;
            }
            if (0..k).any(|g| !labels.contains(&g)) {
                continue;
            }
            let mut cents = vec![vec![0.0; points[0].len()]; k];
            for g in 0..k {
                let members: Vec<_> = (0..n).filter(|&i| labels[i] == g).collect();
                for d in 0..points[0].len() {
                    cents[g][d] =
                        members.iter().map(|&i| points[i][d]).sum::<f64>() / members.len() as f64;
                }
            }
            let inertia: f64 = (0..n).map(|i| sq_dist(&points[i], &cents[labels[i]])).sum();
            if inertia < best.0 {
                best = (inertia, cents);
            }
        }
        best
    }

    #[test]
    fn two_pairs_recover_pair_means() {
        let pts = vec![
            vec![0.0, 0.0],
            vec![0.0, 1.0],
            vec![10.0, 10.0],
            vec![10.0, 11.0],
        ];
        let (best_inertia, mut best) = brute_force_best_means(&pts, 2);
        let c = kmeans(&pts, 2, 7).unwrap();
        let mut got = c.centroids.clone();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        best.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(got, best);
        assert_eq!(got, vec![vec![0.0, 0.5], vec![10.0, 10.5]]);
        assert_eq!(*c.inertia_history.last().unwrap(), best_inertia);
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let pts = vec![vec![1.0, 2.0], vec![3.0, 6.0], vec![5.0, 1.0]];
        let c = kmeans(&pts, 1, 0).unwrap();
        assert_eq!(c.centroids, vec![vec![3.0, 3.0]]);
        let var: f64 = pts.iter().map(|p| sq_dist(p, &[3.0, 3.0])).sum();
        assert!((c.inertia_history.last().unwrap() - var).abs() < 1e-12);
        let same = vec![vec![2.0, 2.0]; 4];
        assert_eq!(
            *kmeans(&same, 1, 0).unwrap().inertia_history.last().unwrap(),
            0.0
        );
    }

    #[test]
    fn too_few_distinct_points() {
        let same = vec![vec![2.0, 2.0]; 4];
        assert_eq!(
            kmeans(&same, 2, 0),
            Err(LabelError::TooFewDistinctPoints {
                needed: 2,
                found: 1
            })
        );
    }

    #[test]
    fn record_clustering_separates_inversion() {
        let mut base = crate::ingest::record::sample_record();
        let mut recs = vec![];
        for i in 0..10 {
            base.te_ms = 10.0 + i as f64;
            base.ti_ms = None;
            recs.push(base.clone());
            base.ti_ms = Some(2500.0);
            recs.push(base.clone());
        }
        let m = fit_kmeans(&recs, 2, 3).unwrap();
        for pair in recs.chunks(2) {
            assert_ne!(m.assign(&pair[0]), m.assign(&pair[1]));
        }
        assert_eq!(m.raw_centroids().len(), 2);
    }

    proptest! {
        #[test]
        fn lloyd_invariants(raw in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 8..40), k in 1usize..6, seed in 0u64..1000) {
            let pts: Vec<Vec<f64>> = raw.iter().map(|(a, b)| vec![*a, *b]).collect();
            prop_assume!(distinct_count(&pts) >= k);
            let c = kmeans(&pts, k, seed).unwrap();
            prop_assert!(c.inertia_history.windows(2).all(|w| w[1] <= w[0]));
            // converged runs end at a fixed point of the Lloyd update
            if c.inertia_history.len() <= MAX_ITERATIONS {
                let (reassigned, _) = assign(&pts, &c.centroids);
                prop_assert_eq!(&reassigned, &c.assignment);
                let m = means(&pts, &c.assignment, &c.centroids);
                for (a, b) in m.iter().zip(&c.centroids) {
                    prop_assert!(sq_dist(a, b).sqrt() < 1e-8);
                }
            }
            let again = kmeans(&pts, k, seed).unwrap();
            prop_assert_eq!(again, c);
        }
    }
}
