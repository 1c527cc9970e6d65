//! Pseudo-labels for target samples: key-classifier argmax, the confidence
//! gate, and spherical k-means refinement anchored at source class centroids.

use thiserror::Error;

use crate::encoders::{EncoderError, EncoderPair};
use crate::numgrad::{kernels::dot, Tensor};
use crate::par::{map_indexed, Exec};

#[derive(Debug, Error)]
pub enum PseudoError {
    #[error("clustering needs at least one sample")]
    Empty,
    #[error("feature width {got} does not match centroid width {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoLabel {
    /// Key-classifier argmax.
    pub label: usize,
    /// Probability of `label`.
    pub confidence: f64,
    /// Refined class from clustering; equals `label` until refined.
    pub cluster_label: usize,
    /// `confidence > rho` (and the gate is enabled).
    pub gated: bool,
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Labels each row of class probabilities. With `gate_enabled == false` no
/// sample is gated, whatever its confidence.
pub fn assign_from_probs(probs: &Tensor, rho: f64, gate_enabled: bool) -> Vec<PseudoLabel> {
    let (rows, _) = probs.rows_cols();
    (0..rows)
        .map(|i| {
            let row = probs.row(i);
            let label = argmax(row);
            let confidence = row[label];
            PseudoLabel { label, confidence, cluster_label: label, gated: gate_enabled && confidence > rho }
        })
        .collect()
}

/// Runs the key encoder on the (weakly augmented) key view and labels it.
pub fn assign_pseudo_labels(
    pair: &EncoderPair,
    key_view: &Tensor,
    rho: f64,
    gate_enabled: bool,
) -> Result<Vec<PseudoLabel>, PseudoError> {
    let enc = pair.encode_key(key_view)?;
    Ok(assign_from_probs(&enc.probs, rho, gate_enabled))
}

#[derive(Debug, Clone)]
pub struct ClusterState {
    /// `C×d`, unit-norm rows.
    pub centroids: Tensor,
    pub assignment: Vec<usize>,
    pub iterations: usize,
    /// Sum of cosine similarities to the assigned centroid, after each half-step.
    pub objective_trace: Vec<f64>,
}

impl ClusterState {
    /// Nearest centroid (max cosine) for each unit-norm row of `features`.
    pub fn nearest(&self, features: &Tensor) -> Vec<usize> {
        assign_nearest(features, &self.centroids)
    }
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn assign_nearest(features: &Tensor, centroids: &Tensor) -> Vec<usize> {
    let (n, d) = features.rows_cols();
    let (c, _) = centroids.rows_cols();
    map_indexed(n, Exec::for_work(n * c * d), |i| {
        let sims: Vec<f64> = (0..c).map(|j| dot(features.row(i), centroids.row(j))).collect();
        argmax(&sims)
    })
}

fn objective(features: &Tensor, centroids: &Tensor, assignment: &[usize]) -> f64 {
    assignment
        .iter()
        .enumerate()
        .map(|(i, &a)| dot(features.row(i), centroids.row(a)))
        .sum()
}

/// Spherical k-means: alternate max-cosine assignment and normalized-mean
/// centroid updates. Empty clusters keep their previous centroid. Stops after
/// `iters` updates or once assignments stop changing; the returned assignment
/// is always the nearest-centroid partition for the returned centroids.
pub fn spherical_kmeans(
    features: &Tensor,
    init_centroids: &Tensor,
    iters: usize,
) -> Result<ClusterState, PseudoError> {
    let (n, d) = features.rows_cols();
    if n == 0 || features.is_empty() {
        return Err(PseudoError::Empty);
    }
    let (c, cd) = init_centroids.rows_cols();
    if cd != d {
        return Err(PseudoError::DimMismatch { expected: cd, got: d });
    }
    let mut cent = init_centroids.data().to_vec();
    cent.chunks_mut(d).for_each(normalize);
    let mut centroids = Tensor::matrix(c, d, cent).unwrap();
    let mut assignment = assign_nearest(features, &centroids);
    let mut trace = vec![objective(features, &centroids, &assignment)];
    let mut iterations = 0;
    for _ in 0..iters {
        let mut sums = centroids.data().to_vec();
        let mut counts = vec![0usize; c];
        for (i, &a) in assignment.iter().enumerate() {
            if counts[a] == 0 {
                sums[a * d..(a + 1) * d].fill(0.0);
            }
            counts[a] += 1;
            for (s, x) in sums[a * d..(a + 1) * d].iter_mut().zip(features.row(i)) {
                *s += x;
            }
        }
        for (j, chunk) in sums.chunks_mut(d).enumerate() {
            if counts[j] > 0 {
                normalize(chunk);
            }
        }
        centroids = Tensor::matrix(c, d, sums).unwrap();
        trace.push(objective(features, &centroids, &assignment));
        iterations += 1;
        let next = assign_nearest(features, &centroids);
        let changed = next != assignment;
        assignment = next;
        trace.push(objective(features, &centroids, &assignment));
        if !changed {
            break;
        }
    }
    Ok(ClusterState { centroids, assignment, iterations, objective_trace: trace })
}

/// Per-class normalized means of `features`. A class with no rows falls back
/// to the matching column of `classifier_weight` (`feat_dim × C`), normalized.
pub fn source_class_centroids(
    features: &Tensor,
    labels: &[usize],
    classes: usize,
    classifier_weight: &Tensor,
) -> Result<Tensor, PseudoError> {
    let (_, d) = features.rows_cols();
    let (wr, wc) = classifier_weight.rows_cols();
    if wr != d || wc != classes {
        return Err(PseudoError::DimMismatch { expected: d, got: wr });
    }
    let mut sums = vec![0.0; classes * d];
    let mut counts = vec![0usize; classes];
    for (i, &y) in labels.iter().enumerate() {
        counts[y] += 1;
        for (s, x) in sums[y * d..(y + 1) * d].iter_mut().zip(features.row(i)) {
            *s += x;
        }
    }
    for c in 0..classes {
        let row = &mut sums[c * d..(c + 1) * d];
        if counts[c] == 0 {
            for (k, r) in row.iter_mut().enumerate() {
                *r = classifier_weight.get(k, c);
            }
        }
        normalize(row);
    }
    Ok(Tensor::matrix(classes, d, sums).unwrap())
}

/// Clusters the pooled target features starting from source class centroids,
/// so cluster `c` is read as class `c`. `iters == 0` disables refinement.
pub fn refine_pseudo_labels(
    target_features: &Tensor,
    source_centroids: &Tensor,
    iters: usize,
) -> Result<Option<ClusterState>, PseudoError> {
    if iters == 0 {
        return Ok(None);
    }
    spherical_kmeans(target_features, source_centroids, iters).map(Some)
}

/// Applies a refinement (if any) to freshly assigned pseudo-labels.
pub fn apply_refinement(
    labels: &mut [PseudoLabel],
    state: Option<&ClusterState>,
    unit_features: &Tensor,
) {
    if let Some(state) = state {
        for (l, c) in labels.iter_mut().zip(state.nearest(unit_features)) {
            l.cluster_label = c;
        }
    }
}
