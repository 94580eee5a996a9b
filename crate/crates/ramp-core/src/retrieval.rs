//! Retrieved score and distance distributions over nested neighbor scopes.
//!
//! For each scope k = 1..K the retrieved score is the inverse-distance
//! weighted average of the k nearest neighbor values, with weights
//! normalized to sum to one. When fewer than K hits exist, the trailing
//! entries repeat the last real ones so downstream inputs keep a fixed
//! length.

use crate::datastore::{Datastore, NeighborHit};
use crate::error::{Error, Result};

/// Additive guard before inverting a distance; lets an exact match dominate
/// without dividing by zero.
pub const DIST_EPS: f64 = 1e-10;

/// Per-query neighbor distances `d_1..d_K` and per-scope retrieved scores.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalProfile {
    distances: Vec<f64>,
    scores: Vec<f64>,
    n_real: usize,
}

impl RetrievalProfile {
    pub fn distances(&self) -> &[f64] {
        &self.distances
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    /// Number of hits actually retrieved before padding.
    pub fn n_real(&self) -> usize {
        self.n_real
    }

    pub fn k(&self) -> usize {
        self.scores.len()
    }
}

/// Builds the profile from hits already sorted by distance ascending.
pub fn retrieval_profile(hits: &[NeighborHit], k: usize) -> Result<RetrievalProfile> {
    if hits.is_empty() {
        return Err(Error::EmptyInput("retrieval profile hits"));
    }
    if k == 0 {
        return Err(Error::InvalidConfig("profile k must be >= 1".into()));
    }
    if hits.windows(2).any(|w| w[0].distance > w[1].distance) {
        return Err(Error::UnsortedHits);
    }
    let n_real = hits.len().min(k);
    let mut distances = Vec::with_capacity(k);
    let mut scores = Vec::with_capacity(k);
    // The weights for scope k are a prefix of the weights for scope k+1,
    // so running sums give every scope in one pass.
    let mut weight_sum = 0.0;
    let mut weighted_value_sum = 0.0;
    for hit in &hits[..n_real] {
        let w = 1.0 / (hit.distance + DIST_EPS);
        weight_sum += w;
        weighted_value_sum += w * hit.value;
        distances.push(hit.distance);
        scores.push(weighted_value_sum / weight_sum);
    }
    for _ in n_real..k {
        distances.push(distances[n_real - 1]);
        scores.push(scores[n_real - 1]);
    }
    Ok(RetrievalProfile {
        distances,
        scores,
        n_real,
    })
}

/// Fixed-scope nearest-neighbor score: the inverse-distance weighted average
/// over exactly k neighbors. The baseline the learned scope weighting is
/// compared against.
pub fn vanilla_knn_score(store: &Datastore, query: &[f64], k: usize) -> Result<f64> {
    let hits = store.search(query, k)?;
    let profile = retrieval_profile(&hits, k)?;
    Ok(profile.scores()[k - 1])
}
