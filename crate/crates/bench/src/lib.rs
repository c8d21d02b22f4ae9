//! Shared fixtures for the criterion benches.

use fedca_core::clustering::{kmeans, CandidateCenters, DEFAULT_MAX_ITERS};
use fedca_core::synth::{self, SynthConfig, SynthData};
use fedca_core::{SelectionProblem, SelectionReference, SimilarityMode};

/// Planted instance with `pool_scale` times the default pool and public cluster sizes.
pub fn planted(pool_scale: f64, seed: u64) -> SynthData {
    let d = SynthConfig::default();
    let scale = |n: usize| ((n as f64 * pool_scale).round() as usize).max(1);
    synth::planted(&SynthConfig {
        pool_per_cluster: scale(d.pool_per_cluster),
        public_per_cluster: scale(d.public_per_cluster),
        seed,
        ..d
    })
}

/// `n` clients with `xi` k-means centers each, clustered from consecutive slices of the
/// domain store.
pub fn client_centers(data: &SynthData, n: usize, xi: usize, seed: u64) -> Vec<CandidateCenters> {
    let vectors = data.domain.vectors();
    let per = vectors.len() / n;
    (0..n)
        .map(|k| {
            let part = &vectors[k * per..(k + 1) * per];
            kmeans(part, xi, seed + k as u64, DEFAULT_MAX_ITERS)
                .expect("planted clients cluster")
                .with_client(k)
        })
        .collect()
}

pub fn selection_problem(centers: Vec<CandidateCenters>) -> SelectionProblem {
    SelectionProblem::new(centers, SelectionReference::Candidates, SimilarityMode::RawCosine)
        .expect("fixture problem is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_have_the_requested_shape() {
        let data = planted(0.05, 1);
        let centers = client_centers(&data, 4, 3, 0);
        assert_eq!(centers.len(), 4);
        assert!(centers.iter().all(|c| c.len() == 3));
        assert_eq!(selection_problem(centers).n_candidates(), 12);
        assert_eq!(data.pool.len(), 10 * 40 + 40 * 50);
    }
}
