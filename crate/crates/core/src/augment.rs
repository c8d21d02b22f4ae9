//! Server-side instruction augmentation over a public pool.
//!
//! All retrieval is an exact linear scan. Hits are ordered by similarity descending,
//! ties by record id ascending.

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::CandidateCenters;
use crate::embed_store::EmbeddingStore;
use crate::geometry::dot;
use crate::selection::CenterSelection;

/// Default similarity ceiling for augmentation retrieval.
pub const DEFAULT_ALPHA: f64 = 0.7;

const PAR_THRESHOLD: usize = 1 << 12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AugmentError {
    #[error("retrieval pool is empty")]
    EmptyPool,
    #[error("requested hit count must be at least 1")]
    ZeroK,
    #[error("query has dimension {query}, pool has dimension {pool}")]
    DimensionMismatch { query: usize, pool: usize },
    #[error("cannot sample {requested} records from a pool of {available}")]
    InsufficientPool { requested: usize, available: usize },
    #[error("{0}")]
    Mismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Feddca,
    Direct,
    Random,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Feddca, Strategy::Direct, Strategy::Random];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Feddca => "feddca",
            Strategy::Direct => "direct",
            Strategy::Random => "random",
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "feddca" => Ok(Strategy::Feddca),
            "direct" => Ok(Strategy::Direct),
            "random" => Ok(Strategy::Random),
            other => Err(format!("unknown strategy {other:?} (expected feddca, direct or random)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub id: u64,
    pub similarity: f64,
}

/// Records retrieved for one client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub client_id: usize,
    /// Query vectors that produced the hits (one for center retrieval, `ξ` for direct
    /// retrieval, the pool mean for random sampling).
    pub queries: Vec<Vec<f32>>,
    pub hits: Vec<Hit>,
    pub requested: usize,
    pub threshold: Option<f64>,
    /// `requested - hits.len()`.
    pub shortfall: usize,
}

impl RetrievalResult {
    pub fn ids(&self) -> Vec<u64> {
        self.hits.iter().map(|h| h.id).collect()
    }
}

fn check_query(pool: &EmbeddingStore, query: &[f32]) -> Result<(), AugmentError> {
    if pool.is_empty() {
        return Err(AugmentError::EmptyPool);
    }
    if query.len() != pool.dim() {
        return Err(AugmentError::DimensionMismatch {
            query: query.len(),
            pool: pool.dim(),
        });
    }
    Ok(())
}

fn scores(pool: &EmbeddingStore, query: &[f32]) -> Vec<f64> {
    let recs = pool.records();
    if recs.len() >= PAR_THRESHOLD {
        recs.par_iter().map(|r| dot(&r.embedding, query)).collect()
    } else {
        recs.iter().map(|r| dot(&r.embedding, query)).collect()
    }
}

// Records are id-sorted, so index order is id order.
fn by_rank(scores: &[f64]) -> impl Fn(&usize, &usize) -> std::cmp::Ordering + '_ {
    move |&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
}

/// Top-`k` indices of `candidates` by score.
fn top_k(scores: &[f64], mut candidates: Vec<usize>, k: usize) -> Vec<usize> {
    let cmp = by_rank(scores);
    if candidates.len() > k {
        candidates.select_nth_unstable_by(k - 1, &cmp);
        candidates.truncate(k);
    }
    candidates.sort_unstable_by(&cmp);
    candidates
}

fn hits_of(pool: &EmbeddingStore, scores: &[f64], idx: &[usize]) -> Vec<Hit> {
    idx.iter()
        .map(|&i| Hit {
            id: pool.records()[i].id,
            similarity: scores[i],
        })
        .collect()
}

/// Exact top-`k` retrieval by cosine. With a threshold, records whose similarity exceeds
/// it are dropped before ranking; fewer than `k` survivors is reported as shortfall.
pub fn retrieve_topk(
    pool: &EmbeddingStore,
    query: &[f32],
    k: usize,
    threshold: Option<f64>,
) -> Result<RetrievalResult, AugmentError> {
    if k == 0 {
        return Err(AugmentError::ZeroK);
    }
    check_query(pool, query)?;
    let s = scores(pool, query);
    let candidates: Vec<usize> = match threshold {
        Some(alpha) => (0..s.len()).filter(|&i| s[i] <= alpha).collect(),
        None => (0..s.len()).collect(),
    };
    let top = top_k(&s, candidates, k);
    Ok(RetrievalResult {
        client_id: 0,
        queries: vec![query.to_vec()],
        hits: hits_of(pool, &s, &top),
        requested: k,
        threshold,
        shortfall: k.saturating_sub(top.len()),
    })
}

/// One thresholded retrieval per selected center. Slot `k`'s results go to client `k`.
/// No deduplication across clients.
pub fn feddca_augment(
    pool: &EmbeddingStore,
    selection: &CenterSelection,
    per_client: usize,
    threshold: Option<f64>,
) -> Result<Vec<RetrievalResult>, AugmentError> {
    selection
        .slots
        .iter()
        .enumerate()
        .map(|(k, slot)| {
            let mut r = retrieve_topk(pool, &slot.vector, per_client, threshold)?;
            r.client_id = k;
            Ok(r)
        })
        .collect()
}

/// Per-query hit quotas: `per_client / xi` each, the first `per_client % xi` get one more.
pub fn query_quotas(per_client: usize, xi: usize) -> Vec<usize> {
    let (base, extra) = (per_client / xi, per_client % xi);
    (0..xi).map(|j| base + usize::from(j < extra)).collect()
}

/// Independent per-centroid retrieval for every client.
///
/// Each client's centroids are queried in order; a query that meets an id already taken
/// by an earlier query of the same client skips it and continues down its own ranking.
pub fn direct_retrieval_augment(
    pool: &EmbeddingStore,
    client_centers: &[CandidateCenters],
    per_client: usize,
) -> Result<Vec<RetrievalResult>, AugmentError> {
    if per_client == 0 {
        return Err(AugmentError::ZeroK);
    }
    client_centers
        .iter()
        .map(|cc| {
            if cc.is_empty() {
                return Err(AugmentError::Mismatch(format!(
                    "client {} has no centroids",
                    cc.client_id
                )));
            }
            let mut taken = vec![false; pool.len()];
            let mut hits = Vec::with_capacity(per_client);
            for (center, quota) in cc.centers.iter().zip(query_quotas(per_client, cc.len())) {
                check_query(pool, center)?;
                let s = scores(pool, center);
                let mut order: Vec<usize> = (0..s.len()).collect();
                order.sort_unstable_by(by_rank(&s));
                let mut got = 0;
                for i in order {
                    if got == quota {
                        break;
                    }
                    if !taken[i] {
                        taken[i] = true;
                        got += 1;
                        hits.push(Hit {
                            id: pool.records()[i].id,
                            similarity: s[i],
                        });
                    }
                }
            }
            hits.sort_by(|a, b| b.similarity.total_cmp(&a.similarity).then(a.id.cmp(&b.id)));
            Ok(RetrievalResult {
                client_id: cc.client_id,
                queries: cc.centers.clone(),
                shortfall: per_client - hits.len(),
                hits,
                requested: per_client,
                threshold: None,
            })
        })
        .collect()
}

fn pool_mean(pool: &EmbeddingStore) -> Vec<f32> {
    let mut sum = vec![0.0f64; pool.dim()];
    for r in pool.records() {
        for (s, &x) in sum.iter_mut().zip(&r.embedding) {
            *s += f64::from(x);
        }
    }
    let norm = sum.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return vec![0.0; pool.dim()];
    }
    sum.iter().map(|x| (x / norm) as f32).collect()
}

/// Uniform sample without replacement per client, independent across clients.
/// Similarities are to the normalized pool mean and only serve logging.
pub fn random_sampling_augment(
    pool: &EmbeddingStore,
    n_clients: usize,
    per_client: usize,
    seed: u64,
) -> Result<Vec<RetrievalResult>, AugmentError> {
    if pool.is_empty() {
        return Err(AugmentError::EmptyPool);
    }
    if per_client > pool.len() {
        return Err(AugmentError::InsufficientPool {
            requested: per_client,
            available: pool.len(),
        });
    }
    let mean = pool_mean(pool);
    let s = scores(pool, &mean);
    Ok((0..n_clients)
        .map(|k| {
            let mut rng = crate::seed::rng(seed, "random-sampling", k as u64);
            let mut picked = index::sample(&mut rng, pool.len(), per_client).into_vec();
            picked.sort_unstable_by(by_rank(&s));
            RetrievalResult {
                client_id: k,
                queries: vec![mean.clone()],
                hits: hits_of(pool, &s, &picked),
                requested: per_client,
                threshold: None,
                shortfall: 0,
            }
        })
        .collect())
}

/// Select each client's own top records using that client's selected center.
pub fn data_select(
    local_pools: &[EmbeddingStore],
    selection: &CenterSelection,
    per_client: usize,
) -> Result<Vec<RetrievalResult>, AugmentError> {
    if local_pools.len() != selection.slots.len() {
        return Err(AugmentError::Mismatch(format!(
            "{} local pools for {} selected centers",
            local_pools.len(),
            selection.slots.len()
        )));
    }
    local_pools
        .iter()
        .zip(&selection.slots)
        .enumerate()
        .map(|(k, (pool, slot))| {
            let mut r = retrieve_topk(pool, &slot.vector, per_client, None)?;
            r.client_id = k;
            Ok(r)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed_store::InstructionRecord;
    use crate::selection::Slot;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn store(vectors: Vec<Vec<f32>>) -> EmbeddingStore {
        let dim = vectors[0].len();
        EmbeddingStore::from_records(
            dim,
            vectors.into_iter().enumerate().map(|(i, v)| InstructionRecord {
                id: i as u64 + 1,
                domain: "pub".into(),
                embedding: v,
                text: None,
            }),
        )
        .unwrap()
    }

    fn random_store(seed: u64, n: usize, d: usize) -> EmbeddingStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        store(
            (0..n)
                .map(|_| (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect())
                .collect(),
        )
    }

    fn angle(deg: f64) -> Vec<f32> {
        let r = deg.to_radians();
        vec![r.cos() as f32, r.sin() as f32]
    }

    fn selection_of(vectors: Vec<Vec<f32>>) -> CenterSelection {
        CenterSelection {
            slots: vectors
                .into_iter()
                .enumerate()
                .map(|(i, vector)| Slot { client: i, cluster: 0, vector })
                .collect(),
            coverage: 0.0,
            reference_size: 0,
            passes: 0,
            swaps: 0,
            slot_visits: 0,
            trace: vec![],
        }
    }

    // full sort of every record, then filter and cut
    fn oracle_topk(pool: &EmbeddingStore, q: &[f32], k: usize, alpha: Option<f64>) -> Vec<u64> {
        let mut all: Vec<(f64, u64)> = pool
            .records()
            .iter()
            .map(|r| (r.embedding.iter().zip(q).map(|(a, b)| *a as f64 * *b as f64).sum(), r.id))
            .collect();
        all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        all.into_iter()
            .filter(|(s, _)| alpha.is_none_or(|a| *s <= a))
            .take(k)
            .map(|(_, id)| id)
            .collect()
    }

    #[test]
    fn exact_match_ranks_first() {
        let pool = random_store(1, 30, 6);
        let q = pool.records()[17].embedding.clone();
        let r = retrieve_topk(&pool, &q, 3, None).unwrap();
        assert_eq!(r.hits[0].id, pool.records()[17].id);
        assert!((r.hits[0].similarity - 1.0).abs() < 1e-6);
    }

    #[test]
    fn saturation_returns_everything_sorted() {
        let pool = random_store(2, 8, 4);
        let q = random_store(3, 1, 4).records()[0].embedding.clone();
        let r = retrieve_topk(&pool, &q, 20, None).unwrap();
        assert_eq!(r.hits.len(), 8);
        assert_eq!(r.shortfall, 12);
        assert_eq!(r.ids(), oracle_topk(&pool, &q, 20, None));
    }

    #[test]
    fn threshold_filters_before_ranking() {
        let sims = [0.9f64, 0.6, 0.3];
        let pool = store(sims.iter().map(|s| angle(s.acos().to_degrees())).collect());
        let q = vec![1.0, 0.0];
        let r = retrieve_topk(&pool, &q, 2, Some(0.7)).unwrap();
        assert_eq!(r.ids(), vec![2, 3]);
        assert!((r.hits[0].similarity - 0.6).abs() < 1e-6);
        assert!((r.hits[1].similarity - 0.3).abs() < 1e-6);
        assert_eq!(r.ids(), oracle_topk(&pool, &q, 2, Some(0.7)));
        assert_eq!(oracle_topk(&pool, &q, 2, None), vec![1, 2]);
    }

    #[test]
    fn argument_errors() {
        let pool = random_store(4, 3, 3);
        assert_eq!(retrieve_topk(&pool, &[1.0, 0.0, 0.0], 0, None), Err(AugmentError::ZeroK));
        assert_eq!(
            retrieve_topk(&pool, &[1.0, 0.0], 1, None),
            Err(AugmentError::DimensionMismatch { query: 2, pool: 3 })
        );
        assert_eq!(
            retrieve_topk(&EmbeddingStore::empty(3), &[1.0, 0.0, 0.0], 1, None),
            Err(AugmentError::EmptyPool)
        );
    }

    #[test]
    fn feddca_saturated_pool_goes_to_every_client() {
        let pool = random_store(5, 5, 4);
        let sel = selection_of(vec![
            pool.records()[0].embedding.clone(),
            pool.records()[3].embedding.clone(),
        ]);
        let out = feddca_augment(&pool, &sel, 5, None).unwrap();
        assert_eq!(out.len(), 2);
        for (k, r) in out.iter().enumerate() {
            assert_eq!(r.client_id, k);
            let mut ids = r.ids();
            ids.sort_unstable();
            assert_eq!(ids, vec![1, 2, 3, 4, 5]);
        }
        assert_eq!(out, feddca_augment(&pool, &sel, 5, None).unwrap());
    }

    #[test]
    fn quotas_follow_remainder_rule() {
        assert_eq!(query_quotas(3, 2), vec![2, 1]);
        assert_eq!(query_quotas(1000, 10), vec![100; 10]);
        assert_eq!(query_quotas(7, 3), vec![3, 2, 2]);
    }

    #[test]
    fn direct_with_one_centroid_is_topk() {
        let pool = random_store(6, 40, 5);
        let c = random_store(7, 1, 5).records()[0].embedding.clone();
        let cc = CandidateCenters::from_centers(3, vec![c.clone()]);
        let d = direct_retrieval_augment(&pool, &[cc], 7).unwrap();
        let t = retrieve_topk(&pool, &c, 7, None).unwrap();
        assert_eq!(d[0].hits, t.hits);
        assert_eq!(d[0].client_id, 3);
    }

    #[test]
    fn direct_backfills_overlapping_neighborhoods() {
        // ids 1..=6 at 0, 4, -7, 10, 13, 30 degrees; centroids at 0 and 6 degrees
        let pool = store([0.0, 4.0, -7.0, 10.0, 13.0, 30.0].iter().map(|&a| angle(a)).collect());
        let cc = CandidateCenters::from_centers(0, vec![angle(0.0), angle(6.0)]);
        let naive: std::collections::BTreeSet<u64> = oracle_topk(&pool, &angle(0.0), 2, None)
            .into_iter()
            .chain(oracle_topk(&pool, &angle(6.0), 2, None))
            .collect();
        assert_eq!(naive.into_iter().collect::<Vec<_>>(), vec![1, 2, 4]);
        let d = direct_retrieval_augment(&pool, &[cc], 4).unwrap();
        let mut ids = d[0].ids();
        ids.sort_unstable();
        assert_eq!(ids, vec![1, 2, 4, 5]);
        assert_eq!(d[0].shortfall, 0);
    }

    #[test]
    fn random_sampling_cases() {
        let pool = random_store(8, 20, 4);
        let a = random_sampling_augment(&pool, 3, 5, 42).unwrap();
        assert_eq!(a, random_sampling_augment(&pool, 3, 5, 42).unwrap());
        assert_ne!(a[0].ids(), a[1].ids());
        let all = random_sampling_augment(&pool, 1, 20, 1).unwrap();
        let mut ids = all[0].ids();
        ids.sort_unstable();
        assert_eq!(ids, (1..=20).collect::<Vec<_>>());
        assert_eq!(
            random_sampling_augment(&pool, 1, 21, 1),
            Err(AugmentError::InsufficientPool { requested: 21, available: 20 })
        );
    }

    #[test]
    fn random_sampling_inclusion_is_uniform() {
        let pool = random_store(9, 20, 3);
        let (trials, k) = (10_000u64, 5usize);
        let mut counts = vec![0u32; 20];
        for seed in 0..trials {
            for h in &random_sampling_augment(&pool, 1, k, seed).unwrap()[0].hits {
                counts[(h.id - 1) as usize] += 1;
            }
        }
        let p = k as f64 / 20.0;
        let mean = trials as f64 * p;
        let sigma = (trials as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - mean).abs() <= 3.0 * sigma, "{c} vs {mean} ± {}", 3.0 * sigma);
        }
    }

    #[test]
    fn data_select_cases() {
        let pools: Vec<_> = (0..2).map(|i| random_store(10 + i, 1000, 6)).collect();
        let q = random_store(12, 2, 6);
        let sel = selection_of(q.vectors().iter().map(|v| v.to_vec()).collect());
        let out = data_select(&pools, &sel, 200).unwrap();
        for (k, r) in out.iter().enumerate() {
            assert_eq!(r.hits.len(), 200);
            assert_eq!(r.ids(), oracle_topk(&pools[k], &sel.slots[k].vector, 200, None));
        }
        let small = vec![random_store(13, 50, 6), random_store(14, 50, 6)];
        let out = data_select(&small, &sel, 200).unwrap();
        assert!(out.iter().all(|r| r.hits.len() == 50));
        assert!(data_select(&small[..1], &sel, 5).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn matches_full_sort_oracle(seed in any::<u64>(), n in 1usize..60, k in 1usize..20, alpha in proptest::option::of(-0.5f64..1.0)) {
            let pool = random_store(seed, n, 5);
            let q = random_store(seed ^ 0xabc, 1, 5).records()[0].embedding.clone();
            let r = retrieve_topk(&pool, &q, k, alpha).unwrap();
            prop_assert_eq!(r.ids(), oracle_topk(&pool, &q, k, alpha));
            if let Some(a) = alpha {
                prop_assert!(r.hits.iter().all(|h| h.similarity <= a));
            }
        }

        #[test]
        fn lowering_threshold_never_raises_hits(seed in any::<u64>(), hi in 0.0f64..1.0, drop in 0.0f64..0.5) {
            let pool = random_store(seed, 40, 4);
            let q = random_store(seed ^ 7, 1, 4).records()[0].embedding.clone();
            let lo = hi - drop;
            let a = retrieve_topk(&pool, &q, 10, Some(hi)).unwrap();
            let b = retrieve_topk(&pool, &q, 10, Some(lo)).unwrap();
            let max = |r: &RetrievalResult| r.hits.first().map(|h| h.similarity).unwrap_or(f64::NEG_INFINITY);
            prop_assert!(max(&b) <= max(&a));
            prop_assert!(b.hits.iter().all(|h| h.similarity <= lo));
        }

        #[test]
        fn direct_ids_unique(seed in any::<u64>(), xi in 1usize..5, per in 1usize..30) {
            let pool = random_store(seed, 25, 4);
            let cents = random_store(seed ^ 3, xi, 4).vectors().iter().map(|v| v.to_vec()).collect();
            let d = direct_retrieval_augment(&pool, &[CandidateCenters::from_centers(0, cents)], per).unwrap();
            let mut ids = d[0].ids();
            let n = ids.len();
            ids.sort_unstable();
            ids.dedup();
            prop_assert_eq!(ids.len(), n);
            prop_assert_eq!(n, per.min(25));
        }
    }
}
