//! Planted-cluster data for experiments without real encoder embeddings.
//!
//! `n_clusters` in-domain clusters and `n_public_clusters` out-of-domain clusters each get a
//! random unit direction `c` and a random orthonormal basis `b_1..b_m` of an `m`-dimensional
//! subspace orthogonal to `c`. A member is
//!
//! `normalize(c + spread * sum_i g_i b_i + noise * g)`
//!
//! with standard normal `g_i` and an isotropic standard normal vector `g`. Small `m` gives
//! clusters with low intrinsic dimension, where neighbors are close and coverage rewards
//! retrieving many distinct records. In-domain members go to both the domain store and the
//! public pool; the pool additionally holds the out-of-domain members.
//!
//! The defaults (`m = 32`, spread 0.306, so a member has cosine about 0.5 with its cluster
//! direction) keep the in-domain pool per cluster below one client's augmentation budget. A
//! center placed in a cluster can then retrieve that cluster's whole in-domain pool above the
//! default threshold, and the total pool stays under 50k vectors.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::embed_store::{normalize, EmbeddingStore, InstructionRecord};
use crate::partition::{PartitionMode, PartitionPlan};

/// Domain label of planted in-domain records.
pub const DOMAIN_LABEL: &str = "domain";
/// Domain label of out-of-domain pool records.
pub const PUBLIC_LABEL: &str = "public";
/// First id used for pool records; domain records count up from 0.
pub const POOL_ID_BASE: u64 = 1 << 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub dim: usize,
    pub n_clusters: usize,
    pub domain_per_cluster: usize,
    pub pool_per_cluster: usize,
    pub n_public_clusters: usize,
    pub public_per_cluster: usize,
    pub intrinsic_dim: usize,
    pub spread: f32,
    pub noise: f32,
    /// When positive, in-domain cluster directions are `normalize(d + domain_spread * r)` for
    /// one shared random unit `d` and a random unit `r` per cluster.
    pub domain_spread: f32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            dim: 64,
            n_clusters: 10,
            domain_per_cluster: 500,
            pool_per_cluster: 800,
            n_public_clusters: 40,
            public_per_cluster: 1000,
            intrinsic_dim: 32,
            spread: 0.306,
            noise: 0.0,
            domain_spread: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub domain: EmbeddingStore,
    pub pool: EmbeddingStore,
    /// Planted cluster of every domain record, aligned with `domain.records()`.
    pub domain_labels: Vec<usize>,
    pub directions: Vec<Vec<f32>>,
}

struct Cluster {
    direction: Vec<f32>,
    basis: Vec<Vec<f32>>,
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    (0..dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    loop {
        let mut v = gaussian(rng, dim);
        if normalize(&mut v) {
            return v;
        }
    }
}

/// Random unit direction plus `m` orthonormal vectors orthogonal to it (Gram-Schmidt).
fn cluster(rng: &mut ChaCha8Rng, dim: usize, m: usize) -> Cluster {
    let direction = random_unit(rng, dim);
    framed(rng, direction, m)
}

fn framed(rng: &mut ChaCha8Rng, direction: Vec<f32>, m: usize) -> Cluster {
    let dim = direction.len();
    let mut frame = vec![direction];
    while frame.len() < m.min(dim - 1) + 1 {
        let mut v = gaussian(rng, dim);
        for f in &frame {
            let p: f32 = v.iter().zip(f).map(|(a, b)| a * b).sum();
            for (x, y) in v.iter_mut().zip(f) {
                *x -= p * y;
            }
        }
        if normalize(&mut v) {
            frame.push(v);
        }
    }
    let basis = frame.split_off(1);
    Cluster { direction: frame.pop().expect("frame holds the direction"), basis }
}

fn member(rng: &mut ChaCha8Rng, c: &Cluster, spread: f32, noise: f32) -> Vec<f32> {
    loop {
        let mut v = c.direction.clone();
        for b in &c.basis {
            let g: f32 = rng.sample(StandardNormal);
            for (x, y) in v.iter_mut().zip(b) {
                *x += spread * g * y;
            }
        }
        for x in v.iter_mut() {
            *x += noise * rng.sample::<f32, _>(StandardNormal);
        }
        if normalize(&mut v) {
            return v;
        }
    }
}

/// Generate a planted instance. Deterministic in `cfg`.
pub fn planted(cfg: &SynthConfig) -> SynthData {
    let mut rng = crate::seed::rng(cfg.seed, "synth-clusters", 0);
    let domain_clusters: Vec<Cluster> = if cfg.domain_spread > 0.0 {
        let d = random_unit(&mut rng, cfg.dim);
        (0..cfg.n_clusters)
            .map(|_| {
                let r = random_unit(&mut rng, cfg.dim);
                let mut direction: Vec<f32> =
                    d.iter().zip(&r).map(|(a, b)| a + cfg.domain_spread * b).collect();
                normalize(&mut direction);
                framed(&mut rng, direction, cfg.intrinsic_dim)
            })
            .collect()
    } else {
        (0..cfg.n_clusters).map(|_| cluster(&mut rng, cfg.dim, cfg.intrinsic_dim)).collect()
    };
    let public_clusters: Vec<Cluster> =
        (0..cfg.n_public_clusters).map(|_| cluster(&mut rng, cfg.dim, cfg.intrinsic_dim)).collect();

    let mut rng = crate::seed::rng(cfg.seed, "synth-domain", 0);
    let mut domain = Vec::new();
    let mut domain_labels = Vec::new();
    for (l, c) in domain_clusters.iter().enumerate() {
        for _ in 0..cfg.domain_per_cluster {
            domain_labels.push(l);
            domain.push(InstructionRecord {
                id: domain.len() as u64,
                domain: DOMAIN_LABEL.into(),
                embedding: member(&mut rng, c, cfg.spread, cfg.noise),
                text: None,
            });
        }
    }

    let mut rng = crate::seed::rng(cfg.seed, "synth-pool", 0);
    let mut pool = Vec::new();
    let groups = [
        (&domain_clusters, cfg.pool_per_cluster, DOMAIN_LABEL),
        (&public_clusters, cfg.public_per_cluster, PUBLIC_LABEL),
    ];
    for (clusters, per, label) in groups {
        for c in clusters {
            for _ in 0..per {
                pool.push(InstructionRecord {
                    id: POOL_ID_BASE + pool.len() as u64,
                    domain: label.into(),
                    embedding: member(&mut rng, c, cfg.spread, cfg.noise),
                    text: None,
                });
            }
        }
    }

    SynthData {
        domain: EmbeddingStore::from_records(cfg.dim, domain).expect("generated records are valid"),
        pool: EmbeddingStore::from_records(cfg.dim, pool).expect("generated records are valid"),
        domain_labels,
        directions: domain_clusters.into_iter().map(|c| c.direction).collect(),
    }
}

/// Each client draws its records evenly from `clusters_per_client` randomly chosen planted
/// clusters, without replacement across clients. Clusters may be shared by clients.
///
/// When the clients can jointly hold every cluster, cluster choices are redrawn until they
/// do, so that no planted cluster is absent from all local data.
pub fn skewed_plan(
    data: &SynthData,
    n_clients: usize,
    per_client: usize,
    clusters_per_client: usize,
    seed: u64,
) -> PartitionPlan {
    let mut rng = crate::seed::rng(seed, "synth-skewed-plan", 0);
    let n_clusters = data.directions.len();
    let cpc = clusters_per_client.min(n_clusters);
    let all: Vec<usize> = (0..n_clusters).collect();
    let groups: Vec<Vec<usize>> = loop {
        let g: Vec<Vec<usize>> = (0..n_clients)
            .map(|_| {
                let mut c: Vec<usize> = all.choose_multiple(&mut rng, cpc).copied().collect();
                c.sort_unstable();
                c
            })
            .collect();
        let mut seen = vec![false; n_clusters];
        g.iter().flatten().for_each(|&c| seen[c] = true);
        if n_clients * cpc < n_clusters || seen.iter().all(|&x| x) {
            break g;
        }
    };

    let mut members: Vec<Vec<u64>> = vec![Vec::new(); n_clusters];
    for (r, &l) in data.domain.records().iter().zip(&data.domain_labels) {
        members[l].push(r.id);
    }
    for m in &mut members {
        m.shuffle(&mut rng);
    }
    let mut clients = Vec::with_capacity(n_clients);
    let mut shortfall = Vec::with_capacity(n_clients);
    for chosen in &groups {
        let quotas = crate::augment::query_quotas(per_client, chosen.len());
        let mut mine = Vec::with_capacity(per_client);
        for (&c, q) in chosen.iter().zip(quotas) {
            let take = q.min(members[c].len());
            let at = members[c].len() - take;
            mine.extend(members[c].drain(at..));
        }
        shortfall.push(per_client - mine.len());
        clients.push(mine);
    }
    PartitionPlan {
        mode: PartitionMode::Distinct,
        beta: None,
        seed,
        n_clients,
        per_client,
        clients,
        shortfall,
        cluster_groups: groups,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::dot;

    fn small() -> SynthConfig {
        SynthConfig {
            dim: 16,
            n_clusters: 4,
            domain_per_cluster: 30,
            pool_per_cluster: 50,
            n_public_clusters: 3,
            public_per_cluster: 20,
            intrinsic_dim: 2,
            spread: 1.0,
            seed: 3,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn members_lie_near_their_cluster_subspace() {
        let cfg = SynthConfig { noise: 0.0, ..small() };
        let d = planted(&cfg);
        assert_eq!(d.domain.len(), 120);
        assert_eq!(d.pool.len(), 260);
        for (r, &l) in d.domain.records().iter().zip(&d.domain_labels) {
            assert!(dot(&r.embedding, &d.directions[l]) > 0.0);
            assert!((dot(&r.embedding, &r.embedding).sqrt() - 1.0).abs() < 1e-6);
        }
        // without noise the members of one cluster span exactly intrinsic_dim + 1 dimensions,
        // which Gram-Schmidt over the members recovers as the rank
        let members: Vec<&[f32]> = d
            .domain
            .records()
            .iter()
            .zip(&d.domain_labels)
            .filter(|(_, &l)| l == 0)
            .map(|(r, _)| r.embedding.as_slice())
            .collect();
        let mut frame: Vec<Vec<f64>> = Vec::new();
        for m in &members {
            let mut v: Vec<f64> = m.iter().map(|&x| x as f64).collect();
            for f in &frame {
                let p: f64 = v.iter().zip(f).map(|(a, b)| a * b).sum();
                for (x, y) in v.iter_mut().zip(f) {
                    *x -= p * y;
                }
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-3 {
                frame.push(v.iter().map(|x| x / n).collect());
            }
        }
        assert_eq!(frame.len(), cfg.intrinsic_dim + 1);
        assert_eq!(d.pool.domain_ids(DOMAIN_LABEL).len(), 200);
        assert_eq!(d.pool.domain_ids(PUBLIC_LABEL).len(), 60);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = planted(&small());
        let b = planted(&small());
        assert_eq!(a.domain, b.domain);
        assert_eq!(a.pool, b.pool);
        let c = planted(&SynthConfig { seed: 4, ..small() });
        assert_ne!(a.domain, c.domain);
    }

    #[test]
    fn skewed_plan_uses_chosen_clusters_only() {
        let d = planted(&small());
        let plan = skewed_plan(&d, 3, 9, 3, 1);
        let mut seen = std::collections::HashSet::new();
        for (ids, group) in plan.clients.iter().zip(&plan.cluster_groups) {
            assert_eq!(ids.len(), 9);
            assert_eq!(group.len(), 3);
            for id in ids {
                assert!(seen.insert(*id));
                assert!(group.contains(&d.domain_labels[*id as usize]));
            }
        }
    }

    #[test]
    fn domain_spread_pulls_cluster_directions_together() {
        let d = planted(&SynthConfig { domain_spread: 0.5, ..small() });
        for (i, a) in d.directions.iter().enumerate() {
            for b in &d.directions[i + 1..] {
                assert!(dot(a, b) > 0.6);
            }
        }
    }
}
