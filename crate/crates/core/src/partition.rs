//! Per-client local datasets at controlled heterogeneity.
//!
//! Three modes: Dirichlet proportions over pseudo-label clusters, iid shards, and
//! disjoint groups of whole clusters. Labels are index-aligned with `source.records()`.

use std::collections::BTreeMap;

use rand::seq::{SliceRandom, index};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::{self, ClusterError};
use crate::embed_store::{EmbeddingStore, StoreError};

/// Number of pseudo-label clusters used when labels are derived by k-means.
pub const DEFAULT_LABEL_CLUSTERS: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PartitionError {
    #[error("source store is empty")]
    EmptySource,
    #[error("Dirichlet concentration must be positive and finite, got {0}")]
    BadBeta(f64),
    #[error("{labels} labels for {records} records")]
    LabelMismatch { labels: usize, records: usize },
    #[error("client and per-client counts must be at least 1")]
    ZeroCount,
    #[error("requested {requested} records but the source holds {available}")]
    Insufficient { requested: usize, available: usize },
    #[error("ran out of clusters after serving {served} of {clients} clients")]
    NotEnoughClusters { served: usize, clients: usize },
    #[error("plan refers to id {0}, which is not in the source")]
    UnknownId(u64),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error("{0}")]
    Store(String),
}

impl From<StoreError> for PartitionError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::UnknownId(id) => PartitionError::UnknownId(id),
            other => PartitionError::Store(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    Dirichlet,
    Iid,
    Distinct,
}

impl std::str::FromStr for PartitionMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dirichlet" => Ok(PartitionMode::Dirichlet),
            "iid" => Ok(PartitionMode::Iid),
            "distinct" => Ok(PartitionMode::Distinct),
            other => Err(format!("unknown partition mode {other:?} (expected dirichlet, iid or distinct)")),
        }
    }
}

impl std::fmt::Display for PartitionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PartitionMode::Dirichlet => "dirichlet",
            PartitionMode::Iid => "iid",
            PartitionMode::Distinct => "distinct",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub mode: PartitionMode,
    /// Dirichlet concentration; `None` for the other modes.
    pub beta: Option<f64>,
    pub seed: u64,
    pub n_clients: usize,
    pub per_client: usize,
    /// Record ids per client.
    pub clients: Vec<Vec<u64>>,
    /// Per client, how many records short of `per_client` the assignment is.
    #[serde(default)]
    pub shortfall: Vec<usize>,
    /// For distinct mode, the cluster labels each client drew from.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cluster_groups: Vec<Vec<usize>>,
}

impl PartitionPlan {
    pub fn total_shortfall(&self) -> usize {
        self.shortfall.iter().sum()
    }

    /// Materialize each client's local store.
    pub fn client_stores(&self, source: &EmbeddingStore) -> Result<Vec<EmbeddingStore>, PartitionError> {
        self.clients
            .iter()
            .map(|ids| source.subset_by_ids(ids).map_err(PartitionError::from))
            .collect()
    }
}

fn check(source: &EmbeddingStore, n_clients: usize, per_client: usize) -> Result<(), PartitionError> {
    if source.is_empty() {
        return Err(PartitionError::EmptySource);
    }
    if n_clients == 0 || per_client == 0 {
        return Err(PartitionError::ZeroCount);
    }
    Ok(())
}

fn check_labels(source: &EmbeddingStore, labels: &[usize]) -> Result<(), PartitionError> {
    if labels.len() != source.len() {
        return Err(PartitionError::LabelMismatch {
            labels: labels.len(),
            records: source.len(),
        });
    }
    Ok(())
}

/// Record indices grouped by label, keyed in label order.
fn groups(labels: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut g: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        g.entry(l).or_default().push(i);
    }
    g
}

/// Pseudo-labels by spherical k-means; `k` is capped at the store size.
pub fn pseudo_labels(source: &EmbeddingStore, k: usize, seed: u64) -> Result<Vec<usize>, PartitionError> {
    if source.is_empty() {
        return Err(PartitionError::EmptySource);
    }
    let points = source.vectors();
    let centers = clustering::kmeans(&points, k.min(points.len()), seed, clustering::DEFAULT_MAX_ITERS)?;
    Ok(clustering::assign_labels(&points, &centers)?)
}

/// Draw from a symmetric Dirichlet in log space.
///
/// `ln G` with `G ~ Gamma(beta)` is sampled as `ln Gamma(beta + 1) + ln(U) / beta`, which
/// stays finite for concentrations where `G` itself underflows to zero.
pub fn sample_dirichlet(rng: &mut ChaCha8Rng, k: usize, beta: f64) -> Vec<f64> {
    let gamma = Gamma::new(beta + 1.0, 1.0).expect("shape is at least 1");
    let logs: Vec<f64> = (0..k)
        .map(|_| {
            let g: f64 = gamma.sample(rng);
            let u: f64 = 1.0 - rng.random::<f64>();
            g.ln() + u.ln() / beta
        })
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

/// Integer quotas summing to `total`: floors first, then one extra to the largest
/// remainders, ties to the lower index.
pub fn largest_remainder(proportions: &[f64], total: usize) -> Vec<usize> {
    let raw: Vec<f64> = proportions.iter().map(|p| p * total as f64).collect();
    let mut q: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = q.iter().sum();
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (raw[a] - raw[a].floor(), raw[b] - raw[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        q[i] += 1;
    }
    q
}

/// Dirichlet label skew: each client draws proportions over the present labels, turns
/// them into quotas, and samples without replacement. A quota larger than what is left
/// in its cluster spills to the client's most probable cluster that still has records.
pub fn dirichlet_partition(
    source: &EmbeddingStore,
    labels: &[usize],
    n_clients: usize,
    per_client: usize,
    beta: f64,
    seed: u64,
) -> Result<PartitionPlan, PartitionError> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(PartitionError::BadBeta(beta));
    }
    check(source, n_clients, per_client)?;
    check_labels(source, labels)?;

    let mut rng = crate::seed::rng(seed, "partition-dirichlet", 0);
    // Each cluster is shuffled once; taking from the back is sampling without replacement.
    let mut remaining: Vec<Vec<usize>> = groups(labels).into_values().collect();
    for g in &mut remaining {
        g.shuffle(&mut rng);
    }
    let ids: Vec<u64> = source.ids().collect();
    let k = remaining.len();

    let mut clients = Vec::with_capacity(n_clients);
    let mut shortfall = Vec::with_capacity(n_clients);
    for _ in 0..n_clients {
        let p = sample_dirichlet(&mut rng, k, beta);
        let quotas = largest_remainder(&p, per_client);
        let mut by_preference: Vec<usize> = (0..k).collect();
        by_preference.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));

        let mut mine = Vec::with_capacity(per_client);
        let mut residual = 0usize;
        for (c, &q) in quotas.iter().enumerate() {
            let take = q.min(remaining[c].len());
            let at = remaining[c].len() - take;
            mine.extend(remaining[c].drain(at..).map(|i| ids[i]));
            residual += q - take;
        }
        for &c in &by_preference {
            if residual == 0 {
                break;
            }
            let take = residual.min(remaining[c].len());
            let at = remaining[c].len() - take;
            mine.extend(remaining[c].drain(at..).map(|i| ids[i]));
            residual -= take;
        }
        shortfall.push(residual);
        clients.push(mine);
    }
    Ok(PartitionPlan {
        mode: PartitionMode::Dirichlet,
        beta: Some(beta),
        seed,
        n_clients,
        per_client,
        clients,
        shortfall,
        cluster_groups: vec![],
    })
}

/// Uniform sample of `n_clients * per_client` records split into equal shards.
pub fn iid_partition(
    source: &EmbeddingStore,
    n_clients: usize,
    per_client: usize,
    seed: u64,
) -> Result<PartitionPlan, PartitionError> {
    check(source, n_clients, per_client)?;
    let need = n_clients * per_client;
    if need > source.len() {
        return Err(PartitionError::Insufficient {
            requested: need,
            available: source.len(),
        });
    }
    let mut rng = crate::seed::rng(seed, "partition-iid", 0);
    let mut picked = index::sample(&mut rng, source.len(), need).into_vec();
    picked.shuffle(&mut rng);
    let ids: Vec<u64> = source.ids().collect();
    Ok(PartitionPlan {
        mode: PartitionMode::Iid,
        beta: None,
        seed,
        n_clients,
        per_client,
        clients: picked
            .chunks(per_client)
            .map(|c| c.iter().map(|&i| ids[i]).collect())
            .collect(),
        shortfall: vec![0; n_clients],
        cluster_groups: vec![],
    })
}

/// Each client takes whole clusters from a shuffled cluster order until it holds at least
/// `per_client` candidates, then samples `per_client` of them uniformly. Clusters are never
/// shared between clients.
pub fn distinct_cluster_partition(
    source: &EmbeddingStore,
    labels: &[usize],
    n_clients: usize,
    per_client: usize,
    seed: u64,
) -> Result<PartitionPlan, PartitionError> {
    check(source, n_clients, per_client)?;
    check_labels(source, labels)?;
    let mut rng = crate::seed::rng(seed, "partition-distinct", 0);
    let mut order: Vec<(usize, Vec<usize>)> = groups(labels).into_iter().collect();
    order.shuffle(&mut rng);
    let ids: Vec<u64> = source.ids().collect();

    let mut next = order.into_iter();
    let mut clients = Vec::with_capacity(n_clients);
    let mut cluster_groups = Vec::with_capacity(n_clients);
    for served in 0..n_clients {
        let mut members = Vec::new();
        let mut chosen = Vec::new();
        while members.len() < per_client {
            let (label, g) = next.next().ok_or(PartitionError::NotEnoughClusters {
                served,
                clients: n_clients,
            })?;
            chosen.push(label);
            members.extend(g);
        }
        let pick = index::sample(&mut rng, members.len(), per_client);
        clients.push(pick.iter().map(|j| ids[members[j]]).collect());
        chosen.sort_unstable();
        cluster_groups.push(chosen);
    }
    Ok(PartitionPlan {
        mode: PartitionMode::Distinct,
        beta: None,
        seed,
        n_clients,
        per_client,
        clients,
        shortfall: vec![0; n_clients],
        cluster_groups,
    })
}

/// Label histogram of `ids` as proportions, over the label values `0..n_labels`.
pub fn label_distribution(source: &EmbeddingStore, labels: &[usize], ids: &[u64], n_labels: usize) -> Vec<f64> {
    let mut counts = vec![0usize; n_labels];
    let recs = source.records();
    for id in ids {
        if let Ok(i) = recs.binary_search_by_key(id, |r| r.id) {
            counts[labels[i]] += 1;
        }
    }
    let total = counts.iter().sum::<usize>().max(1) as f64;
    counts.into_iter().map(|c| c as f64 / total).collect()
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Mean over clients of the total-variation distance to the source's label distribution.
pub fn mean_label_skew(source: &EmbeddingStore, labels: &[usize], plan: &PartitionPlan) -> f64 {
    let n_labels = labels.iter().max().map_or(0, |m| m + 1);
    let all: Vec<u64> = source.ids().collect();
    let global = label_distribution(source, labels, &all, n_labels);
    let sum: f64 = plan
        .clients
        .iter()
        .map(|c| total_variation(&label_distribution(source, labels, c, n_labels), &global))
        .sum();
    sum / plan.clients.len().max(1) as f64
}
