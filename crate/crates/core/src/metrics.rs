//! Reported quantities: cross-client domain coverage, ICACS, RUAI and communication cost.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::{self, ClusterError};
use crate::embed_store::EmbeddingStore;
use crate::geometry::{self, CompensatedSum, CoverageValue, GeometryError, SimilarityMode};

/// Centers per client used by ICACS unless overridden.
pub const DEFAULT_ICACS_K: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("domain reference store is empty")]
    EmptyReference,
    #[error("id {0} does not resolve in the universe store")]
    UnknownId(u64),
    #[error("no client record carries a domain label of the reference store")]
    EmptyIntersection,
    #[error("ICACS needs at least two clients with vectors, got {0}")]
    TooFewClients(usize),
    #[error("client {0} has no vectors")]
    EmptyClient(usize),
    #[error("no ids to count")]
    EmptyInput,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
}

/// Local and augmented record ids held by one client.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClientData {
    pub local: Vec<u64>,
    pub augmented: Vec<u64>,
}

/// Coverage of the domain reference by the pooled in-domain client records.
///
/// Client ids are resolved in `universe`; only records whose domain label occurs in
/// `domain_ref` count as in-domain.
pub fn cross_client_coverage(
    domain_ref: &EmbeddingStore,
    client_sets: &[ClientData],
    universe: &EmbeddingStore,
    mode: SimilarityMode,
) -> Result<CoverageValue, MetricsError> {
    if domain_ref.is_empty() {
        return Err(MetricsError::EmptyReference);
    }
    let domains: HashSet<&str> = domain_ref.domains().collect();
    let pooled: BTreeSet<u64> = client_sets
        .iter()
        .flat_map(|c| c.local.iter().chain(&c.augmented).copied())
        .collect();
    let mut covering = Vec::new();
    for id in pooled {
        let rec = universe.get(id).ok_or(MetricsError::UnknownId(id))?;
        if domains.contains(rec.domain.as_str()) {
            covering.push(rec.embedding.as_slice());
        }
    }
    if covering.is_empty() {
        return Err(MetricsError::EmptyIntersection);
    }
    Ok(geometry::coverage(&domain_ref.vectors(), &covering, mode)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcacsValue {
    pub value: f64,
    /// Centers actually produced per client; below the requested `k` when a client holds
    /// fewer vectors or k-means drops an empty cluster.
    pub centers_per_client: Vec<usize>,
}

fn canonical(vectors: &[&[f32]]) -> Vec<Vec<f32>> {
    let mut v: Vec<Vec<f32>> = vectors.iter().map(|x| x.to_vec()).collect();
    v.sort_by(|a, b| {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    v
}

fn content_seed(seed: u64, points: &[Vec<f32>]) -> u64 {
    let bytes: Vec<u8> = points.iter().flatten().flat_map(|x| x.to_le_bytes()).collect();
    crate::seed::derive(seed, "icacs", crate::seed::content_hash(&bytes))
}

/// Mean cosine over all pairs of k-means centers taken from different clients.
///
/// Each client's vectors are sorted and the k-means seed is derived from their content, so
/// the value does not depend on client order or on the order of vectors within a client.
pub fn icacs(per_client: &[Vec<&[f32]>], k: usize, seed: u64) -> Result<IcacsValue, MetricsError> {
    if per_client.len() < 2 {
        return Err(MetricsError::TooFewClients(per_client.len()));
    }
    let mut centers = Vec::with_capacity(per_client.len());
    for (i, vs) in per_client.iter().enumerate() {
        if vs.is_empty() {
            return Err(MetricsError::EmptyClient(i));
        }
        let points = canonical(vs);
        let kk = k.min(points.len());
        let c = clustering::kmeans(&points, kk, content_seed(seed, &points), clustering::DEFAULT_MAX_ITERS)?;
        centers.push(c.centers);
    }
    let mut sims = Vec::new();
    for a in 0..centers.len() {
        for b in a + 1..centers.len() {
            for x in &centers[a] {
                for y in &centers[b] {
                    sims.push(geometry::cosine(x, y)?);
                }
            }
        }
    }
    sims.sort_by(f64::total_cmp);
    let mut sum = CompensatedSum::default();
    for s in &sims {
        sum.add(*s);
    }
    Ok(IcacsValue {
        value: sum.total() / sims.len() as f64,
        centers_per_client: centers.iter().map(Vec::len).collect(),
    })
}

/// Unique ids over total ids across all clients' augmented lists.
pub fn ruai(client_sets: &[Vec<u64>]) -> Result<f64, MetricsError> {
    let total: usize = client_sets.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(MetricsError::EmptyInput);
    }
    let unique: HashSet<u64> = client_sets.iter().flatten().copied().collect();
    Ok(unique.len() as f64 / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommCost {
    pub upload_floats: u64,
    pub download_records: u64,
}

/// Upload is `n_clients * xi * dim` floats; download is one reference per augmented record.
pub fn comm_cost(n_clients: usize, xi: usize, dim: usize, augsets: &[Vec<u64>]) -> CommCost {
    CommCost {
        upload_floats: (n_clients * xi * dim) as u64,
        download_records: augsets.iter().map(|a| a.len() as u64).sum(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub domain_coverage: CoverageValue,
    /// Absent when fewer than two clients have augmented vectors.
    pub icacs: Option<f64>,
    pub ruai: f64,
    pub comm_upload_floats: u64,
    pub comm_download_records: u64,
    pub convergence_passes: usize,
}

/// Inputs for a full report.
pub struct ReportInputs<'a> {
    pub domain_ref: &'a EmbeddingStore,
    pub universe: &'a EmbeddingStore,
    pub clients: &'a [ClientData],
    /// Centers each client uploaded.
    pub centers_per_client: &'a [usize],
    pub icacs_k: usize,
    pub seed: u64,
    pub convergence_passes: usize,
    pub mode: SimilarityMode,
}

pub fn report(inp: &ReportInputs<'_>) -> Result<MetricsReport, MetricsError> {
    let domain_coverage = cross_client_coverage(inp.domain_ref, inp.clients, inp.universe, inp.mode)?;
    let augsets: Vec<Vec<u64>> = inp.clients.iter().map(|c| c.augmented.clone()).collect();
    let mut vectors: Vec<Vec<&[f32]>> = Vec::new();
    for a in &augsets {
        let mut v = Vec::with_capacity(a.len());
        for id in a {
            v.push(inp.universe.get(*id).ok_or(MetricsError::UnknownId(*id))?.embedding.as_slice());
        }
        if !v.is_empty() {
            vectors.push(v);
        }
    }
    let icacs = if vectors.len() >= 2 {
        Some(icacs(&vectors, inp.icacs_k, inp.seed)?.value)
    } else {
        None
    };
    let uploaded: usize = inp.centers_per_client.iter().sum();
    let cost = comm_cost(1, uploaded, inp.universe.dim(), &augsets);
    Ok(MetricsReport {
        domain_coverage,
        icacs,
        ruai: ruai(&augsets)?,
        comm_upload_floats: cost.upload_floats,
        comm_download_records: cost.download_records,
        convergence_passes: inp.convergence_passes,
    })
}

/// Per-domain record counts of a client's pooled data, for diagnostics.
pub fn domain_histogram(universe: &EmbeddingStore, ids: &[u64]) -> BTreeMap<String, usize> {
    let mut h = BTreeMap::new();
    for id in ids {
        if let Some(r) = universe.get(*id) {
            *h.entry(r.domain.clone()).or_insert(0) += 1;
        }
    }
    h
}
