//! Deterministic simulation of the augmentation protocol.
//!
//! A run partitions the domain store across clients, clusters each client's local data,
//! lets the server pick query centers (or not, for the baselines), retrieves augmented
//! records once, scores the result and finally samples clients for each training round.
//! Every random stream is keyed by the run seed and a phase label, so changing the number
//! of rounds never changes the partition or the augmentation.

use std::fmt::Display;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::augment::{self, RetrievalResult, Strategy, DEFAULT_ALPHA};
use crate::clustering::{self, CandidateCenters};
use crate::embed_store::{self, EmbeddingStore};
use crate::geometry::SimilarityMode;
use crate::metrics::{self, ClientData, MetricsReport, ReportInputs};
use crate::partition::{self, PartitionMode, PartitionPlan};
use crate::seed;
use crate::selection::{self, CenterSelection, GreedyConfig, SelectionProblem, SelectionReference};
use crate::synth::{self, SynthConfig};

pub const CONFIG_VERSION: u32 = 1;
pub const LOG_FILE: &str = "log.jsonl";

#[derive(Debug, Error)]
pub enum FedsimError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{phase}: {message}")]
    Phase { phase: &'static str, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn at<E: Display>(phase: &'static str) -> impl Fn(E) -> FedsimError {
    move |e| FedsimError::Phase {
        phase,
        message: e.to_string(),
    }
}

fn io(path: &Path) -> impl Fn(std::io::Error) -> FedsimError + '_ {
    move |source| FedsimError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub n_clients: usize,
    pub per_client_local: usize,
    pub per_client_aug: usize,
    pub xi: usize,
    /// Retrieval similarity ceiling for the selected centers; `null` disables it.
    pub alpha: Option<f64>,
    pub mode: PartitionMode,
    /// Dirichlet concentration, read only in Dirichlet mode.
    pub beta: f64,
    pub rounds: usize,
    pub clients_per_round: usize,
    pub seed: u64,
    pub strategy: Strategy,
    /// Binary store of in-domain records; planted data is generated when unset.
    pub domain_path: Option<PathBuf>,
    /// Binary store of the public pool.
    pub pool_path: Option<PathBuf>,
    pub synthetic: SynthConfig,
    /// Pseudo-label clusters used by the Dirichlet and distinct partitioners.
    pub label_clusters: usize,
    pub icacs_k: usize,
    pub similarity: SimilarityMode,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            version: CONFIG_VERSION,
            n_clients: 10,
            per_client_local: 100,
            per_client_aug: 1000,
            xi: 10,
            alpha: Some(DEFAULT_ALPHA),
            mode: PartitionMode::Dirichlet,
            beta: 0.1,
            rounds: 30,
            clients_per_round: 2,
            seed: 0,
            strategy: Strategy::Feddca,
            domain_path: None,
            pool_path: None,
            synthetic: SynthConfig::default(),
            label_clusters: partition::DEFAULT_LABEL_CLUSTERS,
            icacs_k: metrics::DEFAULT_ICACS_K,
            similarity: SimilarityMode::RawCosine,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), FedsimError> {
        let bad = |m: &str| Err(FedsimError::Config(m.to_string()));
        if self.version != CONFIG_VERSION {
            return Err(FedsimError::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        let counts = [
            ("n_clients", self.n_clients),
            ("per_client_local", self.per_client_local),
            ("per_client_aug", self.per_client_aug),
            ("xi", self.xi),
            ("rounds", self.rounds),
            ("clients_per_round", self.clients_per_round),
            ("label_clusters", self.label_clusters),
            ("icacs_k", self.icacs_k),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(FedsimError::Config(format!("{name} must be at least 1")));
        }
        if self.clients_per_round > self.n_clients {
            return bad("clients_per_round exceeds n_clients");
        }
        if self.mode == PartitionMode::Dirichlet && !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad("beta must be positive in dirichlet mode");
        }
        if self.alpha.is_some_and(|a| !a.is_finite()) {
            return bad("alpha must be finite");
        }
        if self.domain_path.is_some() != self.pool_path.is_some() {
            return bad("domain_path and pool_path must be given together");
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, FedsimError> {
        let c: ExperimentConfig = serde_json::from_str(text).map_err(|e| FedsimError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, FedsimError> {
        let text = fs::read_to_string(path).map_err(io(path))?;
        let mut c = Self::from_json(&text)?;
        // store paths are relative to the config file
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut c.domain_path, &mut c.pool_path].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(c)
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    fn partition_label(&self) -> Option<f64> {
        (self.mode == PartitionMode::Dirichlet).then_some(self.beta)
    }
}

/// Stores an experiment reads: in-domain reference, public pool and their union.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub domain: EmbeddingStore,
    pub pool: EmbeddingStore,
    pub universe: EmbeddingStore,
}

impl ExperimentData {
    pub fn new(domain: EmbeddingStore, pool: EmbeddingStore) -> Result<Self, FedsimError> {
        let universe = pool.merge(&domain).map_err(at("load"))?;
        Ok(ExperimentData { domain, pool, universe })
    }

    pub fn load(cfg: &ExperimentConfig) -> Result<Self, FedsimError> {
        match (&cfg.domain_path, &cfg.pool_path) {
            (Some(d), Some(p)) => Self::new(
                embed_store::ingest_binary(d).map_err(at("load"))?,
                embed_store::ingest_binary(p).map_err(at("load"))?,
            ),
            _ => {
                let s = synth::planted(&cfg.synthetic);
                Self::new(s.domain, s.pool)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    UploadCenters,
    SelectionDone,
    AugmentedSet,
    RoundSample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolMessage {
    pub kind: MessageKind,
    /// 0 for the one-shot augmentation stage, then 1..=R.
    pub round: usize,
    pub client: Option<usize>,
    /// Floats for center uploads, centers for the selection, records for augmented sets,
    /// clients for round samples.
    pub payload_size: u64,
    pub payload_ref: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub clients: Vec<usize>,
}

impl ProtocolMessage {
    fn order_key(&self) -> (usize, MessageKind, Option<usize>) {
        (self.round, self.kind, self.client)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseTiming {
    pub phase: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentLog {
    pub config: ExperimentConfig,
    pub messages: Vec<ProtocolMessage>,
    pub plan: PartitionPlan,
    pub centers: Vec<CandidateCenters>,
    /// Empty slots for strategies without server-side selection.
    pub selection: CenterSelection,
    pub augmented: Vec<Vec<u64>>,
    pub shortfall: Vec<usize>,
    pub metrics: MetricsReport,
    pub timings: Vec<PhaseTiming>,
}

#[derive(Serialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum LogLine<'a> {
    Config { config: &'a ExperimentConfig, hash: String },
    Message(&'a ProtocolMessage),
    Selection { coverage: f64, passes: usize, swaps: usize, slot_visits: usize, trace: &'a [f64] },
    Metrics(&'a MetricsReport),
    Timing { phases: &'a [PhaseTiming] },
}

impl ExperimentLog {
    pub fn count(&self, kind: MessageKind) -> usize {
        self.messages.iter().filter(|m| m.kind == kind).count()
    }

    /// JSON-lines form; only the final `timing` line carries wall-clock values.
    pub fn to_jsonl(&self) -> String {
        let s = &self.selection;
        let mut lines = vec![LogLine::Config { config: &self.config, hash: self.config.hash() }];
        lines.extend(self.messages.iter().map(LogLine::Message));
        lines.push(LogLine::Selection {
            coverage: s.coverage,
            passes: s.passes,
            swaps: s.swaps,
            slot_visits: s.slot_visits,
            trace: &s.trace,
        });
        lines.push(LogLine::Metrics(&self.metrics));
        lines.push(LogLine::Timing { phases: &self.timings });
        let mut out = String::new();
        for l in lines {
            out.push_str(&serde_json::to_string(&l).expect("log line serializes"));
            out.push('\n');
        }
        out
    }
}

/// Lines of a JSON-lines log that do not carry wall-clock values.
pub fn replay_lines(log: &str) -> Vec<&str> {
    log.lines().filter(|l| !l.starts_with(r#"{"record":"timing""#)).collect()
}

/// Partition and per-client centers, shared by every strategy on the same data and seed.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub plan: PartitionPlan,
    pub centers: Vec<CandidateCenters>,
    pub timings: Vec<PhaseTiming>,
}

struct Clock(Vec<PhaseTiming>, Instant);

impl Clock {
    fn new() -> Self {
        Clock(Vec::new(), Instant::now())
    }
    fn lap(&mut self, phase: &str) {
        self.0.push(PhaseTiming {
            phase: phase.into(),
            seconds: self.1.elapsed().as_secs_f64(),
        });
        self.1 = Instant::now();
    }
}

fn label_clusters(cfg: &ExperimentConfig, data: &ExperimentData) -> Result<Vec<usize>, FedsimError> {
    partition::pseudo_labels(&data.domain, cfg.label_clusters, seed::derive(cfg.seed, "pseudo-labels", 0)).map_err(at("partition"))
}

/// Partition with pseudo-labels computed by the caller, or on demand when `labels` is `None`.
fn partition_with(cfg: &ExperimentConfig, data: &ExperimentData, labels: Option<&[usize]>) -> Result<PartitionPlan, FedsimError> {
    let pseed = seed::derive(cfg.seed, "partition", 0);
    let owned = match (cfg.mode, labels) {
        (PartitionMode::Iid, _) | (_, Some(_)) => Vec::new(),
        _ => label_clusters(cfg, data)?,
    };
    let labels = labels.unwrap_or(&owned);
    let plan = match cfg.mode {
        PartitionMode::Iid => partition::iid_partition(&data.domain, cfg.n_clients, cfg.per_client_local, pseed),
        PartitionMode::Dirichlet => {
            partition::dirichlet_partition(&data.domain, labels, cfg.n_clients, cfg.per_client_local, cfg.beta, pseed)
        }
        PartitionMode::Distinct => {
            partition::distinct_cluster_partition(&data.domain, labels, cfg.n_clients, cfg.per_client_local, pseed)
        }
    };
    plan.map_err(at("partition"))
}

/// Build the client partition for `cfg`.
pub fn partition_clients(cfg: &ExperimentConfig, data: &ExperimentData) -> Result<PartitionPlan, FedsimError> {
    partition_with(cfg, data, None)
}

pub fn prepare(cfg: &ExperimentConfig, data: &ExperimentData) -> Result<Prepared, FedsimError> {
    cfg.validate()?;
    let mut clock = Clock::new();
    let plan = partition_clients(cfg, data)?;
    clock.lap("partition");
    let mut p = prepare_with_plan(cfg, data, plan)?;
    clock.0.append(&mut p.timings);
    p.timings = clock.0;
    Ok(p)
}

/// Cluster each client of an existing plan.
pub fn prepare_with_plan(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    plan: PartitionPlan,
) -> Result<Prepared, FedsimError> {
    let mut clock = Clock::new();
    let stores = plan.client_stores(&data.domain).map_err(at("partition"))?;
    let mut centers = Vec::with_capacity(stores.len());
    for (k, s) in stores.iter().enumerate() {
        if s.is_empty() {
            return Err(FedsimError::Phase {
                phase: "cluster",
                message: format!("client {k} received no local records"),
            });
        }
        let v = s.vectors();
        let c = clustering::kmeans(&v, cfg.xi.min(v.len()), seed::derive(cfg.seed, "client-kmeans", k as u64), clustering::DEFAULT_MAX_ITERS)
            .map_err(at("cluster"))?;
        centers.push(c.with_client(k));
    }
    clock.lap("cluster");
    Ok(Prepared { plan, centers, timings: clock.0 })
}

fn empty_selection() -> CenterSelection {
    CenterSelection {
        slots: vec![],
        coverage: 0.0,
        reference_size: 0,
        passes: 0,
        swaps: 0,
        slot_visits: 0,
        trace: vec![],
    }
}

/// Client sample of round `round` (1-based), sorted.
pub fn round_sample(run_seed: u64, round: usize, n_clients: usize, per_round: usize) -> Vec<usize> {
    let mut rng = seed::rng(run_seed, "round-sample", round as u64);
    let mut s = index::sample(&mut rng, n_clients, per_round).into_vec();
    s.sort_unstable();
    s
}

/// Selection, augmentation, metrics and message choreography for one strategy.
pub fn simulate(cfg: &ExperimentConfig, data: &ExperimentData, prep: &Prepared) -> Result<ExperimentLog, FedsimError> {
    cfg.validate()?;
    let mut clock = Clock::new();
    let (selection, results): (CenterSelection, Vec<RetrievalResult>) = match cfg.strategy {
        Strategy::Feddca => {
            let problem = SelectionProblem::new(prep.centers.clone(), SelectionReference::Candidates, cfg.similarity)
                .map_err(at("select"))?;
            let sel = selection::greedy_select(&problem, &GreedyConfig::default()).map_err(at("select"))?;
            clock.lap("select");
            let r = augment::feddca_augment(&data.pool, &sel, cfg.per_client_aug, cfg.alpha).map_err(at("augment"))?;
            (sel, r)
        }
        Strategy::Direct => {
            clock.lap("select");
            let r = augment::direct_retrieval_augment(&data.pool, &prep.centers, cfg.per_client_aug).map_err(at("augment"))?;
            (empty_selection(), r)
        }
        Strategy::Random => {
            clock.lap("select");
            let r = augment::random_sampling_augment(
                &data.pool,
                cfg.n_clients,
                cfg.per_client_aug,
                seed::derive(cfg.seed, "random-sampling", 0),
            )
            .map_err(at("augment"))?;
            (empty_selection(), r)
        }
    };
    clock.lap("augment");

    let augmented: Vec<Vec<u64>> = results.iter().map(RetrievalResult::ids).collect();
    let clients: Vec<ClientData> = prep
        .plan
        .clients
        .iter()
        .zip(&augmented)
        .map(|(l, a)| ClientData { local: l.clone(), augmented: a.clone() })
        .collect();
    let centers_per_client: Vec<usize> = prep.centers.iter().map(CandidateCenters::len).collect();
    let report = metrics::report(&ReportInputs {
        domain_ref: &data.domain,
        universe: &data.universe,
        clients: &clients,
        centers_per_client: &centers_per_client,
        icacs_k: cfg.icacs_k,
        seed: seed::derive(cfg.seed, "icacs", 0),
        convergence_passes: selection.passes,
        mode: cfg.similarity,
    })
    .map_err(at("metrics"))?;
    clock.lap("metrics");

    let dim = data.domain.dim() as u64;
    let mut messages = Vec::new();
    for c in &prep.centers {
        messages.push(ProtocolMessage {
            kind: MessageKind::UploadCenters,
            round: 0,
            client: Some(c.client_id),
            payload_size: c.len() as u64 * dim,
            payload_ref: format!("centers.json#/{}", c.client_id),
            clients: vec![],
        });
    }
    messages.push(ProtocolMessage {
        kind: MessageKind::SelectionDone,
        round: 0,
        client: None,
        payload_size: selection.slots.len() as u64,
        payload_ref: "selection.json".into(),
        clients: vec![],
    });
    for r in &results {
        messages.push(ProtocolMessage {
            kind: MessageKind::AugmentedSet,
            round: 0,
            client: Some(r.client_id),
            payload_size: r.hits.len() as u64,
            payload_ref: format!("augsets.json#/{}", r.client_id),
            clients: vec![],
        });
    }
    for round in 1..=cfg.rounds {
        let picked = round_sample(cfg.seed, round, cfg.n_clients, cfg.clients_per_round);
        messages.push(ProtocolMessage {
            kind: MessageKind::RoundSample,
            round,
            client: None,
            payload_size: picked.len() as u64,
            payload_ref: String::new(),
            clients: picked,
        });
    }
    messages.sort_by_key(ProtocolMessage::order_key);
    clock.lap("messages");

    let mut timings = prep.timings.clone();
    timings.extend(clock.0);
    Ok(ExperimentLog {
        config: cfg.clone(),
        messages,
        plan: prep.plan.clone(),
        centers: prep.centers.clone(),
        selection,
        shortfall: results.iter().map(|r| r.shortfall).collect(),
        augmented,
        metrics: report,
        timings,
    })
}

/// Full pipeline in memory.
pub fn run_pipeline(cfg: &ExperimentConfig, data: &ExperimentData) -> Result<ExperimentLog, FedsimError> {
    let prep = prepare(cfg, data)?;
    simulate(cfg, data, &prep)
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<(), FedsimError> {
    let path = dir.join(name);
    let text = serde_json::to_string_pretty(value).expect("artifact serializes");
    fs::write(&path, text + "\n").map_err(io(&path))
}

/// Write the log and its artifacts into `out/run-<hash prefix>/` and return that directory.
pub fn persist(log: &ExperimentLog, out: &Path) -> Result<PathBuf, FedsimError> {
    let dir = out.join(format!("run-{}", &log.config.hash()[..16]));
    fs::create_dir_all(&dir).map_err(io(&dir))?;
    write_json(&dir, "config.json", &log.config)?;
    write_json(&dir, "plan.json", &log.plan)?;
    write_json(&dir, "centers.json", &log.centers)?;
    write_json(&dir, "selection.json", &log.selection)?;
    write_json(&dir, "augsets.json", &log.augmented)?;
    write_json(&dir, "metrics.json", &log.metrics)?;
    let path = dir.join(LOG_FILE);
    let mut f = fs::File::create(&path).map_err(io(&path))?;
    f.write_all(log.to_jsonl().as_bytes()).map_err(io(&path))?;
    Ok(dir)
}

/// Load the configured stores, run the pipeline and persist it under `out`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<(ExperimentLog, PathBuf), FedsimError> {
    cfg.validate()?;
    let start = Instant::now();
    let data = ExperimentData::load(cfg)?;
    let load = start.elapsed().as_secs_f64();
    let mut log = run_pipeline(cfg, &data)?;
    log.timings.insert(0, PhaseTiming { phase: "load".into(), seconds: load });
    let dir = persist(&log, out)?;
    Ok((log, dir))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub mode: PartitionMode,
    pub beta: Option<f64>,
    pub strategy: Strategy,
    pub seed: u64,
    pub domain_coverage: f64,
    pub icacs: Option<f64>,
    pub ruai: f64,
    pub comm_upload_floats: u64,
    pub comm_download_records: u64,
    pub convergence_passes: usize,
}

impl ComparisonRow {
    fn new(cfg: &ExperimentConfig, m: &MetricsReport) -> Self {
        ComparisonRow {
            mode: cfg.mode,
            beta: cfg.partition_label(),
            strategy: cfg.strategy,
            seed: cfg.seed,
            domain_coverage: m.domain_coverage.value,
            icacs: m.icacs,
            ruai: m.ruai,
            comm_upload_floats: m.comm_upload_floats,
            comm_download_records: m.comm_download_records,
            convergence_passes: m.convergence_passes,
        }
    }
}

pub const CSV_HEADER: &str =
    "mode,beta,strategy,seed,domain_coverage,icacs,ruai,comm_upload_floats,comm_download_records,convergence_passes";

pub fn to_csv(rows: &[ComparisonRow]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut s = format!("{CSV_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.mode,
            opt(r.beta),
            r.strategy,
            r.seed,
            r.domain_coverage,
            opt(r.icacs),
            r.ruai,
            r.comm_upload_floats,
            r.comm_download_records,
            r.convergence_passes
        ));
    }
    s
}

/// Run every strategy on one shared partition and set of client centers.
pub fn compare_prepared(
    base: &ExperimentConfig,
    data: &ExperimentData,
    prep: &Prepared,
    strategies: &[Strategy],
) -> Result<Vec<ComparisonRow>, FedsimError> {
    strategies
        .iter()
        .map(|&strategy| {
            let cfg = ExperimentConfig { strategy, ..base.clone() };
            let log = simulate(&cfg, data, prep)?;
            Ok(ComparisonRow::new(&cfg, &log.metrics))
        })
        .collect()
}

/// Compare configs that differ only in strategy.
pub fn compare_strategies(configs: &[ExperimentConfig], data: &ExperimentData) -> Result<Vec<ComparisonRow>, FedsimError> {
    let Some(first) = configs.first() else {
        return Err(FedsimError::Config("no configs to compare".into()));
    };
    for c in configs {
        if (ExperimentConfig { strategy: first.strategy, ..c.clone() }) != *first {
            return Err(FedsimError::Config("compared configs differ in more than strategy".into()));
        }
    }
    let prep = prepare(first, data)?;
    let strategies: Vec<Strategy> = configs.iter().map(|c| c.strategy).collect();
    compare_prepared(first, data, &prep, &strategies)
}

/// One comparison block per concentration, all under Dirichlet partitioning.
pub fn heterogeneity_sweep(
    base: &ExperimentConfig,
    data: &ExperimentData,
    betas: &[f64],
    strategies: &[Strategy],
) -> Result<Vec<ComparisonRow>, FedsimError> {
    if betas.is_empty() {
        return Err(FedsimError::Config("no beta values to sweep".into()));
    }
    base.validate()?;
    // pseudo-labels do not depend on beta
    let labels = label_clusters(base, data)?;
    let mut rows = Vec::new();
    for &beta in betas {
        let cfg = ExperimentConfig { mode: PartitionMode::Dirichlet, beta, ..base.clone() };
        cfg.validate()?;
        let plan = partition_with(&cfg, data, Some(&labels))?;
        let prep = prepare_with_plan(&cfg, data, plan)?;
        rows.extend(compare_prepared(&cfg, data, &prep, strategies)?);
    }
    Ok(rows)
}
