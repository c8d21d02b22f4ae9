use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use fedca_core::augment::{self, RetrievalResult};
use fedca_core::clustering::{self, CandidateCenters};
use fedca_core::embed_store::{self, EmbeddingStore, InstructionRecord};
use fedca_core::fedsim::{self, ExperimentData};
use fedca_core::metrics::{self, ClientData, ReportInputs};
use fedca_core::partition::{self, PartitionPlan};
use fedca_core::selection::{
    self, CenterSelection, GreedyConfig, Initialization, SelectionError, Termination,
};
use fedca_core::selfcheck::{self, Corruption, SelfcheckOptions};
use fedca_core::synth;
use fedca_core::{
    ExperimentConfig, PartitionMode, SelectionProblem, SelectionReference, SimilarityMode, Strategy,
};

/// Domain label written on center records.
const CENTER_LABEL: &str = "center";

#[derive(Parser)]
#[command(name = "fedca", version, about = "Coverage-oriented center selection and retrieval augmentation over instruction embeddings")]
struct Cli {
    /// Worker threads for parallel scans (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a JSON-lines embedding file into the FDCA binary format.
    Ingest {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        dim: usize,
    },
    /// Write an FDCA binary store back to JSON lines.
    Export {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Spherical k-means over one client's embeddings.
    Cluster {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = clustering::DEFAULT_MAX_ITERS)]
        max_iters: usize,
        /// Output store of centers, domain label "center".
        #[arg(long)]
        out: PathBuf,
    },
    /// Split an in-domain store into per-client local datasets.
    Partition {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value = "dirichlet")]
        mode: PartitionMode,
        #[arg(long, default_value_t = 0.1)]
        beta: f64,
        #[arg(long, default_value_t = 10)]
        clients: usize,
        #[arg(long, default_value_t = 100)]
        per_client: usize,
        /// Pseudo-label clusters for the dirichlet and distinct modes.
        #[arg(long, default_value_t = partition::DEFAULT_LABEL_CLUSTERS)]
        label_clusters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write each client's records to DIR/client<k>.fdca.
        #[arg(long, value_name = "DIR")]
        client_stores: Option<PathBuf>,
    },
    /// Choose one center per client from all uploaded centers.
    Select {
        #[command(flatten)]
        problem: ProblemArgs,
        #[arg(long, value_enum, default_value_t = SelectMode::Greedy)]
        mode: SelectMode,
        /// Beam width for --mode beam.
        #[arg(long, default_value_t = 256)]
        width: usize,
        /// Largest subset count --mode brute will enumerate.
        #[arg(long, default_value_t = selection::DEFAULT_BRUTE_BUDGET)]
        budget: u64,
        #[command(flatten)]
        greedy: GreedyArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrieve augmentation records from the public pool.
    Augment {
        #[arg(long)]
        pool: PathBuf,
        #[arg(long, value_enum, default_value_t = StrategyArg::Feddca)]
        strategy: StrategyArg,
        /// Selection file, required by the feddca strategy.
        #[arg(long)]
        selection: Option<PathBuf>,
        /// One center file per client, required by the direct strategy.
        #[arg(long, num_args = 1..)]
        centers: Vec<PathBuf>,
        /// Client count for the random strategy (default: slots in --selection).
        #[arg(long)]
        clients: Option<usize>,
        #[arg(long, default_value_t = 1000)]
        per_client: usize,
        #[arg(long, default_value_t = augment::DEFAULT_ALPHA)]
        alpha: f64,
        /// Disable the similarity ceiling.
        #[arg(long)]
        no_threshold: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Domain coverage, ICACS, RUAI and communication totals for a finished augmentation.
    Metrics {
        #[arg(long)]
        domain: PathBuf,
        #[arg(long)]
        universe: PathBuf,
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        augsets: PathBuf,
        /// Centers uploaded per client.
        #[arg(long, default_value_t = 10)]
        xi: usize,
        /// Selection file whose pass count is reported.
        #[arg(long)]
        selection: Option<PathBuf>,
        #[arg(long, default_value_t = metrics::DEFAULT_ICACS_K)]
        icacs_k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = ModeArg::Raw)]
        similarity: ModeArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the whole simulated protocol and write a run directory.
    Run {
        /// Experiment config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare strategies across Dirichlet concentrations.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0.01,0.1,1,10")]
        betas: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "feddca,direct,random")]
        strategies: Vec<Strategy>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare strategies on one shared partition.
    Compare {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "feddca,direct,random")]
        strategies: Vec<Strategy>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Exact or beam search over all center subsets.
    Oracle {
        #[command(subcommand)]
        kind: OracleKind,
    },
    /// Run the bundled property suite.
    Selfcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        instances: usize,
        /// Test hook: inject a defect the suite must detect.
        #[arg(long, value_enum, hide = true)]
        corrupt: Option<CorruptArg>,
        /// Also write the report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the planted domain and pool stores of a config.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the generator seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Directory receiving domain.fdca, pool.fdca and labels.json.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Write the default experiment config.
    Config {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum OracleKind {
    /// Exhaustive search; refused when the subset count exceeds --budget.
    Brute {
        #[command(flatten)]
        problem: ProblemArgs,
        #[arg(long, default_value_t = selection::DEFAULT_BRUTE_BUDGET)]
        budget: u64,
        #[command(flatten)]
        common: OracleArgs,
    },
    /// Beam search at each listed width; the widest result is written.
    Beam {
        #[command(flatten)]
        problem: ProblemArgs,
        #[arg(long, value_delimiter = ',', default_value = "256,512,1024,2048")]
        widths: Vec<usize>,
        #[command(flatten)]
        common: OracleArgs,
    },
}

#[derive(Args)]
struct ProblemArgs {
    /// One center file per client, in client order.
    #[arg(long, num_args = 1.., required = true)]
    centers: Vec<PathBuf>,
    /// "call" for the union of all centers, or a store to cover.
    #[arg(long, default_value = "call")]
    reference: String,
    #[arg(long, value_enum, default_value_t = ModeArg::Raw)]
    similarity: ModeArg,
}

#[derive(Args)]
struct GreedyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = InitArg::Lowest)]
    init: InitArg,
    #[arg(long, value_enum, default_value_t = TerminationArg::FullPass)]
    termination: TerminationArg,
    /// Restrict slot i to client i's own centers.
    #[arg(long)]
    per_client_slots: bool,
}

#[derive(Args)]
struct OracleArgs {
    /// Greedy selection to compare against the oracle.
    #[arg(long)]
    greedy: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Ratio report path (also printed to stdout).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SelectMode {
    Greedy,
    Beam,
    Brute,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Feddca,
    Direct,
    Random,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Raw,
    Affine,
}

#[derive(Clone, Copy, ValueEnum)]
enum InitArg {
    Lowest,
    Seeded,
}

#[derive(Clone, Copy, ValueEnum)]
enum TerminationArg {
    FullPass,
    FirstStall,
}

#[derive(Clone, Copy, ValueEnum)]
enum CorruptArg {
    Submodularity,
}

impl From<ModeArg> for SimilarityMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Raw => SimilarityMode::RawCosine,
            ModeArg::Affine => SimilarityMode::AffineShifted,
        }
    }
}

impl From<&GreedyArgs> for GreedyConfig {
    fn from(a: &GreedyArgs) -> Self {
        GreedyConfig {
            seed: a.seed,
            init: match a.init {
                InitArg::Lowest => Initialization::LowestIndex,
                InitArg::Seeded => Initialization::Seeded,
            },
            termination: match a.termination {
                TerminationArg::FullPass => Termination::FullPass,
                TerminationArg::FirstStall => Termination::FirstStall,
            },
            per_client_slots: a.per_client_slots,
        }
    }
}

/// How a failed command maps onto the process exit status.
enum Failure {
    Usage(String),
    Data(anyhow::Error),
    Budget(String),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Data(e)
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Budget(_) => 3,
        }
    }
}

fn selection_failure(e: SelectionError) -> Failure {
    match e {
        SelectionError::BudgetExceeded { .. } => Failure::Budget(e.to_string()),
        other => Failure::Data(other.into()),
    }
}

type Outcome = Result<(), Failure>;

/// One record of augsets.json.
#[derive(Debug, Serialize, Deserialize)]
struct AugsetEntry {
    client: usize,
    ids: Vec<u64>,
    sims: Vec<f64>,
    shortfall: usize,
}

/// augsets.json as written by `augment`, or the bare id lists of a run directory.
#[derive(Deserialize)]
#[serde(untagged)]
enum AugsetsFile {
    Entries(Vec<AugsetEntry>),
    Ids(Vec<Vec<u64>>),
}

#[derive(Serialize)]
struct WidthResult {
    width: usize,
    coverage: f64,
}

#[derive(Serialize)]
struct OracleReport {
    oracle: &'static str,
    oracle_coverage: f64,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    widths: Vec<WidthResult>,
    greedy_coverage: Option<f64>,
    ratio_pct: Option<f64>,
}

fn read_store(path: &Path) -> anyhow::Result<EmbeddingStore> {
    embed_store::ingest_binary(path).with_context(|| format!("reading {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig, Failure> {
    let cfg = match path {
        Some(p) => ExperimentConfig::load(p).map_err(anyhow::Error::from)?,
        None => ExperimentConfig::default(),
    };
    cfg.validate().map_err(anyhow::Error::from)?;
    Ok(cfg)
}

fn client_centers(paths: &[PathBuf]) -> anyhow::Result<Vec<CandidateCenters>> {
    paths
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let store = read_store(p)?;
            let centers = store.records().iter().map(|r| r.embedding.clone()).collect();
            Ok(CandidateCenters::from_centers(i, centers))
        })
        .collect()
}

fn build_problem(a: &ProblemArgs) -> Result<SelectionProblem, Failure> {
    let candidates = client_centers(&a.centers)?;
    let reference = if a.reference == "call" {
        SelectionReference::Candidates
    } else {
        let store = read_store(Path::new(&a.reference))?;
        SelectionReference::Vectors(store.records().iter().map(|r| r.embedding.clone()).collect())
    };
    SelectionProblem::new(candidates, reference, a.similarity.into()).map_err(selection_failure)
}

fn entries(results: &[RetrievalResult]) -> Vec<AugsetEntry> {
    results
        .iter()
        .map(|r| AugsetEntry {
            client: r.client_id,
            ids: r.ids(),
            sims: r.hits.iter().map(|h| h.similarity).collect(),
            shortfall: r.shortfall,
        })
        .collect()
}

fn cmd_cluster(input: &Path, k: usize, seed: u64, max_iters: usize, out: &Path) -> Outcome {
    let store = read_store(input)?;
    let centers = clustering::kmeans(&store.vectors(), k, seed, max_iters).map_err(anyhow::Error::from)?;
    let records: Vec<InstructionRecord> = centers
        .centers
        .into_iter()
        .enumerate()
        .map(|(i, embedding)| InstructionRecord {
            id: i as u64,
            domain: CENTER_LABEL.into(),
            embedding,
            text: None,
        })
        .collect();
    let store = EmbeddingStore::from_records(store.dim(), records).map_err(anyhow::Error::from)?;
    embed_store::write_binary(&store, out).map_err(anyhow::Error::from)?;
    println!("{} centers after {} iterations", store.len(), centers.iterations);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_partition(
    input: &Path,
    mode: PartitionMode,
    beta: f64,
    clients: usize,
    per_client: usize,
    label_clusters: usize,
    seed: u64,
    out: &Path,
    client_stores: Option<&Path>,
) -> Outcome {
    let store = read_store(input)?;
    let labels = || partition::pseudo_labels(&store, label_clusters, fedca_core::seed::derive(seed, "pseudo-labels", 0));
    let plan = match mode {
        PartitionMode::Iid => partition::iid_partition(&store, clients, per_client, seed),
        PartitionMode::Dirichlet => labels().and_then(|l| partition::dirichlet_partition(&store, &l, clients, per_client, beta, seed)),
        PartitionMode::Distinct => labels().and_then(|l| partition::distinct_cluster_partition(&store, &l, clients, per_client, seed)),
    }
    .map_err(anyhow::Error::from)?;
    write_json(out, &plan)?;
    if let Some(dir) = client_stores {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        for (k, s) in plan.client_stores(&store).map_err(anyhow::Error::from)?.iter().enumerate() {
            embed_store::write_binary(s, &dir.join(format!("client{k}.fdca"))).map_err(anyhow::Error::from)?;
        }
    }
    if plan.total_shortfall() > 0 {
        eprintln!("warning: {} records short across clients", plan.total_shortfall());
    }
    Ok(())
}

fn cmd_select(
    problem: &ProblemArgs,
    mode: SelectMode,
    width: usize,
    budget: u64,
    greedy: &GreedyArgs,
    out: &Path,
) -> Outcome {
    let p = build_problem(problem)?;
    let sel = match mode {
        SelectMode::Greedy => selection::greedy_select(&p, &greedy.into()),
        SelectMode::Beam => selection::beam_select(&p, width),
        SelectMode::Brute => selection::brute_force_select(&p, budget),
    }
    .map_err(selection_failure)?;
    write_json(out, &sel)?;
    println!("coverage {} passes {} swaps {}", sel.coverage, sel.passes, sel.swaps);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_augment(
    pool: &Path,
    strategy: StrategyArg,
    selection: Option<&Path>,
    centers: &[PathBuf],
    clients: Option<usize>,
    per_client: usize,
    alpha: Option<f64>,
    seed: u64,
    out: &Path,
) -> Outcome {
    let pool = read_store(pool)?;
    let load_selection = || -> Result<CenterSelection, Failure> {
        let path = selection.ok_or_else(|| Failure::Usage("--selection is required".into()))?;
        Ok(read_json(path)?)
    };
    let results = match strategy {
        StrategyArg::Feddca => augment::feddca_augment(&pool, &load_selection()?, per_client, alpha),
        StrategyArg::Direct => {
            if centers.is_empty() {
                return Err(Failure::Usage("--centers is required by the direct strategy".into()));
            }
            augment::direct_retrieval_augment(&pool, &client_centers(centers)?, per_client)
        }
        StrategyArg::Random => {
            let n = match clients {
                Some(n) => n,
                None => load_selection()?.slots.len(),
            };
            augment::random_sampling_augment(&pool, n, per_client, seed)
        }
    }
    .map_err(anyhow::Error::from)?;
    write_json(out, &entries(&results))?;
    let short: usize = results.iter().map(|r| r.shortfall).sum();
    if short > 0 {
        eprintln!("warning: {short} records short across clients");
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_metrics(
    domain: &Path,
    universe: &Path,
    plan: &Path,
    augsets: &Path,
    xi: usize,
    selection: Option<&Path>,
    icacs_k: usize,
    seed: u64,
    similarity: SimilarityMode,
    out: &Path,
) -> Outcome {
    let domain = read_store(domain)?;
    let universe = read_store(universe)?.merge(&domain).map_err(anyhow::Error::from)?;
    let plan: PartitionPlan = read_json(plan)?;
    let augmented: Vec<Vec<u64>> = match read_json(augsets)? {
        AugsetsFile::Entries(e) => e.into_iter().map(|e| e.ids).collect(),
        AugsetsFile::Ids(ids) => ids,
    };
    if augmented.len() != plan.clients.len() {
        return Err(anyhow!(
            "{} augmented sets for {} clients in the plan",
            augmented.len(),
            plan.clients.len()
        )
        .into());
    }
    let passes = match selection {
        Some(p) => read_json::<CenterSelection>(p)?.passes,
        None => 0,
    };
    let clients: Vec<ClientData> = plan
        .clients
        .iter()
        .zip(augmented)
        .map(|(l, a)| ClientData { local: l.clone(), augmented: a })
        .collect();
    let report = metrics::report(&ReportInputs {
        domain_ref: &domain,
        universe: &universe,
        clients: &clients,
        centers_per_client: &vec![xi; clients.len()],
        icacs_k,
        seed,
        convergence_passes: passes,
        mode: similarity,
    })
    .map_err(anyhow::Error::from)?;
    write_json(out, &report)?;
    println!("{}", serde_json::to_string(&report).map_err(anyhow::Error::from)?);
    Ok(())
}

fn cmd_run(config: Option<&Path>, out: &Path) -> Outcome {
    let cfg = load_config(config)?;
    let (log, dir) = fedsim::run_experiment(&cfg, out).map_err(anyhow::Error::from)?;
    println!("{}", dir.display());
    eprintln!(
        "coverage {:.6} ruai {:.4} messages {}",
        log.metrics.domain_coverage.value,
        log.metrics.ruai,
        log.messages.len()
    );
    Ok(())
}

fn cmd_table(config: Option<&Path>, betas: Option<&[f64]>, strategies: &[Strategy], out: &Path) -> Outcome {
    if strategies.is_empty() {
        return Err(Failure::Usage("no strategies given".into()));
    }
    let cfg = load_config(config)?;
    let data = ExperimentData::load(&cfg).map_err(anyhow::Error::from)?;
    let rows = match betas {
        Some(b) => fedsim::heterogeneity_sweep(&cfg, &data, b, strategies),
        None => {
            let configs: Vec<ExperimentConfig> = strategies
                .iter()
                .map(|&strategy| ExperimentConfig { strategy, ..cfg.clone() })
                .collect();
            fedsim::compare_strategies(&configs, &data)
        }
    }
    .map_err(anyhow::Error::from)?;
    write_text(out, &fedsim::to_csv(&rows))?;
    Ok(())
}

fn cmd_oracle(kind: &OracleKind) -> Outcome {
    let (problem, common) = match kind {
        OracleKind::Brute { problem, common, .. } | OracleKind::Beam { problem, common, .. } => (problem, common),
    };
    let p = build_problem(problem)?;
    let (name, sel, widths) = match kind {
        OracleKind::Brute { budget, .. } => {
            ("brute", selection::brute_force_select(&p, *budget).map_err(selection_failure)?, Vec::new())
        }
        OracleKind::Beam { widths, .. } => {
            if widths.is_empty() {
                return Err(Failure::Usage("--widths needs at least one width".into()));
            }
            let mut sorted = widths.clone();
            sorted.sort_unstable();
            let mut results = Vec::new();
            let mut widest = None;
            for &w in &sorted {
                let sel = selection::beam_select(&p, w).map_err(selection_failure)?;
                results.push(WidthResult { width: w, coverage: sel.coverage });
                widest = Some(sel);
            }
            ("beam", widest.expect("at least one width"), results)
        }
    };
    let oracle_coverage = match name {
        "beam" => widths.iter().map(|w| w.coverage).fold(f64::NEG_INFINITY, f64::max),
        _ => sel.coverage,
    };
    write_json(&common.out, &sel)?;
    let greedy_coverage = match &common.greedy {
        Some(path) => {
            let g: CenterSelection = read_json(path)?;
            Some(selection::score_selection(&p, &g).map_err(selection_failure)?)
        }
        None => None,
    };
    let report = OracleReport {
        oracle: name,
        oracle_coverage,
        widths,
        greedy_coverage,
        ratio_pct: greedy_coverage.map(|g| 100.0 * g / oracle_coverage),
    };
    if let Some(path) = &common.report {
        write_json(path, &report)?;
    }
    println!("{}", serde_json::to_string(&report).map_err(anyhow::Error::from)?);
    Ok(())
}

fn cmd_selfcheck(seed: u64, instances: usize, corrupt: Option<CorruptArg>, out: Option<&Path>) -> Outcome {
    if instances == 0 {
        return Err(Failure::Usage("--instances must be at least 1".into()));
    }
    let report = selfcheck::run(&SelfcheckOptions {
        seed,
        instances,
        corruption: corrupt.map(|CorruptArg::Submodularity| Corruption::GrowingGain),
    });
    for p in &report.properties {
        let status = if p.passed { "PASS" } else { "FAIL" };
        println!("{status} {} ({} checks, {} ms)", p.name, p.checked, p.elapsed_ms);
        if let Some(d) = &p.detail {
            println!("     first failure: {d}");
        }
    }
    if report.over_budget {
        eprintln!(
            "warning: suite took {:.1} s, over the {:.0} s budget",
            report.elapsed_secs,
            selfcheck::RUNTIME_BUDGET_SECS
        );
    }
    if let Some(path) = out {
        write_json(path, &report)?;
    }
    if report.all_passed() {
        Ok(())
    } else {
        let failed: Vec<&str> = report.properties.iter().filter(|p| !p.passed).map(|p| p.name).collect();
        Err(anyhow!("failed properties: {}", failed.join(", ")).into())
    }
}

fn cmd_synth(config: Option<&Path>, seed: Option<u64>, out_dir: &Path) -> Outcome {
    let cfg = load_config(config)?;
    let mut sc = cfg.synthetic.clone();
    if let Some(s) = seed {
        sc.seed = s;
    }
    let data = synth::planted(&sc);
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    embed_store::write_binary(&data.domain, &out_dir.join("domain.fdca")).map_err(anyhow::Error::from)?;
    embed_store::write_binary(&data.pool, &out_dir.join("pool.fdca")).map_err(anyhow::Error::from)?;
    write_json(&out_dir.join("labels.json"), &data.domain_labels)?;
    println!("domain {} records, pool {} records", data.domain.len(), data.pool.len());
    Ok(())
}

fn dispatch(cmd: &Command) -> Outcome {
    match cmd {
        Command::Ingest { input, out, dim } => {
            let store = embed_store::ingest_jsonl(input, *dim).map_err(anyhow::Error::from)?;
            embed_store::write_binary(&store, out).map_err(anyhow::Error::from)?;
            println!("{} records", store.len());
            Ok(())
        }
        Command::Export { input, out } => {
            read_store(input)?.write_jsonl(out).map_err(anyhow::Error::from)?;
            Ok(())
        }
        Command::Cluster { input, k, seed, max_iters, out } => cmd_cluster(input, *k, *seed, *max_iters, out),
        Command::Partition { input, mode, beta, clients, per_client, label_clusters, seed, out, client_stores } => {
            cmd_partition(input, *mode, *beta, *clients, *per_client, *label_clusters, *seed, out, client_stores.as_deref())
        }
        Command::Select { problem, mode, width, budget, greedy, out } => {
            cmd_select(problem, *mode, *width, *budget, greedy, out)
        }
        Command::Augment {
            pool,
            strategy,
            selection,
            centers,
            clients,
            per_client,
            alpha,
            no_threshold,
            seed,
            out,
        } => {
            let alpha = (!no_threshold).then_some(*alpha);
            cmd_augment(pool, *strategy, selection.as_deref(), centers, *clients, *per_client, alpha, *seed, out)
        }
        Command::Metrics { domain, universe, plan, augsets, xi, selection, icacs_k, seed, similarity, out } => cmd_metrics(
            domain,
            universe,
            plan,
            augsets,
            *xi,
            selection.as_deref(),
            *icacs_k,
            *seed,
            (*similarity).into(),
            out,
        ),
        Command::Run { config, out } => cmd_run(config.as_deref(), out),
        Command::Sweep { config, betas, strategies, out } => cmd_table(config.as_deref(), Some(betas), strategies, out),
        Command::Compare { config, strategies, out } => cmd_table(config.as_deref(), None, strategies, out),
        Command::Oracle { kind } => cmd_oracle(kind),
        Command::Selfcheck { seed, instances, corrupt, out } => cmd_selfcheck(*seed, *instances, *corrupt, out.as_deref()),
        Command::Synth { config, seed, out_dir } => cmd_synth(config.as_deref(), *seed, out_dir),
        Command::Config { out } => {
            write_json(out, &ExperimentConfig::default())?;
            Ok(())
        }
    }
}

fn init_threads(threads: Option<usize>) -> Outcome {
    if let Some(n) = threads {
        if n == 0 {
            return Err(Failure::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Data(anyhow!("thread pool: {e}")))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match init_threads(cli.threads).and_then(|()| dispatch(&cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Usage(m) => eprintln!("error: {m}"),
                Failure::Budget(m) => eprintln!("refused: {m}"),
                Failure::Data(e) => eprintln!("error: {e:#}"),
            }
            ExitCode::from(f.code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn budget_refusals_map_to_exit_three() {
        let f = selection_failure(SelectionError::BudgetExceeded { combinations: 10, budget: 1 });
        assert_eq!(f.code(), 3);
        assert_eq!(Failure::Usage(String::new()).code(), 1);
        assert_eq!(Failure::Data(anyhow!("x")).code(), 2);
    }

    #[test]
    fn bare_id_lists_are_accepted_as_augsets() {
        let parsed: AugsetsFile = serde_json::from_str("[[1,2],[3]]").unwrap();
        assert!(matches!(parsed, AugsetsFile::Ids(v) if v == vec![vec![1, 2], vec![3]]));
        let parsed: AugsetsFile =
            serde_json::from_str(r#"[{"client":0,"ids":[4],"sims":[0.5],"shortfall":0}]"#).unwrap();
        assert!(matches!(parsed, AugsetsFile::Entries(e) if e[0].ids == vec![4]));
    }
}
