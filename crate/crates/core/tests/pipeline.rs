use std::fs;

use fedca_core::embed_store::write_binary;
use fedca_core::fedsim::{self, ExperimentData, MessageKind};
use fedca_core::synth::{self, SynthConfig};
use fedca_core::{ExperimentConfig, PartitionMode, Strategy};

fn small_config() -> ExperimentConfig {
    ExperimentConfig {
        n_clients: 5,
        per_client_local: 30,
        per_client_aug: 40,
        xi: 3,
        rounds: 7,
        clients_per_round: 2,
        label_clusters: 6,
        icacs_k: 3,
        synthetic: SynthConfig {
            dim: 12,
            n_clusters: 4,
            domain_per_cluster: 50,
            pool_per_cluster: 80,
            n_public_clusters: 3,
            public_per_cluster: 60,
            intrinsic_dim: 3,
            spread: 0.4,
            ..SynthConfig::default()
        },
        ..ExperimentConfig::default()
    }
}

#[test]
fn repeated_runs_write_identical_logs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config();
    let (a, run_a) = fedsim::run_experiment(&cfg, &dir.path().join("a")).unwrap();
    let (b, run_b) = fedsim::run_experiment(&cfg, &dir.path().join("b")).unwrap();
    assert_eq!(run_a.file_name(), run_b.file_name());
    let la = fs::read_to_string(run_a.join(fedsim::LOG_FILE)).unwrap();
    let lb = fs::read_to_string(run_b.join(fedsim::LOG_FILE)).unwrap();
    assert_eq!(fedsim::replay_lines(&la), fedsim::replay_lines(&lb));
    assert_eq!(a.messages, b.messages);
    assert_eq!(a.augmented, b.augmented);
    for f in ["config.json", "plan.json", "centers.json", "selection.json", "augsets.json", "metrics.json"] {
        assert_eq!(fs::read(run_a.join(f)).unwrap(), fs::read(run_b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn message_counts_and_upload_accounting() {
    let cfg = small_config();
    let data = ExperimentData::load(&cfg).unwrap();
    let log = fedsim::run_pipeline(&cfg, &data).unwrap();
    assert_eq!(log.count(MessageKind::UploadCenters), cfg.n_clients);
    assert_eq!(log.count(MessageKind::SelectionDone), 1);
    assert_eq!(log.count(MessageKind::AugmentedSet), cfg.n_clients);
    assert_eq!(log.count(MessageKind::RoundSample), cfg.rounds);
    let upload: u64 = log
        .messages
        .iter()
        .filter(|m| m.kind == MessageKind::UploadCenters)
        .map(|m| m.payload_size)
        .sum();
    let expected = (cfg.n_clients * cfg.xi * cfg.synthetic.dim) as u64;
    assert_eq!(upload, expected);
    assert_eq!(log.metrics.comm_upload_floats, expected);
}

#[test]
fn binary_inputs_resolve_relative_to_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config();
    let sd = synth::planted(&cfg.synthetic);
    write_binary(&sd.domain, &dir.path().join("domain.fdca")).unwrap();
    write_binary(&sd.pool, &dir.path().join("pool.fdca")).unwrap();
    let mut json: serde_json::Value = serde_json::to_value(&cfg).unwrap();
    json["domain_path"] = "domain.fdca".into();
    json["pool_path"] = "pool.fdca".into();
    let path = dir.path().join("exp.json");
    fs::write(&path, serde_json::to_string_pretty(&json).unwrap()).unwrap();

    let loaded = ExperimentConfig::load(&path).unwrap();
    let from_files = ExperimentData::load(&loaded).unwrap();
    let generated = ExperimentData::load(&cfg).unwrap();
    assert_eq!(from_files.domain, generated.domain);
    assert_eq!(from_files.pool, generated.pool);
    let a = fedsim::run_pipeline(&loaded, &from_files).unwrap();
    let b = fedsim::run_pipeline(&cfg, &generated).unwrap();
    assert_eq!(a.augmented, b.augmented);
    assert_eq!(a.metrics, b.metrics);
}

#[test]
fn round_sampling_is_uniform_across_rounds() {
    let (n, per, rounds) = (10usize, 2usize, 10_000usize);
    let mut counts = vec![0usize; n];
    for r in 0..rounds {
        let mut s = fedsim::round_sample(5, r, n, per);
        assert_eq!(s.len(), per);
        counts.iter_mut().enumerate().for_each(|(c, x)| *x += s.contains(&c) as usize);
        s.sort_unstable();
        s.dedup();
        assert_eq!(s.len(), per, "round {r} repeats a client");
    }
    let expected = (rounds * per) as f64 / n as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // upper 1% point of chi-squared with 9 degrees of freedom
    assert!(chi2 < 21.666, "chi2 = {chi2}, counts {counts:?}");
}

#[test]
fn changing_rounds_keeps_the_partition() {
    let cfg = small_config();
    let data = ExperimentData::load(&cfg).unwrap();
    let a = fedsim::run_pipeline(&cfg, &data).unwrap();
    let b = fedsim::run_pipeline(&ExperimentConfig { rounds: 2, ..cfg.clone() }, &data).unwrap();
    assert_eq!(a.plan, b.plan);
    assert_eq!(a.augmented, b.augmented);
}

#[test]
fn sweep_and_comparison_emit_one_row_per_cell() {
    let cfg = small_config();
    let data = ExperimentData::load(&cfg).unwrap();
    let rows = fedsim::heterogeneity_sweep(&cfg, &data, &[0.1, 10.0], &Strategy::ALL).unwrap();
    assert_eq!(rows.len(), 2 * Strategy::ALL.len());
    assert!(rows.iter().all(|r| r.mode == PartitionMode::Dirichlet));
    let csv = fedsim::to_csv(&rows);
    assert_eq!(csv.lines().count(), rows.len() + 1);
    assert_eq!(csv.lines().next().unwrap(), fedsim::CSV_HEADER);
    for r in &rows {
        assert!(r.domain_coverage > 0.0 && r.domain_coverage <= 1.0 + 1e-9);
        assert!(r.ruai > 0.0 && r.ruai <= 1.0);
    }
}
