//! Acceptance criteria 1-10. Every test writes one `PASS`/`FAIL` line straight to stdout,
//! bypassing the harness's output capture, so the verdicts show up in a plain
//! `cargo test` run.

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use fedca_core::augment::retrieve_topk;
use fedca_core::clustering::CandidateCenters;
use fedca_core::embed_store::{normalize, EmbeddingStore, InstructionRecord};
use fedca_core::fedsim::{self, ExperimentData, MessageKind};
use fedca_core::geometry::{coverage, facility_value, marginal_gain};
use fedca_core::metrics::{comm_cost, icacs, ruai};
use fedca_core::selection::{beam_select, brute_force_select, combinations, greedy_select, GreedyConfig};
use fedca_core::synth::{self, SynthConfig};
use fedca_core::{ExperimentConfig, SelectionProblem, SelectionReference, SimilarityMode, Strategy};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(n: u32, title: &str, pass: bool, detail: String) {
    let line = format!(
        "acceptance criterion {n:>2} [{title}]: {} ({detail})\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
    assert!(pass, "criterion {n} failed: {detail}");
}

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f32> {
    loop {
        let mut v: Vec<f32> = (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        if normalize(&mut v) {
            return v;
        }
    }
}

fn units(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f32>> {
    (0..n).map(|_| unit(rng, d)).collect()
}

fn dot64(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

/// Mean over `r` of the best similarity to `s`, with an optional affine shift.
fn oracle_value(r: &[Vec<f32>], s: &[&[f32]], affine: bool) -> f64 {
    let mut total = 0.0;
    for x in r {
        let mut best = f64::NEG_INFINITY;
        for y in s {
            let mut sim = dot64(x, y);
            if affine {
                sim = (sim + 1.0) / 2.0;
            }
            if sim > best {
                best = sim;
            }
        }
        total += best;
    }
    total
}

/// Optimum over all `n`-subsets of the candidates by plain recursion.
fn oracle_optimum(cands: &[Vec<f32>], n: usize) -> f64 {
    fn go(c: &[Vec<f32>], n: usize, from: usize, set: &mut Vec<usize>, best: &mut f64) {
        if set.len() == n {
            let s: Vec<&[f32]> = set.iter().map(|&i| c[i].as_slice()).collect();
            *best = best.max(oracle_value(c, &s, false) / c.len() as f64);
            return;
        }
        for i in from..c.len() {
            set.push(i);
            go(c, n, i + 1, set, best);
            set.pop();
        }
    }
    let mut best = f64::NEG_INFINITY;
    go(cands, n, 0, &mut Vec::new(), &mut best);
    best
}

fn random_problem(seed: u64) -> SelectionProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=4);
    let xi = rng.random_range(2..=3);
    let d = rng.random_range(2..=16);
    let candidates = (0..n).map(|c| CandidateCenters::from_centers(c, units(&mut rng, xi, d))).collect();
    SelectionProblem::new(candidates, SelectionReference::Candidates, SimilarityMode::RawCosine).unwrap()
}

/// One-sided sign test: probability of at least `k` successes in `n` fair coin flips.
fn sign_test_p(k: usize, n: usize) -> f64 {
    let mut p = 0.0;
    for i in k..=n {
        let mut c = 1.0f64;
        for j in 0..i {
            c = c * (n - j) as f64 / (j + 1) as f64;
        }
        p += c * 0.5f64.powi(n as i32);
    }
    p
}

#[test]
fn criterion_01_coverage_exactness() {
    let t = Instant::now();
    let mut worst = 0.0f64;
    for i in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1_000 + i);
        let d = rng.random_range(1..=16);
        let (n1, n2) = (rng.random_range(1..=50), rng.random_range(1..=50));
        let s1 = units(&mut rng, n1, d);
        let s2 = units(&mut rng, n2, d);
        let got = coverage(&s1, &s2, SimilarityMode::RawCosine).unwrap().value;
        let s2r: Vec<&[f32]> = s2.iter().map(Vec::as_slice).collect();
        let want = oracle_value(&s1, &s2r, false) / n1 as f64;
        worst = worst.max((got - want).abs());
    }
    let secs = t.elapsed().as_secs_f64();
    verdict(
        1,
        "coverage exactness",
        worst <= 1e-9 && secs < 5.0,
        format!("1000 instances, max |error| {worst:.2e}, {secs:.2} s"),
    );
}

#[test]
fn criterion_02_submodularity_and_monotonicity() {
    let t = Instant::now();
    let mode = SimilarityMode::AffineShifted;
    let (mut sub_fail, mut mono_fail) = (0, 0);
    for i in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(2_000 + i);
        let d = rng.random_range(2..=16);
        let nr = rng.random_range(1..=40);
        let nb = rng.random_range(1..=15);
        let r = units(&mut rng, nr, d);
        let b = units(&mut rng, nb, d);
        let a = &b[..rng.random_range(0..nb)];
        let x = unit(&mut rng, d);
        let ga = marginal_gain(&r, a, &x, mode).unwrap();
        let gb = marginal_gain(&r, &b, &x, mode).unwrap();
        if ga < gb - 1e-9 {
            sub_fail += 1;
        }
        let mut bx = b.clone();
        bx.push(x);
        if facility_value(&r, &bx, mode).unwrap() < facility_value(&r, &b, mode).unwrap() {
            mono_fail += 1;
        }
    }
    let secs = t.elapsed().as_secs_f64();
    verdict(
        2,
        "submodularity and monotonicity",
        sub_fail == 0 && mono_fail == 0 && secs < 10.0,
        format!("1000 triples, {sub_fail} gain violations, {mono_fail} monotonicity violations, {secs:.2} s"),
    );
}

#[test]
fn criteria_03_and_05_greedy_near_optimality_and_convergence() {
    let t = Instant::now();
    let bound = 1.0 - (-1.0f64).exp();
    let (mut below_bound, mut near, mut oracle_mismatch) = (0, 0, 0);
    let mut min_ratio = f64::INFINITY;
    let mut passes_ok = true;
    let mut normalized_passes = Vec::new();
    for i in 0..200u64 {
        let p = random_problem(3_000 + i);
        let cands: Vec<Vec<f32>> = p.candidates.iter().flat_map(|c| c.centers.clone()).collect();
        let opt = oracle_optimum(&cands, p.n_slots());
        if (brute_force_select(&p, u64::MAX).unwrap().coverage - opt).abs() > 1e-9 {
            oracle_mismatch += 1;
        }
        let g = greedy_select(&p, &GreedyConfig::default()).unwrap();
        let ratio = g.coverage / opt;
        min_ratio = min_ratio.min(ratio);
        if g.coverage < bound * opt - 1e-12 {
            below_bound += 1;
        }
        if g.coverage >= 0.90 * opt {
            near += 1;
        }
        let n = p.n_slots();
        passes_ok &= g.passes <= 3 * n;
        normalized_passes.push(g.passes as f64 / n as f64);
    }
    let secs = t.elapsed().as_secs_f64();
    normalized_passes.sort_by(f64::total_cmp);
    let median = (normalized_passes[99] + normalized_passes[100]) / 2.0;
    let max_passes = normalized_passes[199];
    let c5 = passes_ok && median <= 2.0;
    let near_pct = 100.0 * near as f64 / 200.0;
    let c3 = below_bound == 0 && near_pct >= 95.0 && oracle_mismatch == 0 && secs < 60.0;
    // Print both verdicts before asserting either.
    let line5 = format!("max passes {max_passes:.2}N, median {median:.2}N over the 200 instances");
    let r3 = std::panic::catch_unwind(|| {
        verdict(
            3,
            "greedy near-optimality",
            c3,
            format!(
                "200 instances, min ratio {min_ratio:.4}, {below_bound} below 1-1/e, {near_pct:.1}% >= 0.90, \
                 brute force vs independent enumeration mismatches {oracle_mismatch}, {secs:.2} s"
            ),
        )
    });
    verdict(5, "convergence boundedness", c5, line5);
    if let Err(e) = r3 {
        std::panic::resume_unwind(e);
    }
}

#[test]
fn criterion_04_beam_equals_brute_force() {
    let t = Instant::now();
    let mut mismatches = 0;
    for i in 0..50u64 {
        let p = random_problem(4_000 + i);
        let width = combinations(p.n_candidates(), p.n_slots()) as usize;
        let beam = beam_select(&p, width).unwrap();
        let brute = brute_force_select(&p, u64::MAX).unwrap();
        if beam.coverage != brute.coverage || beam.key_set() != brute.key_set() {
            mismatches += 1;
        }
    }
    let secs = t.elapsed().as_secs_f64();
    verdict(
        4,
        "beam equals brute force",
        mismatches == 0 && secs < 30.0,
        format!("50 instances with width C(|C_all|, N), {mismatches} mismatches, {secs:.2} s"),
    );
}

#[test]
fn criterion_06_retrieval_exactness_and_threshold() {
    let mut rng = ChaCha8Rng::seed_from_u64(6_000);
    let d = 16;
    let records: Vec<InstructionRecord> = (0..2_000u64)
        .map(|id| InstructionRecord { id, domain: "pool".into(), embedding: unit(&mut rng, d), text: None })
        .collect();
    let pool = EmbeddingStore::from_records(d, records).unwrap();
    let (mut mismatches, mut above) = (0, 0);
    for q in 0..500 {
        let query = if q % 5 == 0 {
            // queries sitting on pool records produce similarities above the ceiling
            pool.records()[q].embedding.clone()
        } else {
            unit(&mut rng, d)
        };
        let k = rng.random_range(1..=60);
        let alpha = if q % 2 == 0 { Some(0.7) } else { None };
        let got = retrieve_topk(&pool, &query, k, alpha).unwrap();
        let mut all: Vec<(f64, u64)> = pool.records().iter().map(|r| (dot64(&r.embedding, &query), r.id)).collect();
        all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let want: Vec<u64> = all
            .into_iter()
            .filter(|(s, _)| alpha.is_none_or(|a| *s <= a))
            .take(k)
            .map(|(_, id)| id)
            .collect();
        if got.ids() != want {
            mismatches += 1;
        }
        if alpha.is_some() {
            above += got.hits.iter().filter(|h| h.similarity > 0.7 + 1e-7).count();
        }
    }
    verdict(
        6,
        "retrieval exactness and threshold",
        mismatches == 0 && above == 0,
        format!("500 queries, {mismatches} mismatches with full sort, {above} hits above 0.7 at alpha = 0.7"),
    );
}

#[test]
fn criterion_07_strategy_ordering_on_planted_data() {
    let t = Instant::now();
    let mut ordered = 0;
    let mut margins = Vec::new();
    for seed in 0..10u64 {
        let cfg = ExperimentConfig {
            seed,
            synthetic: SynthConfig { seed, ..SynthConfig::default() },
            ..ExperimentConfig::default()
        };
        let sd = synth::planted(&cfg.synthetic);
        let plan = synth::skewed_plan(&sd, cfg.n_clients, cfg.per_client_local, 3, seed);
        let data = ExperimentData::new(sd.domain, sd.pool).unwrap();
        let prep = fedsim::prepare_with_plan(&cfg, &data, plan).unwrap();
        let rows = fedsim::compare_prepared(&cfg, &data, &prep, &[Strategy::Feddca, Strategy::Direct, Strategy::Random]).unwrap();
        let (f, d, r) = (rows[0].domain_coverage, rows[1].domain_coverage, rows[2].domain_coverage);
        if f > d && d > r {
            ordered += 1;
        }
        margins.push((f - d, d - r));
    }
    let min_fd = margins.iter().map(|m| m.0).fold(f64::INFINITY, f64::min);
    let min_dr = margins.iter().map(|m| m.1).fold(f64::INFINITY, f64::min);
    verdict(
        7,
        "strategy ordering on planted data",
        ordered >= 9,
        format!(
            "FedDCA > Direct > Random on {ordered}/10 seeds, min margins {min_fd:.4} / {min_dr:.4}, {:.1} s",
            t.elapsed().as_secs_f64()
        ),
    );
}

#[test]
fn criterion_08_heterogeneity_sweep_shape() {
    let t = Instant::now();
    let betas = [0.01, 0.1, 1.0, 10.0];
    let seeds = 20usize;
    let mut direct = Vec::new();
    let mut random_ranges = Vec::new();
    for seed in 0..seeds as u64 {
        let cfg = ExperimentConfig {
            seed,
            synthetic: SynthConfig { seed, ..SynthConfig::default() },
            ..ExperimentConfig::default()
        };
        let data = ExperimentData::load(&cfg).unwrap();
        let rows = fedsim::heterogeneity_sweep(&cfg, &data, &betas, &[Strategy::Direct, Strategy::Random]).unwrap();
        let of = |s: Strategy| -> Vec<f64> {
            rows.iter().filter(|r| r.strategy == s).map(|r| r.domain_coverage).collect()
        };
        let r = of(Strategy::Random);
        let hi = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = r.iter().copied().fold(f64::INFINITY, f64::min);
        random_ranges.push(hi - lo);
        direct.push(of(Strategy::Direct));
    }
    // Non-increasing holds at a pair on a seed when coverage does not rise; the sign test
    // asks whether that happens on significantly more than half of the seeds.
    let mut pair_p = Vec::new();
    let mut pair_counts = Vec::new();
    for i in 0..betas.len() - 1 {
        let k = direct.iter().filter(|d| d[i + 1] <= d[i]).count();
        pair_counts.push(k);
        pair_p.push(sign_test_p(k, seeds));
    }
    let stable = random_ranges.iter().filter(|&&x| x < 0.01).count();
    let stable_p = sign_test_p(stable, seeds);
    let direct_ok = pair_p.iter().all(|&p| p < 0.05);
    let random_ok = stable_p < 0.05;
    let mean = |j: usize| direct.iter().map(|d| d[j]).sum::<f64>() / seeds as f64;
    let means: Vec<String> = (0..betas.len()).map(|j| format!("{:.4}", mean(j))).collect();
    let max_range = random_ranges.iter().copied().fold(0.0, f64::max);
    verdict(
        8,
        "heterogeneity sweep shape",
        direct_ok && random_ok,
        format!(
            "Direct non-increasing seeds per beta pair {pair_counts:?}/{seeds} (p {}), mean Direct coverage [{}]; \
             Random range < 0.01 on {stable}/{seeds} seeds (p {stable_p:.2e}, max range {max_range:.4}); {:.1} s",
            pair_p.iter().map(|p| format!("{p:.3}")).collect::<Vec<_>>().join(", "),
            means.join(", "),
            t.elapsed().as_secs_f64()
        ),
    );
}

#[test]
fn criterion_09_metric_hand_checks() {
    let r = ruai(&[vec![1, 2], vec![2, 3]]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let client = units(&mut rng, 40, 8);
    let view: Vec<&[f32]> = client.iter().map(Vec::as_slice).collect();
    let pair = [view.clone(), view];
    // ICACS averages every cross-client center pair, so identical clients score 1.0 when
    // each contributes one center; with ten centers the mean also includes unlike pairs.
    let same = icacs(&pair, 1, 0).unwrap().value;
    let same_k10 = icacs(&pair, 10, 0).unwrap().value;
    let upload = comm_cost(10, 10, 1024, &[]).upload_floats;
    verdict(
        9,
        "metric hand-checks",
        r == 0.75 && (same - 1.0).abs() <= 1e-6 && upload == 102_400,
        format!(
            "ruai {r}, icacs of identical clients {same:.9} at k = 1 ({same_k10:.4} at k = 10 over all 100 \
             cross pairs), upload floats {upload}"
        ),
    );
}

#[test]
fn criterion_10_end_to_end_replay() {
    let dir = tempfile::tempdir().unwrap();
    let run = |out: &Path| {
        let t = Instant::now();
        let o = Command::new(env!("CARGO_BIN_EXE_fedca"))
            .args(["run", "--out", out.to_str().unwrap()])
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let run_dir = String::from_utf8(o.stdout).unwrap();
        let log = std::fs::read_to_string(Path::new(run_dir.trim()).join(fedsim::LOG_FILE)).unwrap();
        (log, t.elapsed().as_secs_f64())
    };
    let (a, ta) = run(&dir.path().join("a"));
    let (b, tb) = run(&dir.path().join("b"));
    let (ra, rb) = (fedsim::replay_lines(&a), fedsim::replay_lines(&b));
    let identical = ra == rb;
    let messages = ra.iter().filter(|l| l.starts_with("{\"record\":\"message\"")).count();
    let kinds: Vec<usize> = [
        MessageKind::UploadCenters,
        MessageKind::SelectionDone,
        MessageKind::AugmentedSet,
        MessageKind::RoundSample,
    ]
    .iter()
    .map(|k| {
        let tag = serde_json::to_string(k).unwrap();
        ra.iter().filter(|l| l.contains(&format!("\"kind\":{tag}"))).count()
    })
    .collect();
    let cfg = ExperimentConfig::default();
    let pool = cfg.synthetic.n_clusters * cfg.synthetic.pool_per_cluster
        + cfg.synthetic.n_public_clusters * cfg.synthetic.public_per_cluster;
    verdict(
        10,
        "end-to-end replay",
        identical && messages == 51 && kinds == [10, 1, 10, 30] && ta.max(tb) < 120.0 && pool <= 50_000 && cfg.synthetic.dim == 64,
        format!(
            "logs identical {identical}, {messages} messages {kinds:?}, pool {pool} x dim {}, runs {ta:.1} s / {tb:.1} s",
            cfg.synthetic.dim
        ),
    );
}
