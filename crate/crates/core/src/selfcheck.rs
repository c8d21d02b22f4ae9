//! Bundled property suite run by `fedca selfcheck`.
//!
//! Each property draws small random instances from a labeled seed and compares library
//! routines against direct recomputations: coverage against a double loop, submodularity
//! and monotonicity of the facility value, beam search against exhaustive search, the
//! greedy bound, and retrieval against a full sort.

use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::augment::retrieve_topk;
use crate::clustering::CandidateCenters;
use crate::embed_store::{normalize, EmbeddingStore, InstructionRecord};
use crate::geometry::{coverage, facility_value, marginal_gain, SimilarityMode};
use crate::selection::{
    beam_select, brute_force_select, combinations, greedy_select, GreedyConfig, SelectionProblem,
    SelectionReference,
};

/// Soft runtime budget for the whole suite, in seconds.
pub const RUNTIME_BUDGET_SECS: f64 = 60.0;

const TOL: f64 = 1e-9;

/// Deliberate defects used to confirm that the suite detects failures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Corruption {
    /// Inflate the marginal gain in proportion to the size of the selected set, which makes
    /// gains grow as the set grows.
    GrowingGain,
}

#[derive(Debug, Clone)]
pub struct SelfcheckOptions {
    pub seed: u64,
    /// Random instances per property.
    pub instances: usize,
    pub corruption: Option<Corruption>,
}

impl Default for SelfcheckOptions {
    fn default() -> Self {
        SelfcheckOptions {
            seed: 0,
            instances: 200,
            corruption: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PropertyResult {
    pub name: &'static str,
    pub passed: bool,
    pub checked: usize,
    pub failures: usize,
    /// First failing instance, when any.
    pub detail: Option<String>,
    pub elapsed_ms: u128,
}

#[derive(Debug, Clone, Serialize)]
pub struct SelfcheckReport {
    pub properties: Vec<PropertyResult>,
    pub elapsed_secs: f64,
    pub over_budget: bool,
}

impl SelfcheckReport {
    pub fn all_passed(&self) -> bool {
        self.properties.iter().all(|p| p.passed)
    }

    pub fn get(&self, name: &str) -> Option<&PropertyResult> {
        self.properties.iter().find(|p| p.name == name)
    }
}

fn unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    loop {
        let mut v: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        if normalize(&mut v) {
            return v;
        }
    }
}

fn units(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f32>> {
    (0..n).map(|_| unit(rng, dim)).collect()
}

fn problem(rng: &mut ChaCha8Rng) -> SelectionProblem {
    let n = rng.random_range(2..=4);
    let xi = rng.random_range(2..=3);
    let dim = rng.random_range(2..=8);
    let candidates = (0..n)
        .map(|c| CandidateCenters::from_centers(c, units(rng, xi, dim)))
        .collect();
    SelectionProblem::new(candidates, SelectionReference::Candidates, SimilarityMode::RawCosine)
        .expect("generated problems are valid")
}

struct Tally {
    checked: usize,
    failures: usize,
    detail: Option<String>,
}

impl Tally {
    fn new() -> Self {
        Tally { checked: 0, failures: 0, detail: None }
    }

    fn record(&mut self, ok: bool, detail: impl FnOnce() -> String) {
        self.checked += 1;
        if !ok {
            self.failures += 1;
            if self.detail.is_none() {
                self.detail = Some(detail());
            }
        }
    }
}

fn run_property(
    name: &'static str,
    opts: &SelfcheckOptions,
    body: impl Fn(&mut ChaCha8Rng, &mut Tally),
) -> PropertyResult {
    let start = Instant::now();
    let mut tally = Tally::new();
    for i in 0..opts.instances {
        let mut rng = crate::seed::rng(opts.seed, name, i as u64);
        body(&mut rng, &mut tally);
    }
    PropertyResult {
        name,
        passed: tally.failures == 0,
        checked: tally.checked,
        failures: tally.failures,
        detail: tally.detail,
        elapsed_ms: start.elapsed().as_millis(),
    }
}

fn double_loop(reference: &[Vec<f32>], covering: &[Vec<f32>]) -> f64 {
    let mut total = 0.0;
    for r in reference {
        let mut best = f64::NEG_INFINITY;
        for s in covering {
            let mut d = 0.0;
            for (a, b) in r.iter().zip(s) {
                d += *a as f64 * *b as f64;
            }
            best = best.max(d);
        }
        total += best;
    }
    total / reference.len() as f64
}

fn coverage_oracle(rng: &mut ChaCha8Rng, t: &mut Tally) {
    let dim = rng.random_range(1..=16);
    let (nr, ns) = (rng.random_range(1..=50), rng.random_range(1..=50));
    let r = units(rng, nr, dim);
    let s = units(rng, ns, dim);
    let fast = coverage(&r, &s, SimilarityMode::RawCosine).expect("valid sets").value;
    let slow = double_loop(&r, &s);
    t.record((fast - slow).abs() <= TOL, || format!("coverage {fast} vs double loop {slow}"));
}

/// A reference set, a nested pair `A ⊆ B` and one extra point.
type NestedSets = (Vec<Vec<f32>>, Vec<Vec<f32>>, Vec<Vec<f32>>, Vec<f32>);

fn nested_sets(rng: &mut ChaCha8Rng) -> NestedSets {
    let dim = rng.random_range(2..=12);
    let (nr, nb) = (rng.random_range(1..=30), rng.random_range(1..=12));
    let reference = units(rng, nr, dim);
    let b = units(rng, nb, dim);
    let a_len = rng.random_range(0..b.len());
    let a = b[..a_len].to_vec();
    let x = unit(rng, dim);
    (reference, a, b, x)
}

fn gain(
    reference: &[Vec<f32>],
    selected: &[Vec<f32>],
    x: &[f32],
    corruption: Option<Corruption>,
) -> f64 {
    let g = marginal_gain(reference, selected, x, SimilarityMode::AffineShifted).expect("valid sets");
    match corruption {
        Some(Corruption::GrowingGain) => g + 0.01 * (selected.len() * reference.len()) as f64,
        None => g,
    }
}

fn submodularity(corruption: Option<Corruption>) -> impl Fn(&mut ChaCha8Rng, &mut Tally) {
    move |rng, t| {
        let (reference, a, b, x) = nested_sets(rng);
        let ga = gain(&reference, &a, &x, corruption);
        let gb = gain(&reference, &b, &x, corruption);
        t.record(ga >= gb - TOL, || {
            format!("gain over |A|={} is {ga}, over |B|={} is {gb}", a.len(), b.len())
        });
    }
}

fn monotonicity(rng: &mut ChaCha8Rng, t: &mut Tally) {
    let (reference, _, b, x) = nested_sets(rng);
    let mode = SimilarityMode::AffineShifted;
    let before = facility_value(&reference, &b, mode).expect("valid sets");
    let mut grown = b.clone();
    grown.push(x);
    let after = facility_value(&reference, &grown, mode).expect("valid sets");
    t.record(after >= before - TOL, || format!("facility value fell from {before} to {after}"));
}

fn gain_consistency(rng: &mut ChaCha8Rng, t: &mut Tally) {
    let (reference, _, b, x) = nested_sets(rng);
    let mode = SimilarityMode::AffineShifted;
    let g = marginal_gain(&reference, &b, &x, mode).expect("valid sets");
    let mut grown = b.clone();
    grown.push(x);
    let diff = facility_value(&reference, &grown, mode).expect("valid sets")
        - facility_value(&reference, &b, mode).expect("valid sets");
    t.record((g - diff).abs() <= 1e-9 * reference.len() as f64, || {
        format!("gain {g} differs from value difference {diff}")
    });
}

fn beam_equals_brute(rng: &mut ChaCha8Rng, t: &mut Tally) {
    let p = problem(rng);
    let width = combinations(p.n_candidates(), p.n_slots()) as usize;
    let beam = beam_select(&p, width).expect("beam runs");
    let brute = brute_force_select(&p, u64::MAX).expect("brute force fits");
    t.record(beam.coverage == brute.coverage, || {
        format!("beam {} vs brute force {}", beam.coverage, brute.coverage)
    });
}

fn greedy_bound(rng: &mut ChaCha8Rng, t: &mut Tally) {
    let p = problem(rng);
    let greedy = greedy_select(&p, &GreedyConfig::default()).expect("greedy runs");
    let opt = brute_force_select(&p, u64::MAX).expect("brute force fits");
    let bound = (1.0 - (-1.0f64).exp()) * opt.coverage;
    t.record(greedy.coverage >= bound - TOL, || {
        format!("greedy {} below (1 - 1/e) x optimum {}", greedy.coverage, opt.coverage)
    });
    let n = p.n_slots();
    t.record(greedy.passes <= 3 * n, || format!("greedy took {} passes for N = {n}", greedy.passes));
}

fn retrieval_oracle(rng: &mut ChaCha8Rng, t: &mut Tally) {
    let dim = rng.random_range(2..=16);
    let n: usize = rng.random_range(1..=120);
    let records: Vec<InstructionRecord> = (0..n)
        .map(|i| InstructionRecord {
            id: i as u64,
            domain: "pool".into(),
            embedding: unit(rng, dim),
            text: None,
        })
        .collect();
    let pool = EmbeddingStore::from_records(dim, records).expect("generated records are valid");
    let q = unit(rng, dim);
    let k = rng.random_range(1..=n + 5);
    let alpha = if rng.random_bool(0.5) { Some(rng.random_range(-0.5f64..0.9)) } else { None };
    let got = retrieve_topk(&pool, &q, k, alpha).expect("valid query").ids();
    let mut all: Vec<(f64, u64)> = pool
        .records()
        .iter()
        .map(|r| (r.embedding.iter().zip(&q).map(|(a, b)| *a as f64 * *b as f64).sum(), r.id))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let want: Vec<u64> = all
        .into_iter()
        .filter(|(s, _)| alpha.is_none_or(|a| *s <= a))
        .take(k)
        .map(|(_, id)| id)
        .collect();
    t.record(got == want, || format!("retrieved {got:?}, full sort gives {want:?}"));
}

/// Run every property and time the suite.
pub fn run(opts: &SelfcheckOptions) -> SelfcheckReport {
    let start = Instant::now();
    let properties = vec![
        run_property("coverage_matches_double_loop", opts, coverage_oracle),
        run_property("submodularity", opts, submodularity(opts.corruption)),
        run_property("monotonicity", opts, monotonicity),
        run_property("gain_matches_value_difference", opts, gain_consistency),
        run_property("beam_equals_brute_force", opts, beam_equals_brute),
        run_property("greedy_within_bound", opts, greedy_bound),
        run_property("retrieval_matches_full_sort", opts, retrieval_oracle),
    ];
    let elapsed_secs = start.elapsed().as_secs_f64();
    SelfcheckReport {
        properties,
        elapsed_secs,
        over_budget: elapsed_secs > RUNTIME_BUDGET_SECS,
    }
}
