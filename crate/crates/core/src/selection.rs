//! Server-side client center selection.
//!
//! Each of the `N` clients uploads candidate centers; their union is `C_all`. The server
//! picks `N` centers maximizing coverage of a reference set (by default `C_all` itself)
//! with a coordinate-ascent swap search: for each slot in turn, try every other candidate
//! in that slot and keep the best strict improvement. Runs end after a full sweep over
//! all slots accepts no swap.
//!
//! [`brute_force_select`] and [`beam_select`] are the exact and near-exact oracles used to
//! measure how far the swap search is from optimal.
//!
//! Candidates are indexed in `(client, cluster)` lexicographic order; every tie in this
//! module resolves to the lowest index or the lexicographically smallest index set.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::CandidateCenters;
use crate::geometry::{compensated_sum, CoverageValue, GeometryError, SimilarityMatrix, SimilarityMode};

/// Minimum coverage improvement for a swap to be accepted.
pub const IMPROVEMENT_EPS: f64 = 1e-12;
/// Default evaluation budget for exhaustive search.
pub const DEFAULT_BRUTE_BUDGET: u64 = 10_000_000;

const PAR_THRESHOLD: usize = 1 << 14;

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error("invalid selection problem: {0}")]
    InvalidProblem(String),
    #[error("exhaustive search needs {combinations} evaluations, budget is {budget}")]
    BudgetExceeded { combinations: u128, budget: u64 },
    #[error("beam width must be at least 1")]
    ZeroWidth,
    #[error("widths list is empty")]
    NoWidths,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// What the coverage objective is measured against.
#[derive(Debug, Clone, PartialEq)]
pub enum SelectionReference {
    /// The union of all uploaded candidates.
    Candidates,
    /// An explicit reference set, e.g. an in-domain store.
    Vectors(Vec<Vec<f32>>),
}

#[derive(Debug, Clone)]
pub struct SelectionProblem {
    pub candidates: Vec<CandidateCenters>,
    pub reference: SelectionReference,
    pub mode: SimilarityMode,
}

/// One candidate's position in `C_all`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct CandidateRef {
    /// Position of the owning client in the problem.
    pub client: usize,
    pub cluster: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Slot {
    pub client: usize,
    pub cluster: usize,
    pub vector: Vec<f32>,
}

/// The selected center set with provenance and search statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CenterSelection {
    pub slots: Vec<Slot>,
    pub coverage: f64,
    pub reference_size: usize,
    /// Full sweeps over all slots.
    pub passes: usize,
    pub swaps: usize,
    /// Individual slot evaluations.
    #[serde(default)]
    pub slot_visits: usize,
    /// Coverage after each accepted swap.
    #[serde(default)]
    pub trace: Vec<f64>,
}

impl CenterSelection {
    pub fn coverage_value(&self) -> CoverageValue {
        CoverageValue {
            value: self.coverage,
            reference_size: self.reference_size,
        }
    }

    pub fn vectors(&self) -> Vec<&[f32]> {
        self.slots.iter().map(|s| s.vector.as_slice()).collect()
    }

    /// Slot keys sorted, for set comparisons.
    pub fn key_set(&self) -> Vec<(usize, usize)> {
        let mut k: Vec<_> = self.slots.iter().map(|s| (s.client, s.cluster)).collect();
        k.sort_unstable();
        k
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Initialization {
    /// Each client's first center.
    #[default]
    LowestIndex,
    /// Each client's center drawn uniformly with the configured seed.
    Seeded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// Stop after a full sweep of all slots accepts no swap.
    #[default]
    FullPass,
    /// Stop as soon as one slot yields no improvement; the slot pointer only advances
    /// after an accepted swap.
    FirstStall,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GreedyConfig {
    pub seed: u64,
    pub init: Initialization,
    pub termination: Termination,
    /// Restrict slot `i` to client `i`'s own candidates.
    pub per_client_slots: bool,
}

/// Problem with its similarity table precomputed.
struct Prepared<'a> {
    problem: &'a SelectionProblem,
    refs: Vec<CandidateRef>,
    client_start: Vec<usize>,
    matrix: SimilarityMatrix,
}

impl SelectionProblem {
    pub fn new(
        candidates: Vec<CandidateCenters>,
        reference: SelectionReference,
        mode: SimilarityMode,
    ) -> Result<Self, SelectionError> {
        let p = Self {
            candidates,
            reference,
            mode,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), SelectionError> {
        let invalid = |m: String| Err(SelectionError::InvalidProblem(m));
        if self.candidates.is_empty() {
            return invalid("at least one client is required".into());
        }
        let dim = match self.candidates[0].dim() {
            Some(d) => d,
            None => return invalid("client 0 contributes no candidates".into()),
        };
        let mut ids: Vec<usize> = self.candidates.iter().map(|c| c.client_id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return invalid("client ids must be unique".into());
        }
        for (i, c) in self.candidates.iter().enumerate() {
            if c.is_empty() {
                return invalid(format!("client {i} contributes no candidates"));
            }
            if let Some(v) = c.centers.iter().find(|v| v.len() != dim) {
                return invalid(format!(
                    "client {i} has a center of dimension {}, expected {dim}",
                    v.len()
                ));
            }
        }
        if let SelectionReference::Vectors(v) = &self.reference {
            if v.is_empty() {
                return invalid("reference set is empty".into());
            }
            if let Some(x) = v.iter().find(|x| x.len() != dim) {
                return invalid(format!(
                    "reference vector of dimension {}, expected {dim}",
                    x.len()
                ));
            }
        }
        Ok(())
    }

    pub fn n_slots(&self) -> usize {
        self.candidates.len()
    }

    pub fn n_candidates(&self) -> usize {
        self.candidates.iter().map(CandidateCenters::len).sum()
    }

    /// All candidates in index order.
    pub fn candidate_refs(&self) -> Vec<CandidateRef> {
        self.candidates
            .iter()
            .enumerate()
            .flat_map(|(client, c)| (0..c.len()).map(move |cluster| CandidateRef { client, cluster }))
            .collect()
    }

    pub fn candidate_vector(&self, r: CandidateRef) -> &[f32] {
        &self.candidates[r.client].centers[r.cluster]
    }

    /// Reference vectors the objective is scored against.
    pub fn reference_vectors(&self) -> Vec<&[f32]> {
        match &self.reference {
            SelectionReference::Candidates => self
                .candidates
                .iter()
                .flat_map(|c| c.centers.iter().map(Vec::as_slice))
                .collect(),
            SelectionReference::Vectors(v) => v.iter().map(Vec::as_slice).collect(),
        }
    }

    pub fn with_reference(&self, reference: SelectionReference) -> Self {
        Self {
            candidates: self.candidates.clone(),
            reference,
            mode: self.mode,
        }
    }

    /// Index of `(client position, cluster)` in `C_all`.
    pub fn flat_index(&self, client: usize, cluster: usize) -> Option<usize> {
        let c = self.candidates.get(client)?;
        if cluster >= c.len() {
            return None;
        }
        Some(self.candidates[..client].iter().map(CandidateCenters::len).sum::<usize>() + cluster)
    }

    fn position_of_client_id(&self, id: usize) -> Option<usize> {
        self.candidates.iter().position(|c| c.client_id == id)
    }

    fn prepare(&self) -> Result<Prepared<'_>, SelectionError> {
        self.validate()?;
        let refs = self.candidate_refs();
        let mut client_start = Vec::with_capacity(self.candidates.len() + 1);
        let mut acc = 0;
        for c in &self.candidates {
            client_start.push(acc);
            acc += c.len();
        }
        client_start.push(acc);
        let cand: Vec<&[f32]> = refs.iter().map(|&r| self.candidate_vector(r)).collect();
        let matrix = SimilarityMatrix::build(&self.reference_vectors(), &cand, self.mode)?;
        Ok(Prepared {
            problem: self,
            refs,
            client_start,
            matrix,
        })
    }
}

fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = match acc.checked_mul((n - i) as u128) {
            Some(v) => v / (i as u128 + 1),
            None => return u128::MAX,
        };
    }
    acc
}

/// Number of `k`-subsets of `n` items, saturating at `u128::MAX`.
pub fn combinations(n: usize, k: usize) -> u128 {
    binomial(n, k)
}

impl Prepared<'_> {
    fn n_ref(&self) -> usize {
        self.matrix.n_reference()
    }

    fn finish(&self, indices: &[usize], passes: usize, swaps: usize, visits: usize, trace: Vec<f64>) -> CenterSelection {
        let slots = indices
            .iter()
            .map(|&i| {
                let r = self.refs[i];
                Slot {
                    client: self.problem.candidates[r.client].client_id,
                    cluster: r.cluster,
                    vector: self.problem.candidate_vector(r).to_vec(),
                }
            })
            .collect();
        CenterSelection {
            slots,
            coverage: self.matrix.coverage_of(indices),
            reference_size: self.n_ref(),
            passes,
            swaps,
            slot_visits: visits,
            trace,
        }
    }

    /// Best replacement for `slot`: `(candidate, facility value)`, ties to lowest index.
    fn best_replacement(&self, sel: &[usize], slot: usize, per_client: bool) -> (usize, f64) {
        let others: Vec<usize> = sel
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != slot)
            .map(|(_, &c)| c)
            .collect();
        let best_without = self.matrix.best_over(&others);
        let pool: Vec<usize> = if per_client {
            (self.client_start[slot]..self.client_start[slot + 1]).collect()
        } else {
            (0..self.refs.len()).collect()
        };
        let pool: Vec<usize> = pool.into_iter().filter(|q| !others.contains(q)).collect();
        let score = |&q: &usize| self.matrix.facility_with(&best_without, q);
        let values: Vec<f64> = if pool.len() * self.n_ref() >= PAR_THRESHOLD {
            pool.par_iter().map(score).collect()
        } else {
            pool.iter().map(score).collect()
        };
        let mut best = (sel[slot], f64::NEG_INFINITY);
        for (&q, &v) in pool.iter().zip(&values) {
            if v > best.1 {
                best = (q, v);
            }
        }
        best
    }
}

/// Coordinate-ascent swap search over all candidates.
pub fn greedy_select(
    problem: &SelectionProblem,
    config: &GreedyConfig,
) -> Result<CenterSelection, SelectionError> {
    let init: Vec<usize> = match config.init {
        Initialization::LowestIndex => (0..problem.n_slots())
            .map(|c| problem.flat_index(c, 0).unwrap())
            .collect(),
        Initialization::Seeded => {
            use rand::Rng;
            let mut rng = crate::seed::rng(config.seed, "greedy-init", 0);
            problem
                .candidates
                .iter()
                .enumerate()
                .map(|(c, cc)| problem.flat_index(c, rng.random_range(0..cc.len())).unwrap())
                .collect()
        }
    };
    run_greedy(problem, init, config)
}

/// Swap search starting from an explicit selection (e.g. a previous result).
pub fn greedy_select_from(
    problem: &SelectionProblem,
    start: &CenterSelection,
    config: &GreedyConfig,
) -> Result<CenterSelection, SelectionError> {
    if start.slots.len() != problem.n_slots() {
        return Err(SelectionError::InvalidProblem(format!(
            "starting selection has {} slots, problem has {}",
            start.slots.len(),
            problem.n_slots()
        )));
    }
    let mut init = Vec::with_capacity(start.slots.len());
    for s in &start.slots {
        let idx = problem
            .position_of_client_id(s.client)
            .and_then(|p| problem.flat_index(p, s.cluster))
            .ok_or_else(|| {
                SelectionError::InvalidProblem(format!(
                    "slot ({}, {}) is not a candidate",
                    s.client, s.cluster
                ))
            })?;
        if init.contains(&idx) {
            return Err(SelectionError::InvalidProblem(format!(
                "duplicate slot ({}, {})",
                s.client, s.cluster
            )));
        }
        init.push(idx);
    }
    run_greedy(problem, init, config)
}

fn run_greedy(
    problem: &SelectionProblem,
    mut sel: Vec<usize>,
    config: &GreedyConfig,
) -> Result<CenterSelection, SelectionError> {
    let prep = problem.prepare()?;
    let n = sel.len();
    let n_ref = prep.n_ref() as f64;
    let mut current = prep.matrix.facility_of(&sel) / n_ref;
    let mut trace = Vec::new();
    let (mut swaps, mut visits) = (0usize, 0usize);

    let mut try_slot = |sel: &mut Vec<usize>, i: usize, current: &mut f64| -> bool {
        let (q, g) = prep.best_replacement(sel, i, config.per_client_slots);
        let cov = g / n_ref;
        if cov > *current + IMPROVEMENT_EPS && q != sel[i] {
            sel[i] = q;
            *current = cov;
            trace.push(cov);
            true
        } else {
            false
        }
    };

    let passes = match config.termination {
        Termination::FullPass => {
            let mut passes = 0;
            loop {
                passes += 1;
                let mut accepted = false;
                for i in 0..n {
                    visits += 1;
                    if try_slot(&mut sel, i, &mut current) {
                        swaps += 1;
                        accepted = true;
                    }
                }
                if !accepted {
                    break passes;
                }
            }
        }
        Termination::FirstStall => {
            let mut i = 0;
            loop {
                visits += 1;
                if !try_slot(&mut sel, i, &mut current) {
                    break;
                }
                swaps += 1;
                i = (i + 1) % n;
            }
            visits.div_ceil(n)
        }
    };
    Ok(prep.finish(&sel, passes, swaps, visits, trace))
}

/// Exact optimum over all `N`-subsets of `C_all`, refusing when the subset count exceeds
/// `budget`. Ties go to the lexicographically smallest index set.
pub fn brute_force_select(
    problem: &SelectionProblem,
    budget: u64,
) -> Result<CenterSelection, SelectionError> {
    problem.validate()?;
    let (m, n) = (problem.n_candidates(), problem.n_slots());
    let combos = binomial(m, n);
    if combos > budget as u128 {
        return Err(SelectionError::BudgetExceeded {
            combinations: combos,
            budget,
        });
    }
    let prep = problem.prepare()?;
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut stack = Vec::with_capacity(n);
    let start = vec![f64::NEG_INFINITY; prep.n_ref()];
    enumerate(&prep.matrix, m, n, 0, &start, &mut stack, &mut best);
    let (_, set) = best.expect("at least one subset exists");
    Ok(prep.finish(&set, 0, 0, 0, Vec::new()))
}

fn enumerate(
    matrix: &SimilarityMatrix,
    m: usize,
    n: usize,
    from: usize,
    best_so_far: &[f64],
    stack: &mut Vec<usize>,
    best: &mut Option<(f64, Vec<usize>)>,
) {
    if stack.len() == n {
        let g = compensated_sum(best_so_far.iter().copied());
        if best.as_ref().is_none_or(|(b, _)| g > *b) {
            *best = Some((g, stack.clone()));
        }
        return;
    }
    let remaining = n - stack.len();
    for c in from..=m - remaining {
        let next = matrix.extend_best(best_so_far, c);
        stack.push(c);
        enumerate(matrix, m, n, c + 1, &next, stack, best);
        stack.pop();
    }
}

struct BeamState {
    set: Vec<usize>,
    best: Vec<f64>,
}

/// Beam search filling the `N` slots one at a time, keeping the top `width` partial
/// sets (as unordered sets) at each depth.
pub fn beam_select(problem: &SelectionProblem, width: usize) -> Result<CenterSelection, SelectionError> {
    if width == 0 {
        return Err(SelectionError::ZeroWidth);
    }
    let prep = problem.prepare()?;
    let m = prep.refs.len();
    let mut beam = vec![BeamState {
        set: Vec::new(),
        best: vec![f64::NEG_INFINITY; prep.n_ref()],
    }];
    for _ in 0..problem.n_slots() {
        let expansions: Vec<(usize, usize)> = beam
            .iter()
            .enumerate()
            .flat_map(|(s, st)| (0..m).filter(|c| !st.set.contains(c)).map(move |c| (s, c)))
            .collect();
        let score = |&(s, c): &(usize, usize)| {
            let st = &beam[s];
            let mut set = st.set.clone();
            let pos = set.partition_point(|&x| x < c);
            set.insert(pos, c);
            (prep.matrix.facility_with(&st.best, c), set, s, c)
        };
        let mut children: Vec<(f64, Vec<usize>, usize, usize)> =
            if expansions.len() * prep.n_ref() >= PAR_THRESHOLD {
                expansions.par_iter().map(score).collect()
            } else {
                expansions.iter().map(score).collect()
            };
        children.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
        children.dedup_by(|a, b| a.1 == b.1);
        children.truncate(width);
        beam = children
            .into_iter()
            .map(|(_, set, s, c)| BeamState {
                best: prep.matrix.extend_best(&beam[s].best, c),
                set,
            })
            .collect();
    }
    Ok(prep.finish(&beam[0].set, 0, 0, 0, Vec::new()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamEntry {
    pub width: usize,
    pub coverage: f64,
}

/// Greedy coverage relative to the strongest search that fits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApproximationReport {
    pub greedy_coverage: f64,
    pub greedy_passes: usize,
    pub beams: Vec<BeamEntry>,
    pub best_beam_coverage: f64,
    /// `100 * greedy / best beam`.
    pub ratio_pct: f64,
    pub optimum_coverage: Option<f64>,
    pub ratio_to_optimum_pct: Option<f64>,
    pub greedy: CenterSelection,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ReportOptions {
    pub greedy: GreedyConfig,
    /// Select with `C_all` as reference, then score on the problem's reference.
    pub greedy_on_candidates: bool,
    /// Also run exhaustive search when the subset count fits this budget.
    pub brute_budget: Option<u64>,
}

/// Score a selection's slots against the problem's reference set.
pub fn score_selection(problem: &SelectionProblem, selection: &CenterSelection) -> Result<f64, SelectionError> {
    let reference = problem.reference_vectors();
    Ok(crate::geometry::coverage(&reference, &selection.vectors(), problem.mode)?.value)
}

pub fn approximation_report(
    problem: &SelectionProblem,
    widths: &[usize],
    options: &ReportOptions,
) -> Result<ApproximationReport, SelectionError> {
    if widths.is_empty() {
        return Err(SelectionError::NoWidths);
    }
    let greedy = if options.greedy_on_candidates {
        greedy_select(&problem.with_reference(SelectionReference::Candidates), &options.greedy)?
    } else {
        greedy_select(problem, &options.greedy)?
    };
    let greedy_coverage = score_selection(problem, &greedy)?;
    let mut beams = Vec::with_capacity(widths.len());
    for &w in widths {
        let sel = beam_select(problem, w)?;
        beams.push(BeamEntry {
            width: w,
            coverage: sel.coverage,
        });
    }
    let best_beam_coverage = beams
        .iter()
        .map(|b| b.coverage)
        .fold(f64::NEG_INFINITY, f64::max);
    let optimum_coverage = match options.brute_budget {
        Some(budget) => match brute_force_select(problem, budget) {
            Ok(sel) => Some(sel.coverage),
            Err(SelectionError::BudgetExceeded { .. }) => None,
            Err(e) => return Err(e),
        },
        None => None,
    };
    Ok(ApproximationReport {
        greedy_coverage,
        greedy_passes: greedy.passes,
        ratio_pct: 100.0 * greedy_coverage / best_beam_coverage,
        ratio_to_optimum_pct: optimum_coverage.map(|o| 100.0 * greedy_coverage / o),
        optimum_coverage,
        best_beam_coverage,
        beams,
        greedy,
    })
}
