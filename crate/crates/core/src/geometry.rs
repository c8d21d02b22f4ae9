//! Similarity, coverage and facility-location arithmetic.
//!
//! Coverage of a reference set `R` by a covering set `S` is the mean over `r in R` of
//! `max_{s in S} sim(r, s)`. The unnormalized sum is the facility-location value `g`.
//! All per-reference maxima are reduced with Neumaier summation in reference order, so
//! results do not depend on how the inner scans are parallelized.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Work size (reference x covering pairs) above which scans fan out across threads.
const PAR_THRESHOLD: usize = 1 << 15;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("coverage is undefined for an empty {0} set")]
    EmptySet(&'static str),
}

/// How raw cosine similarity is mapped before taking maxima.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityMode {
    #[default]
    RawCosine,
    /// `s -> (s + 1) / 2`, which maps `[-1, 1]` onto `[0, 1]` and preserves order.
    AffineShifted,
}

impl SimilarityMode {
    #[inline]
    pub fn apply(self, raw: f64) -> f64 {
        match self {
            SimilarityMode::RawCosine => raw,
            SimilarityMode::AffineShifted => (raw + 1.0) * 0.5,
        }
    }

    /// Lowest attainable similarity; the prior maximum of a reference point covered by
    /// nothing.
    pub fn floor(self) -> f64 {
        match self {
            SimilarityMode::RawCosine => -1.0,
            SimilarityMode::AffineShifted => 0.0,
        }
    }
}

impl std::str::FromStr for SimilarityMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "raw" | "raw_cosine" => Ok(Self::RawCosine),
            "affine" | "affine_shifted" => Ok(Self::AffineShifted),
            other => Err(format!("unknown similarity mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageValue {
    pub value: f64,
    pub reference_size: usize,
}

/// Neumaier-compensated running sum.
#[derive(Debug, Default, Clone, Copy)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn total(&self) -> f64 {
        self.sum + self.comp
    }
}

impl FromIterator<f64> for CompensatedSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = CompensatedSum::default();
        for x in iter {
            s.add(x);
        }
        s
    }
}

/// Sum in iteration order with compensation.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    values.into_iter().collect::<CompensatedSum>().total()
}

/// Dot product accumulated in f64. Caller guarantees equal lengths.
///
/// Products of two f32 values are exact in f64; four interleaved accumulators keep the
/// loop vectorizable while the summation order stays fixed.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += f64::from(x[i]) * f64::from(y[i]);
        }
    }
    let mut tail = 0.0f64;
    for (x, y) in ra.iter().zip(rb) {
        tail += f64::from(*x) * f64::from(*y);
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Cosine similarity of two unit vectors (their dot product).
pub fn cosine(a: &[f32], b: &[f32]) -> Result<f64, GeometryError> {
    if a.len() != b.len() {
        return Err(GeometryError::DimensionMismatch(a.len(), b.len()));
    }
    Ok(dot(a, b))
}

fn check_dims<'a>(vectors: impl IntoIterator<Item = &'a [f32]>) -> Result<usize, GeometryError> {
    let mut dim = None;
    for v in vectors {
        match dim {
            None => dim = Some(v.len()),
            Some(e) if e != v.len() => return Err(GeometryError::DimensionMismatch(e, v.len())),
            _ => {}
        }
    }
    Ok(dim.unwrap_or(0))
}

fn both<'a, A: AsRef<[f32]>, B: AsRef<[f32]>>(
    a: &'a [A],
    b: &'a [B],
) -> impl Iterator<Item = &'a [f32]> {
    a.iter().map(AsRef::as_ref).chain(b.iter().map(AsRef::as_ref))
}

fn best_match<V: AsRef<[f32]>>(r: &[f32], covering: &[V], mode: SimilarityMode) -> f64 {
    covering
        .iter()
        .map(|s| mode.apply(dot(r, s.as_ref())))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Per-reference best similarity to the covering set, in reference order.
pub fn best_matches<R, C>(reference: &[R], covering: &[C], mode: SimilarityMode) -> Vec<f64>
where
    R: AsRef<[f32]> + Sync,
    C: AsRef<[f32]> + Sync,
{
    if reference.len() * covering.len() >= PAR_THRESHOLD {
        reference
            .par_iter()
            .map(|r| best_match(r.as_ref(), covering, mode))
            .collect()
    } else {
        reference
            .iter()
            .map(|r| best_match(r.as_ref(), covering, mode))
            .collect()
    }
}

/// Facility-location value `g(S) = sum_r max_s sim(r, s)`.
pub fn facility_value<R, C>(
    reference: &[R],
    covering: &[C],
    mode: SimilarityMode,
) -> Result<f64, GeometryError>
where
    R: AsRef<[f32]> + Sync,
    C: AsRef<[f32]> + Sync,
{
    if reference.is_empty() {
        return Err(GeometryError::EmptySet("reference"));
    }
    if covering.is_empty() {
        return Err(GeometryError::EmptySet("covering"));
    }
    check_dims(both(reference, covering))?;
    Ok(compensated_sum(best_matches(reference, covering, mode)))
}

/// Coverage `d(reference, covering)`: the facility value divided by `|reference|`.
pub fn coverage<R, C>(
    reference: &[R],
    covering: &[C],
    mode: SimilarityMode,
) -> Result<CoverageValue, GeometryError>
where
    R: AsRef<[f32]> + Sync,
    C: AsRef<[f32]> + Sync,
{
    let g = facility_value(reference, covering, mode)?;
    Ok(CoverageValue {
        value: g / reference.len() as f64,
        reference_size: reference.len(),
    })
}

/// Gain in facility value from adding `candidate` to `selected`.
///
/// With `selected` empty every reference point's prior maximum is the mode floor.
pub fn marginal_gain<R, S>(
    reference: &[R],
    selected: &[S],
    candidate: &[f32],
    mode: SimilarityMode,
) -> Result<f64, GeometryError>
where
    R: AsRef<[f32]> + Sync,
    S: AsRef<[f32]> + Sync,
{
    let dim = check_dims(both(reference, selected))?;
    if (!reference.is_empty() || !selected.is_empty()) && candidate.len() != dim {
        return Err(GeometryError::DimensionMismatch(dim, candidate.len()));
    }
    Ok(compensated_sum(reference.iter().map(|r| {
        let r = r.as_ref();
        let prior = if selected.is_empty() {
            mode.floor()
        } else {
            best_match(r, selected, mode)
        };
        (mode.apply(dot(r, candidate)) - prior).max(0.0)
    })))
}

/// Dense `reference x candidates` similarity table with the mode already applied.
///
/// Selection routines score subsets by index against this table; values are bitwise
/// identical to recomputing [`coverage`] from the vectors.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    n_ref: usize,
    n_cand: usize,
    data: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn build<R, C>(
        reference: &[R],
        candidates: &[C],
        mode: SimilarityMode,
    ) -> Result<Self, GeometryError>
    where
        R: AsRef<[f32]> + Sync,
        C: AsRef<[f32]> + Sync,
    {
        if reference.is_empty() {
            return Err(GeometryError::EmptySet("reference"));
        }
        if candidates.is_empty() {
            return Err(GeometryError::EmptySet("covering"));
        }
        check_dims(both(reference, candidates))?;
        let row = |r: &R| -> Vec<f64> {
            candidates
                .iter()
                .map(|c| mode.apply(dot(r.as_ref(), c.as_ref())))
                .collect()
        };
        let rows: Vec<Vec<f64>> = if reference.len() * candidates.len() >= PAR_THRESHOLD {
            reference.par_iter().map(row).collect()
        } else {
            reference.iter().map(row).collect()
        };
        Ok(Self {
            n_ref: reference.len(),
            n_cand: candidates.len(),
            data: rows.concat(),
        })
    }

    pub fn n_reference(&self) -> usize {
        self.n_ref
    }

    pub fn n_candidates(&self) -> usize {
        self.n_cand
    }

    #[inline]
    pub fn get(&self, reference: usize, candidate: usize) -> f64 {
        self.data[reference * self.n_cand + candidate]
    }

    /// Per-reference maximum over the given candidate indices (`-inf` if empty).
    pub fn best_over(&self, selected: &[usize]) -> Vec<f64> {
        (0..self.n_ref)
            .map(|r| {
                selected
                    .iter()
                    .map(|&c| self.get(r, c))
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect()
    }

    /// Per-reference maximum after adding `candidate` to a set whose maxima are `best`.
    pub fn extend_best(&self, best: &[f64], candidate: usize) -> Vec<f64> {
        best.iter()
            .enumerate()
            .map(|(r, &b)| b.max(self.get(r, candidate)))
            .collect()
    }

    /// Facility value of `best.max(column candidate)` without materializing it.
    pub fn facility_with(&self, best: &[f64], candidate: usize) -> f64 {
        compensated_sum(
            best.iter()
                .enumerate()
                .map(|(r, &b)| b.max(self.get(r, candidate))),
        )
    }

    pub fn facility_of(&self, selected: &[usize]) -> f64 {
        compensated_sum(self.best_over(selected))
    }

    pub fn coverage_of(&self, selected: &[usize]) -> f64 {
        self.facility_of(selected) / self.n_ref as f64
    }
}
