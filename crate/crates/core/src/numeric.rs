//! Scalar, vector and matrix kernels shared by every phase of the pipeline.
//!
//! Everything here is a pure function except [`SeededRng`], which is a
//! single-owner stream. The generator is ChaCha with 8 rounds
//! (`rand_chacha::ChaCha8Rng`), seeded through `SeedableRng::seed_from_u64`;
//! its output stream is fixed by the published algorithm and does not depend
//! on platform or pointer width. Gaussian draws use the ziggurat sampler from
//! `rand_distr::StandardNormal`.

use ndarray::{Array1, ArrayView1, ArrayView2};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used when checking that a vector lies on the probability simplex.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// A probability distribution over classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    /// Wraps `values` after checking the simplex invariants.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyInput("probability vector"));
        }
        if values.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid("probability outside [0, 1]"));
        }
        let total: f64 = values.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::invalid(format!("probabilities sum to {total}")));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest probability; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

impl TryFrom<Vec<f64>> for ProbVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<ProbVector> for Vec<f64> {
    fn from(p: ProbVector) -> Self {
        p.0
    }
}

/// Index of the largest entry, lowest index on ties. Panics on empty input.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Result<ProbVector> {
    if logits.is_empty() {
        return Err(Error::EmptyInput("logits"));
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::invalid("non-finite logit"));
    }
    Ok(ProbVector(softmax_unchecked(logits)))
}

/// Softmax without validation, for hot loops whose inputs are known finite.
pub(crate) fn softmax_unchecked(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = out.iter().sum();
    for p in &mut out {
        *p /= total;
    }
    out
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn self_entropy(p: &ProbVector) -> f64 {
    entropy_of(p.as_slice())
}

pub(crate) fn entropy_of(p: &[f64]) -> f64 {
    let h: f64 = p.iter().filter(|&&q| q > 0.0).map(|&q| -q * q.ln()).sum();
    // -0.0 and tiny negative rounding residue for one-hot inputs
    h.max(0.0)
}

/// Output of [`minmax_normalize`].
#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub values: Vec<f64>,
    /// Set when the input had no spread (all equal, or a single element); the
    /// values are then all zero.
    pub degenerate: bool,
}

/// Affine map of `values` onto `[0, 1]` with the minimum at 0 and the maximum at 1.
pub fn minmax_normalize(values: &[f64]) -> Result<Normalized> {
    if values.is_empty() {
        return Err(Error::EmptyInput("values to normalize"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite value in normalization"));
    }
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if hi <= lo {
        return Ok(Normalized {
            values: vec![0.0; values.len()],
            degenerate: true,
        });
    }
    let span = hi - lo;
    Ok(Normalized {
        values: values
            .iter()
            .map(|&v| ((v - lo) / span).clamp(0.0, 1.0))
            .collect(),
        degenerate: false,
    })
}

/// Per-column population variance of an `m x d` matrix and the mean of
/// those variances.
pub fn column_mean_variance(features: ArrayView2<'_, f64>) -> Result<(Array1<f64>, f64)> {
    let (m, d) = features.dim();
    if m == 0 {
        return Err(Error::EmptyInput("feature matrix has no rows"));
    }
    if d == 0 {
        return Err(Error::invalid("feature matrix has no columns"));
    }
    let variances: Array1<f64> = features
        .columns()
        .into_iter()
        .map(|col| {
            let mean = col.sum() / m as f64;
            col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / m as f64
        })
        .collect();
    let mean = variances.sum() / d as f64;
    Ok((variances, mean))
}

pub fn dot(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(a: ArrayView1<'_, f64>) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine similarity, clamped into `[-1, 1]` against rounding.
pub fn cosine_sim(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "cosine of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm("cosine similarity operand".into()));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Deterministic random stream (ChaCha8). One generator per worker.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform draw from `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.random::<f64>()
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform index in `0..n`. Panics if `n == 0`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// Derives an independent child stream; the parent advances by one draw.
    pub fn fork(&mut self) -> SeededRng {
        SeededRng::new(self.inner.next_u64())
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}
