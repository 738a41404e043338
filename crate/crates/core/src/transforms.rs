//! Simplex-normalizing transforms: softmax (with temperature), sparsemax,
//! exact 1.5-entmax, bisection α-entmax, and the Tsallis entropy family they
//! maximize.
//!
//! Every transform maps a finite logit vector `z` onto the probability simplex.
//! The entmax family is
//!
//! ```text
//! α-entmax(z) = argmax_{p ∈ Δ} pᵀz + H_α(p)
//!             = [(α-1)z - τ]₊^{1/(α-1)}
//! ```
//!
//! with α = 1 giving softmax and α = 2 giving sparsemax. For α > 1 the output
//! can contain exact zeros; `τ` is the threshold below which an entry drops out.
//!
//! All transforms subtract `max(z)` first. The results are shift invariant, so
//! this only affects rounding, and it keeps the bisection bracket and the
//! softmax exponentials bounded.

use crate::error::{invalid, Error, Result};

/// Default number of bisection iterations for [`entmax_bisect`].
pub const DEFAULT_BISECT_ITERS: usize = 50;

/// Raw pre-normalization scores. Non-empty, every entry finite.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return invalid("logit vector must have at least one entry");
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return invalid(format!("logit {i} is not finite ({})", values[i]));
        }
        Ok(LogitVector(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<&[f64]> for LogitVector {
    type Error = Error;

    fn try_from(values: &[f64]) -> Result<Self> {
        LogitVector::new(values.to_vec())
    }
}

/// A point on the simplex together with its support and threshold.
///
/// `support` lists, in increasing order, exactly the indices with strictly
/// positive probability. `tau` is reported in the coordinates the transform
/// thresholds in: `z` for sparsemax, `z/2` for 1.5-entmax and `(α-1)z` for
/// bisection entmax. Softmax has no threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseDistribution {
    probs: Vec<f64>,
    support: Vec<usize>,
    tau: Option<f64>,
    alpha: f64,
}

impl SparseDistribution {
    /// Wraps a probability vector, deriving the support from strict positivity.
    pub fn from_probs(probs: Vec<f64>, tau: Option<f64>, alpha: f64) -> Result<Self> {
        if probs.is_empty() {
            return invalid("distribution must have at least one entry");
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return invalid("probabilities must be finite and nonnegative");
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return invalid(format!("probabilities sum to {sum}, not 1"));
        }
        let support: Vec<usize> = probs
            .iter()
            .enumerate()
            .filter(|(_, p)| **p > 0.0)
            .map(|(i, _)| i)
            .collect();
        Ok(SparseDistribution {
            probs,
            support,
            tau,
            alpha,
        })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn support(&self) -> &[usize] {
        &self.support
    }

    pub fn tau(&self) -> Option<f64> {
        self.tau
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn into_probs(self) -> Vec<f64> {
        self.probs
    }

    /// Number of exact zeros.
    pub fn zero_count(&self) -> usize {
        self.probs.len() - self.support.len()
    }
}

/// Softmax temperature, strictly positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(t: f64) -> Result<Self> {
        if !(t.is_finite() && t > 0.0) {
            return invalid(format!("temperature must be positive, got {t}"));
        }
        Ok(Temperature(t))
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Temperature(1.0)
    }
}

/// Learnable sparsity parameter, stored unconstrained.
///
/// `alpha = 1 + sigmoid(pre)`, so any real `pre` maps into the open interval
/// (1, 2) and `pre = 0` gives 1.5.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AlphaParameter {
    pub pre: f64,
}

impl AlphaParameter {
    pub fn new(pre: f64) -> Self {
        AlphaParameter { pre }
    }

    pub fn alpha(self) -> f64 {
        1.0 + sigmoid(self.pre)
    }

    /// dα/d(pre).
    pub fn dalpha_dpre(self) -> f64 {
        let s = sigmoid(self.pre);
        s * (1.0 - s)
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn max_of(z: &[f64]) -> f64 {
    z.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Softmax of `z / t`.
pub fn softmax(z: &LogitVector, temp: Temperature) -> Result<SparseDistribution> {
    let mut out = vec![0.0; z.len()];
    softmax_into(z.as_slice(), temp.get(), &mut out);
    Ok(SparseDistribution::from_parts(out, None, 1.0))
}

/// Sparsemax: Euclidean projection of `z` onto the simplex.
pub fn sparsemax(z: &LogitVector) -> Result<SparseDistribution> {
    let mut out = vec![0.0; z.len()];
    let tau = sparsemax_into(z.as_slice(), &mut out);
    Ok(SparseDistribution::from_parts(out, Some(tau), 2.0))
}

/// Exact 1.5-entmax via the sort-based threshold algorithm on `z/2`.
pub fn entmax15_exact(z: &LogitVector) -> Result<SparseDistribution> {
    let mut out = vec![0.0; z.len()];
    let tau = entmax15_into(z.as_slice(), &mut out);
    Ok(SparseDistribution::from_parts(out, Some(tau), 1.5))
}

/// α-entmax for any α > 1 by bisection on the threshold.
pub fn entmax_bisect(z: &LogitVector, alpha: f64, iters: usize) -> Result<SparseDistribution> {
    if !(alpha.is_finite() && alpha > 1.0) {
        return invalid(format!(
            "bisection entmax requires alpha > 1 (got {alpha}); use softmax for alpha = 1"
        ));
    }
    if iters == 0 {
        return invalid("bisection needs at least one iteration");
    }
    let mut out = vec![0.0; z.len()];
    let tau = entmax_bisect_into(z.as_slice(), alpha, iters, &mut out);
    Ok(SparseDistribution::from_parts(out, Some(tau), alpha))
}

/// Dispatches to the specialised transform for α ∈ {1, 1.5, 2}, else bisection.
pub fn entmax(z: &LogitVector, alpha: f64) -> Result<SparseDistribution> {
    if !(alpha.is_finite() && alpha >= 1.0) {
        return invalid(format!("entmax requires alpha >= 1, got {alpha}"));
    }
    if alpha == 1.0 {
        softmax(z, Temperature::default())
    } else if alpha == 2.0 {
        sparsemax(z)
    } else if alpha == 1.5 {
        entmax15_exact(z)
    } else {
        entmax_bisect(z, alpha, DEFAULT_BISECT_ITERS)
    }
}

/// Tsallis α-entropy. α = 1 is the Shannon entropy (with 0·log 0 = 0).
pub fn tsallis_entropy(p: &SparseDistribution, alpha: f64) -> Result<f64> {
    tsallis_entropy_slice(p.probs(), alpha)
}

pub fn tsallis_entropy_slice(p: &[f64], alpha: f64) -> Result<f64> {
    if !(alpha.is_finite() && alpha >= 1.0) {
        return invalid(format!("Tsallis entropy requires alpha >= 1, got {alpha}"));
    }
    let h = if alpha == 1.0 {
        -p.iter().filter(|&&q| q > 0.0).map(|&q| q * q.ln()).sum::<f64>()
    } else {
        p.iter().map(|&q| q - q.powf(alpha)).sum::<f64>() / (alpha * (alpha - 1.0))
    };
    Ok(h.max(0.0))
}

impl SparseDistribution {
    /// Internal constructor for transform outputs, which satisfy the simplex
    /// invariants by construction.
    pub(crate) fn from_parts(probs: Vec<f64>, tau: Option<f64>, alpha: f64) -> Self {
        let support = probs
            .iter()
            .enumerate()
            .filter(|(_, p)| **p > 0.0)
            .map(|(i, _)| i)
            .collect();
        SparseDistribution {
            probs,
            support,
            tau,
            alpha,
        }
    }
}

// Slice kernels. These write into caller buffers and are shared with the
// attention layer and the FFI crate.

pub(crate) fn softmax_into(z: &[f64], t: f64, out: &mut [f64]) {
    let m = max_of(z);
    let mut sum = 0.0;
    for (o, &zi) in out.iter_mut().zip(z) {
        *o = ((zi - m) / t).exp();
        sum += *o;
    }
    let inv = 1.0 / sum;
    out.iter_mut().for_each(|o| *o *= inv);
}

/// Values `x` (already shifted so that the max is 0) that can possibly lie in
/// the support, sorted descending. Any threshold satisfies τ ≥ max − 1, so
/// entries at or below −1 are dropped before sorting.
fn sorted_candidates(x: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut c: Vec<f64> = x.filter(|&v| v > -1.0).collect();
    c.sort_unstable_by(|a, b| b.total_cmp(a));
    c
}

/// Returns τ in the coordinates of `z`.
pub(crate) fn sparsemax_into(z: &[f64], out: &mut [f64]) -> f64 {
    let m = max_of(z);
    let sorted = sorted_candidates(z.iter().map(|&v| v - m));
    let mut cumsum = 0.0;
    let mut tau = sorted[0] - 1.0;
    for (k, &v) in sorted.iter().enumerate() {
        cumsum += v;
        let k1 = (k + 1) as f64;
        if 1.0 + k1 * v > cumsum {
            tau = (cumsum - 1.0) / k1;
        } else {
            break;
        }
    }
    for (o, &zi) in out.iter_mut().zip(z) {
        *o = (zi - m - tau).max(0.0);
    }
    tau + m
}

/// Returns τ in the coordinates of `z/2`.
pub(crate) fn entmax15_into(z: &[f64], out: &mut [f64]) -> f64 {
    let m = max_of(z) / 2.0;
    let sorted = sorted_candidates(z.iter().map(|&v| v / 2.0 - m));
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut tau = sorted[0] - 1.0;
    for (k, &v) in sorted.iter().enumerate() {
        sum += v;
        sum_sq += v * v;
        let k1 = (k + 1) as f64;
        let mean = sum / k1;
        let var = sum_sq / k1 - mean * mean;
        let delta = (1.0 - k1 * var) / k1;
        let tau_k = mean - delta.max(0.0).sqrt();
        if tau_k <= v {
            tau = tau_k;
        } else {
            break;
        }
    }
    let mut total = 0.0;
    for (o, &zi) in out.iter_mut().zip(z) {
        let d = (zi / 2.0 - m - tau).max(0.0);
        *o = d * d;
        total += *o;
    }
    // Absorb the last ulp-level deviation from the simplex.
    let inv = 1.0 / total;
    out.iter_mut().for_each(|o| *o *= inv);
    tau + m
}

/// Returns τ in the coordinates of `(α-1)z`.
pub(crate) fn entmax_bisect_into(z: &[f64], alpha: f64, iters: usize, out: &mut [f64]) -> f64 {
    let am1 = alpha - 1.0;
    let inv_am1 = 1.0 / am1;
    let m = max_of(z);
    for (o, &zi) in out.iter_mut().zip(z) {
        *o = (zi - m) * am1;
    }
    let mut lo = out.iter().copied().fold(f64::INFINITY, f64::min) - 1.0;
    let mut hi = 0.0;
    let pow = |d: f64| -> f64 {
        if d <= 0.0 {
            0.0
        } else if am1 == 1.0 {
            d
        } else {
            d.powf(inv_am1)
        }
    };
    for _ in 0..iters {
        let mid = 0.5 * (lo + hi);
        let mass: f64 = out.iter().map(|&x| pow(x - mid)).sum();
        if mass >= 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let tau = 0.5 * (lo + hi);
    let mut total = 0.0;
    for o in out.iter_mut() {
        *o = pow(*o - tau);
        total += *o;
    }
    let inv = 1.0 / total;
    out.iter_mut().for_each(|o| *o *= inv);
    tau + m * am1
}

/// A transform together with its parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Transform {
    Softmax { temp: Temperature },
    Sparsemax,
    Entmax15,
    EntmaxBisect { alpha: f64, iters: usize },
    Entmax { alpha: f64 },
}

impl Transform {
    pub fn apply(&self, z: &LogitVector) -> Result<SparseDistribution> {
        match *self {
            Transform::Softmax { temp } => softmax(z, temp),
            Transform::Sparsemax => sparsemax(z),
            Transform::Entmax15 => entmax15_exact(z),
            Transform::EntmaxBisect { alpha, iters } => entmax_bisect(z, alpha, iters),
            Transform::Entmax { alpha } => entmax(z, alpha),
        }
    }

    /// The α the transform corresponds to (1 for softmax of any temperature).
    pub fn alpha(&self) -> f64 {
        match *self {
            Transform::Softmax { .. } => 1.0,
            Transform::Sparsemax => 2.0,
            Transform::Entmax15 => 1.5,
            Transform::EntmaxBisect { alpha, .. } | Transform::Entmax { alpha } => alpha,
        }
    }

    /// Applies to a plain slice; for callers that already validated their input.
    pub fn apply_slice(&self, z: &[f64]) -> Result<SparseDistribution> {
        self.apply(&LogitVector::new(z.to_vec())?)
    }
}
