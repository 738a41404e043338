//! Backward passes for the simplex transforms.
//!
//! For α > 1 the entmax Jacobian restricted to the support S is
//!
//! ```text
//! ∂p/∂z = diag(s) − s sᵀ / Σs,     s_j = p_j^{2−α} for j ∈ S, 0 otherwise
//! ```
//!
//! which is the sparsemax Jacobian at α = 2. The α-derivative follows from
//! differentiating `p_j^{α−1} = (α−1) z_j − τ(α)` on the support:
//!
//! ```text
//! ∂p_j/∂α = s_j / (α−1) · (w_j − Σ_k s_k w_k / Σ_k s_k),   w_j = z_j − p_j^{α−1} ln p_j
//! ```
//!
//! Entries off the support stay exactly zero in a neighbourhood of α, so
//! their derivative is zero. Entries sitting exactly on the threshold are
//! treated as off the support (one element of the subdifferential).

use ndarray::Array2;
use rand::Rng;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::transforms::{LogitVector, SparseDistribution, Transform, DEFAULT_BISECT_ITERS};

/// Everything a backward pass needs from the forward call.
#[derive(Debug, Clone, PartialEq)]
pub struct BackwardContext {
    probs: SparseDistribution,
    alpha: f64,
    logits: Option<LogitVector>,
}

impl BackwardContext {
    /// Context for ∂/∂z only.
    pub fn new(probs: SparseDistribution, alpha: f64) -> Self {
        BackwardContext {
            probs,
            alpha,
            logits: None,
        }
    }

    /// Context that also retains the logits, enabling [`entmax_alpha_grad`].
    pub fn with_logits(probs: SparseDistribution, alpha: f64, logits: LogitVector) -> Self {
        BackwardContext {
            probs,
            alpha,
            logits: Some(logits),
        }
    }

    /// Runs `transform` forward and keeps what the backward pass needs.
    pub fn forward(transform: &Transform, z: &LogitVector) -> Result<Self> {
        let probs = transform.apply(z)?;
        Ok(BackwardContext::with_logits(probs, transform.alpha(), z.clone()))
    }

    pub fn probs(&self) -> &SparseDistribution {
        &self.probs
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn logits(&self) -> Option<&LogitVector> {
        self.logits.as_ref()
    }
}

fn check_len(ctx: &BackwardContext, v: &[f64]) -> Result<()> {
    if v.len() != ctx.probs.len() {
        return invalid(format!(
            "cotangent has length {} but the distribution has {}",
            v.len(),
            ctx.probs.len()
        ));
    }
    Ok(())
}

/// `(diag(p) − ppᵀ) v` for softmax at temperature 1.
pub fn softmax_vjp(ctx: &BackwardContext, v: &[f64]) -> Result<Vec<f64>> {
    check_len(ctx, v)?;
    let p = ctx.probs.probs();
    let pv: f64 = p.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok(p.iter().zip(v).map(|(pi, vi)| pi * (vi - pv)).collect())
}

/// Sparsemax VJP: centre `v` on the support, zero elsewhere.
pub fn sparsemax_vjp(ctx: &BackwardContext, v: &[f64]) -> Result<Vec<f64>> {
    check_len(ctx, v)?;
    let support = ctx.probs.support();
    let mean = support.iter().map(|&j| v[j]).sum::<f64>() / support.len() as f64;
    let mut g = vec![0.0; v.len()];
    for &j in support {
        g[j] = v[j] - mean;
    }
    Ok(g)
}

/// Entmax VJP for any α > 1.
pub fn entmax_vjp(ctx: &BackwardContext, v: &[f64]) -> Result<Vec<f64>> {
    check_len(ctx, v)?;
    if !(ctx.alpha > 1.0) {
        return invalid(format!(
            "entmax_vjp requires alpha > 1 (got {}); use softmax_vjp",
            ctx.alpha
        ));
    }
    let s = support_weights(ctx.probs.probs(), ctx.alpha);
    let s_sum: f64 = s.iter().sum();
    let sv: f64 = s.iter().zip(v).map(|(a, b)| a * b).sum();
    let c = sv / s_sum;
    Ok(s.iter().zip(v).map(|(si, vi)| si * (vi - c)).collect())
}

/// Picks the VJP matching the context's α (softmax at α = 1).
pub fn vjp(ctx: &BackwardContext, v: &[f64]) -> Result<Vec<f64>> {
    if ctx.alpha == 1.0 {
        softmax_vjp(ctx, v)
    } else {
        entmax_vjp(ctx, v)
    }
}

/// ∂p*/∂α as an n-vector, zero off the support.
pub fn entmax_alpha_grad(ctx: &BackwardContext) -> Result<Vec<f64>> {
    let z = ctx
        .logits
        .as_ref()
        .ok_or_else(|| Error::InvalidState("alpha gradient needs the forward logits retained".into()))?;
    let alpha = ctx.alpha;
    if !(alpha > 1.0 && alpha.is_finite()) {
        return invalid(format!("alpha gradient requires alpha > 1, got {alpha}"));
    }
    if z.len() != ctx.probs.len() {
        return invalid("retained logits do not match the distribution length");
    }
    Ok(alpha_grad_slice(z.as_slice(), ctx.probs.probs(), alpha))
}

pub(crate) fn support_weights(p: &[f64], alpha: f64) -> Vec<f64> {
    p.iter()
        .map(|&pj| {
            if pj <= 0.0 {
                0.0
            } else if alpha == 2.0 {
                1.0
            } else {
                pj.powf(2.0 - alpha)
            }
        })
        .collect()
}

pub(crate) fn alpha_grad_slice(z: &[f64], p: &[f64], alpha: f64) -> Vec<f64> {
    let am1 = alpha - 1.0;
    // Shift invariant; centring z keeps w well scaled.
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s = support_weights(p, alpha);
    let w: Vec<f64> = z
        .iter()
        .zip(p)
        .map(|(&zj, &pj)| {
            if pj > 0.0 {
                (zj - m) - pj.powf(am1) * pj.ln()
            } else {
                0.0
            }
        })
        .collect();
    let s_sum: f64 = s.iter().sum();
    let sw: f64 = s.iter().zip(&w).map(|(a, b)| a * b).sum();
    let c = sw / s_sum;
    s.iter()
        .zip(&w)
        .map(|(&sj, &wj)| if sj > 0.0 { sj * (wj - c) / am1 } else { 0.0 })
        .collect()
}

/// Central finite-difference Jacobian: column `j` is
/// `(f(z + εe_j) − f(z − εe_j)) / 2ε`, row `i` indexes the output.
pub fn finite_difference_jacobian(transform: &Transform, z: &LogitVector, eps: f64) -> Result<Array2<f64>> {
    if !(eps > 0.0) {
        return invalid("finite-difference step must be positive");
    }
    let n = z.len();
    let mut jac = Array2::zeros((n, n));
    let mut zp = z.as_slice().to_vec();
    for j in 0..n {
        let orig = zp[j];
        zp[j] = orig + eps;
        let plus = transform.apply_slice(&zp)?;
        zp[j] = orig - eps;
        let minus = transform.apply_slice(&zp)?;
        zp[j] = orig;
        for i in 0..n {
            jac[[i, j]] = (plus.probs()[i] - minus.probs()[i]) / (2.0 * eps);
        }
    }
    Ok(jac)
}

/// Central finite difference of bisection entmax in α.
pub fn finite_difference_alpha(z: &LogitVector, alpha: f64, eps: f64, iters: usize) -> Result<Vec<f64>> {
    use crate::transforms::entmax_bisect;
    let plus = entmax_bisect(z, alpha + eps, iters)?;
    let minus = entmax_bisect(z, alpha - eps, iters)?;
    Ok(plus
        .probs()
        .iter()
        .zip(minus.probs())
        .map(|(a, b)| (a - b) / (2.0 * eps))
        .collect())
}

/// Distance from the nearest kink of the transform: the smallest support
/// probability, or the smallest gap between an excluded entry and the
/// threshold (in the scaled coordinates `(α−1)z`), whichever is smaller.
/// Finite differences are only trusted when this exceeds a margin.
pub fn boundary_margin(z: &LogitVector, dist: &SparseDistribution) -> f64 {
    let min_p = dist
        .support()
        .iter()
        .map(|&j| dist.probs()[j])
        .fold(f64::INFINITY, f64::min);
    let Some(tau) = dist.tau() else {
        return min_p;
    };
    let scale = dist.alpha() - 1.0;
    let gap = z
        .as_slice()
        .iter()
        .zip(dist.probs())
        .filter(|(_, &p)| p == 0.0)
        .map(|(&zj, _)| tau - scale * zj)
        .fold(f64::INFINITY, f64::min);
    min_p.min(gap)
}

/// Outcome of comparing an analytic derivative with finite differences over
/// many random points.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckStats {
    /// Worst `‖analytic − fd‖∞ / max(‖analytic‖∞, ‖fd‖∞, 1e-6)` over checked points.
    pub max_rel_err: f64,
    pub checked: usize,
    /// Points rejected because they sat within the margin of a kink.
    pub skipped: usize,
    pub tol: f64,
    pub pass: bool,
}

/// Sampling and tolerance settings for [`check_vjp`] and [`check_alpha_grad`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckSettings {
    /// Points to check (after margin filtering).
    pub trials: usize,
    pub dim: usize,
    /// Logits are drawn uniformly from `[-scale, scale]`.
    pub scale: f64,
    pub eps: f64,
    /// Minimum [`boundary_margin`] for sparse transforms.
    pub margin: f64,
    pub tol: f64,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        GradCheckSettings {
            trials: 100,
            dim: 8,
            scale: 2.0,
            eps: 1e-5,
            margin: 1e-3,
            tol: 1e-4,
        }
    }
}

fn rel_err(a: &[f64], f: &[f64]) -> f64 {
    let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let diff = a.iter().zip(f).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    diff / inf(a).max(inf(f)).max(1e-6)
}

/// Draws logit vectors until `trials` of them clear the margin test (giving
/// up after 50× as many draws) and feeds each accepted point to `check`.
fn sample_and_check<R: Rng>(
    transform: &Transform,
    s: &GradCheckSettings,
    rng: &mut R,
    mut check: impl FnMut(&LogitVector, &BackwardContext) -> Result<f64>,
) -> Result<GradCheckStats> {
    if s.trials == 0 || s.dim == 0 {
        return invalid("gradient check needs at least one trial and dimension");
    }
    let sparse = transform.alpha() > 1.0;
    let mut stats = GradCheckStats {
        max_rel_err: 0.0,
        checked: 0,
        skipped: 0,
        tol: s.tol,
        pass: true,
    };
    let mut draws = 0;
    while stats.checked < s.trials && draws < 50 * s.trials {
        draws += 1;
        let z = LogitVector::new((0..s.dim).map(|_| rng.gen_range(-s.scale..=s.scale)).collect())?;
        let ctx = BackwardContext::forward(transform, &z)?;
        if sparse && s.dim > 1 && boundary_margin(&z, ctx.probs()) <= s.margin {
            stats.skipped += 1;
            continue;
        }
        stats.max_rel_err = stats.max_rel_err.max(check(&z, &ctx)?);
        stats.checked += 1;
    }
    stats.pass = stats.checked > 0 && stats.max_rel_err <= s.tol;
    Ok(stats)
}

/// Checks the transform's VJP (as a full Jacobian, one basis vector at a
/// time) against a central finite-difference Jacobian.
pub fn check_vjp<R: Rng>(transform: &Transform, s: &GradCheckSettings, rng: &mut R) -> Result<GradCheckStats> {
    if let Transform::Softmax { temp } = transform {
        if temp.get() != 1.0 {
            return invalid("the softmax VJP is checked at temperature 1");
        }
    }
    sample_and_check(transform, s, rng, |z, ctx| {
        let n = z.len();
        let fd = finite_difference_jacobian(transform, z, s.eps)?;
        let mut analytic = Vec::with_capacity(n * n);
        let mut numeric = Vec::with_capacity(n * n);
        let mut basis = vec![0.0; n];
        for i in 0..n {
            basis[i] = 1.0;
            // row i of J is Jᵀe_i because J is symmetric
            analytic.extend(vjp(ctx, &basis)?);
            numeric.extend(fd.row(i).iter().copied());
            basis[i] = 0.0;
        }
        Ok(rel_err(&analytic, &numeric))
    })
}

/// Checks ∂p*/∂α of bisection entmax at `alpha` against central differences in α.
pub fn check_alpha_grad<R: Rng>(alpha: f64, s: &GradCheckSettings, rng: &mut R) -> Result<GradCheckStats> {
    if !(alpha > 1.0 && alpha < 2.0) {
        return invalid(format!("alpha must lie in (1, 2), got {alpha}"));
    }
    let transform = Transform::EntmaxBisect {
        alpha,
        iters: DEFAULT_BISECT_ITERS,
    };
    sample_and_check(&transform, s, rng, |z, ctx| {
        let analytic = entmax_alpha_grad(ctx)?;
        let fd = finite_difference_alpha(z, alpha, s.eps, DEFAULT_BISECT_ITERS)?;
        Ok(rel_err(&analytic, &fd))
    })
}
