//! Multi-head scaled dot-product attention with a pluggable normalizer per head.
//!
//! ```text
//! head_i = normalize(Q_i K_iᵀ / √d_k) V_i,   Q_i = X W_i^q, K_i = X W_i^k, V_i = X W_i^v
//! O      = concat(head_1, …, head_h) W^o
//! ```
//!
//! Masking restricts the normalizer's domain to the allowed keys of each query
//! row; disallowed keys get exact zeros. Sparse transforms have finite
//! thresholds, so adding −∞ to scores is not an option for them.

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::gradients::{alpha_grad_slice, support_weights};
use crate::transforms::{
    entmax15_into, entmax_bisect_into, softmax_into, sparsemax_into, tsallis_entropy_slice, AlphaParameter,
    Temperature, DEFAULT_BISECT_ITERS,
};

/// Interleaved sinusoidal positional encoding.
///
/// `PE[pos, 2i] = sin(pos / 10000^{2i/d})`, `PE[pos, 2i+1] = cos(pos / 10000^{2i/d})`.
pub fn sinusoidal_pe(length: usize, d_model: usize) -> Result<Array2<f64>> {
    if d_model == 0 || !d_model.is_multiple_of(2) {
        return invalid(format!(
            "positional encoding width must be even and positive, got {d_model}"
        ));
    }
    if length == 0 {
        return invalid("positional encoding length must be positive");
    }
    let mut pe = Array2::zeros((length, d_model));
    for pos in 0..length {
        for i in 0..d_model / 2 {
            let freq = 10000f64.powf(2.0 * i as f64 / d_model as f64);
            let angle = pos as f64 / freq;
            pe[[pos, 2 * i]] = angle.sin();
            pe[[pos, 2 * i + 1]] = angle.cos();
        }
    }
    Ok(pe)
}

/// Per-head query/key/value projections and the output projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionWeights {
    pub wq: Vec<Array2<f64>>,
    pub wk: Vec<Array2<f64>>,
    pub wv: Vec<Array2<f64>>,
    /// `(h·d_v) × d_model`.
    pub wo: Array2<f64>,
}

impl ProjectionWeights {
    pub fn new(wq: Vec<Array2<f64>>, wk: Vec<Array2<f64>>, wv: Vec<Array2<f64>>, wo: Array2<f64>) -> Result<Self> {
        let w = ProjectionWeights { wq, wk, wv, wo };
        w.validate()?;
        Ok(w)
    }

    /// Fan-in uniform init in `[−1/√d_model, 1/√d_model]`.
    pub fn random<R: Rng>(d_model: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return invalid(format!("d_model {d_model} is not divisible by {heads} heads"));
        }
        let dk = d_model / heads;
        let bound = 1.0 / (d_model as f64).sqrt();
        let mut mat = |r, c| uniform_matrix(r, c, bound, rng);
        let mut wq = Vec::with_capacity(heads);
        let mut wk = Vec::with_capacity(heads);
        let mut wv = Vec::with_capacity(heads);
        for _ in 0..heads {
            wq.push(mat(d_model, dk));
            wk.push(mat(d_model, dk));
            wv.push(mat(d_model, dk));
        }
        let wo = mat(d_model, d_model);
        ProjectionWeights::new(wq, wk, wv, wo)
    }

    pub fn heads(&self) -> usize {
        self.wq.len()
    }

    pub fn d_model(&self) -> usize {
        self.wo.ncols()
    }

    pub fn d_head(&self) -> usize {
        self.d_model() / self.heads()
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.wq.len();
        if h == 0 || self.wk.len() != h || self.wv.len() != h {
            return invalid("projection weights need the same non-zero number of heads for q, k, v");
        }
        let d = self.wo.ncols();
        if !d.is_multiple_of(h) {
            return invalid(format!("d_model {d} is not divisible by {h} heads"));
        }
        let dk = d / h;
        for m in self.wq.iter().chain(&self.wk).chain(&self.wv) {
            if m.dim() != (d, dk) {
                return invalid(format!("head projection has shape {:?}, expected ({d}, {dk})", m.dim()));
            }
        }
        if self.wo.nrows() != h * dk {
            return invalid("output projection must have h·d_v rows");
        }
        let all_finite = self
            .wq
            .iter()
            .chain(&self.wk)
            .chain(&self.wv)
            .chain(std::iter::once(&self.wo))
            .all(|m| m.iter().all(|v| v.is_finite()));
        if !all_finite {
            return invalid("projection weights must be finite");
        }
        Ok(())
    }
}

pub(crate) fn uniform_matrix<R: Rng>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..=bound))
}

/// Which normalizer a head uses, with the parameter that kind requires.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum HeadNormalizerConfig {
    Softmax,
    SoftmaxTemperature {
        #[serde(with = "temperature_serde")]
        temp: Temperature,
    },
    Sparsemax,
    EntmaxFixed {
        alpha: f64,
    },
    EntmaxAdaptive {
        #[serde(default)]
        pre: f64,
    },
}

mod temperature_serde {
    use super::Temperature;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(t: &Temperature, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(t.get())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Temperature, D::Error> {
        let t = f64::deserialize(d)?;
        Temperature::new(t).map_err(serde::de::Error::custom)
    }
}

impl HeadNormalizerConfig {
    pub fn validate(&self) -> Result<()> {
        match *self {
            HeadNormalizerConfig::EntmaxFixed { alpha } if !(alpha.is_finite() && alpha > 1.0) => {
                invalid(format!("entmax-fixed needs alpha > 1, got {alpha}"))
            }
            HeadNormalizerConfig::EntmaxAdaptive { pre } if !pre.is_finite() => {
                invalid("entmax-adaptive pre-parameter must be finite")
            }
            _ => Ok(()),
        }
    }

    /// Effective α (1 for both softmax kinds).
    pub fn alpha(&self) -> f64 {
        match *self {
            HeadNormalizerConfig::Softmax | HeadNormalizerConfig::SoftmaxTemperature { .. } => 1.0,
            HeadNormalizerConfig::Sparsemax => 2.0,
            HeadNormalizerConfig::EntmaxFixed { alpha } => alpha,
            HeadNormalizerConfig::EntmaxAdaptive { pre } => AlphaParameter::new(pre).alpha(),
        }
    }

    pub fn is_adaptive(&self) -> bool {
        matches!(self, HeadNormalizerConfig::EntmaxAdaptive { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            HeadNormalizerConfig::Softmax => "softmax",
            HeadNormalizerConfig::SoftmaxTemperature { .. } => "softmax-temperature",
            HeadNormalizerConfig::Sparsemax => "sparsemax",
            HeadNormalizerConfig::EntmaxFixed { .. } => "entmax-fixed",
            HeadNormalizerConfig::EntmaxAdaptive { .. } => "entmax-adaptive",
        }
    }

    fn temperature(&self) -> f64 {
        match *self {
            HeadNormalizerConfig::SoftmaxTemperature { temp } => temp.get(),
            _ => 1.0,
        }
    }

    /// Normalizes `z` into `out`.
    pub(crate) fn normalize_into(&self, z: &[f64], out: &mut [f64]) {
        let alpha = self.alpha();
        match *self {
            HeadNormalizerConfig::Softmax | HeadNormalizerConfig::SoftmaxTemperature { .. } => {
                softmax_into(z, self.temperature(), out)
            }
            _ if alpha == 2.0 => {
                sparsemax_into(z, out);
            }
            _ if alpha == 1.5 => {
                entmax15_into(z, out);
            }
            _ => {
                entmax_bisect_into(z, alpha, DEFAULT_BISECT_ITERS, out);
            }
        }
    }

    /// VJP of the normalizer at output `p` (input `z`), written into `dz`.
    /// Returns dL/dα, which is only meaningful for entmax kinds.
    pub(crate) fn backward_into(&self, z: &[f64], p: &[f64], dp: &[f64], dz: &mut [f64], want_alpha: bool) -> f64 {
        let alpha = self.alpha();
        if alpha == 1.0 {
            let t = self.temperature();
            let pv: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
            for ((g, &pi), &vi) in dz.iter_mut().zip(p).zip(dp) {
                *g = pi * (vi - pv) / t;
            }
            return 0.0;
        }
        let s = support_weights(p, alpha);
        let s_sum: f64 = s.iter().sum();
        let c = s.iter().zip(dp).map(|(a, b)| a * b).sum::<f64>() / s_sum;
        for ((g, &si), &vi) in dz.iter_mut().zip(&s).zip(dp) {
            *g = si * (vi - c);
        }
        if want_alpha {
            alpha_grad_slice(z, p, alpha).iter().zip(dp).map(|(a, b)| a * b).sum()
        } else {
            0.0
        }
    }
}

/// Which keys each query may attend to.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    allowed: Array2<bool>,
}

impl AttentionMask {
    pub fn new(allowed: Array2<bool>) -> Result<Self> {
        for (i, row) in allowed.rows().into_iter().enumerate() {
            if !row.iter().any(|&a| a) {
                return invalid(format!("query row {i} has no allowed key"));
            }
        }
        Ok(AttentionMask { allowed })
    }

    pub fn full(queries: usize, keys: usize) -> Self {
        AttentionMask {
            allowed: Array2::from_elem((queries, keys), true),
        }
    }

    /// Query `i` sees keys `0..=i`.
    pub fn causal(len: usize) -> Self {
        AttentionMask {
            allowed: Array2::from_shape_fn((len, len), |(i, j)| j <= i),
        }
    }

    pub fn allowed(&self) -> &Array2<bool> {
        &self.allowed
    }

    pub fn dim(&self) -> (usize, usize) {
        self.allowed.dim()
    }

    fn allowed_keys(&self, row: usize) -> Vec<usize> {
        self.allowed
            .row(row)
            .iter()
            .enumerate()
            .filter(|(_, &a)| a)
            .map(|(j, _)| j)
            .collect()
    }
}

/// Forward result of one head, plus what its backward pass needs.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadForward {
    /// `T × d_v`.
    pub output: Array2<f64>,
    /// `T × S`, exact zeros at masked keys.
    pub weights: Array2<f64>,
    /// Scaled scores `QKᵀ/√d_k`.
    pub scores: Array2<f64>,
    pub alpha: f64,
}

pub fn project_qkv(
    x: ArrayView2<f64>,
    w: &ProjectionWeights,
    head: usize,
) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>)> {
    if head >= w.heads() {
        return invalid(format!("head {head} out of range for {} heads", w.heads()));
    }
    if x.ncols() != w.d_model() {
        return invalid(format!(
            "input width {} does not match d_model {}",
            x.ncols(),
            w.d_model()
        ));
    }
    Ok((x.dot(&w.wq[head]), x.dot(&w.wk[head]), x.dot(&w.wv[head])))
}

/// One attention head over `q` (T×d_k), `k` (S×d_k), `v` (S×d_v).
pub fn attention_head(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    cfg: &HeadNormalizerConfig,
    mask: &AttentionMask,
) -> Result<HeadForward> {
    cfg.validate()?;
    let (t, dk) = q.dim();
    let s = k.nrows();
    if k.ncols() != dk || v.nrows() != s {
        return invalid(format!(
            "attention shapes disagree: q {:?}, k {:?}, v {:?}",
            q.dim(),
            k.dim(),
            v.dim()
        ));
    }
    if mask.dim() != (t, s) {
        return invalid(format!("mask is {:?} but scores are ({t}, {s})", mask.dim()));
    }
    let scale = 1.0 / (dk as f64).sqrt();
    let scores = q.dot(&k.t()) * scale;
    let mut weights = Array2::zeros((t, s));
    let mut zbuf = Vec::with_capacity(s);
    let mut pbuf = vec![0.0; s];
    for i in 0..t {
        let keys = mask.allowed_keys(i);
        if keys.is_empty() {
            return invalid(format!("query row {i} is fully masked"));
        }
        zbuf.clear();
        zbuf.extend(keys.iter().map(|&j| scores[[i, j]]));
        let p = &mut pbuf[..keys.len()];
        cfg.normalize_into(&zbuf, p);
        for (&j, &pj) in keys.iter().zip(p.iter()) {
            weights[[i, j]] = pj;
        }
    }
    let output = weights.dot(&v);
    Ok(HeadForward {
        output,
        weights,
        scores,
        alpha: cfg.alpha(),
    })
}

/// Gradients of one head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads {
    pub dq: Array2<f64>,
    pub dk: Array2<f64>,
    pub dv: Array2<f64>,
    /// dL/dα (0 for softmax kinds).
    pub dalpha: f64,
}

pub fn attention_head_backward(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    cfg: &HeadNormalizerConfig,
    mask: &AttentionMask,
    fwd: &HeadForward,
    d_output: ArrayView2<f64>,
) -> Result<HeadGrads> {
    if d_output.dim() != fwd.output.dim() {
        return invalid("output cotangent shape mismatch");
    }
    let (t, dk) = q.dim();
    let s = k.nrows();
    let scale = 1.0 / (dk as f64).sqrt();
    let d_weights = d_output.dot(&v.t());
    let dv = fwd.weights.t().dot(&d_output);
    let mut d_scores = Array2::zeros((t, s));
    let want_alpha = cfg.alpha() != 1.0;
    let mut dalpha = 0.0;
    let (mut zbuf, mut pbuf, mut dpbuf) = (Vec::new(), Vec::new(), Vec::new());
    let mut dz = vec![0.0; s];
    for i in 0..t {
        let keys = mask.allowed_keys(i);
        zbuf.clear();
        pbuf.clear();
        dpbuf.clear();
        for &j in &keys {
            zbuf.push(fwd.scores[[i, j]]);
            pbuf.push(fwd.weights[[i, j]]);
            dpbuf.push(d_weights[[i, j]]);
        }
        let g = &mut dz[..keys.len()];
        dalpha += cfg.backward_into(&zbuf, &pbuf, &dpbuf, g, want_alpha);
        for (&j, &gj) in keys.iter().zip(g.iter()) {
            d_scores[[i, j]] = gj;
        }
    }
    let dq = d_scores.dot(&k) * scale;
    let dk_ = d_scores.t().dot(&q) * scale;
    Ok(HeadGrads {
        dq,
        dk: dk_,
        dv,
        dalpha,
    })
}

/// Multi-head forward result.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    /// `T × d_model`.
    pub context: Array2<f64>,
    pub heads: Vec<HeadForward>,
    pub kinds: Vec<HeadNormalizerConfig>,
    pub mask: AttentionMask,
    /// Projected q, k, v per head, kept for the backward pass.
    qkv: Vec<(Array2<f64>, Array2<f64>, Array2<f64>)>,
    concat: Array2<f64>,
}

/// Multi-head self-attention of `x` (T×d_model).
pub fn multi_head(
    x: ArrayView2<f64>,
    w: &ProjectionWeights,
    cfgs: &[HeadNormalizerConfig],
    mask: &AttentionMask,
) -> Result<AttentionOutput> {
    w.validate()?;
    if cfgs.len() != w.heads() {
        return invalid(format!("{} normalizer configs for {} heads", cfgs.len(), w.heads()));
    }
    let t = x.nrows();
    let dv = w.d_head();
    let mut concat = Array2::zeros((t, w.heads() * dv));
    let mut heads = Vec::with_capacity(w.heads());
    let mut qkv = Vec::with_capacity(w.heads());
    for (h, cfg) in cfgs.iter().enumerate() {
        let (q, k, v) = project_qkv(x, w, h)?;
        let fwd = attention_head(q.view(), k.view(), v.view(), cfg, mask)?;
        concat.slice_mut(s![.., h * dv..(h + 1) * dv]).assign(&fwd.output);
        heads.push(fwd);
        qkv.push((q, k, v));
    }
    let context = concat.dot(&w.wo);
    Ok(AttentionOutput {
        context,
        heads,
        kinds: cfgs.to_vec(),
        mask: mask.clone(),
        qkv,
        concat,
    })
}

/// Gradients of a multi-head layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadGrads {
    pub dx: Array2<f64>,
    pub dwq: Vec<Array2<f64>>,
    pub dwk: Vec<Array2<f64>>,
    pub dwv: Vec<Array2<f64>>,
    pub dwo: Array2<f64>,
    /// dL/dα per head.
    pub dalpha: Vec<f64>,
    /// dL/d(pre) per head; zero for non-adaptive heads.
    pub dalpha_pre: Vec<f64>,
}

pub fn multi_head_backward(
    x: ArrayView2<f64>,
    w: &ProjectionWeights,
    out: &AttentionOutput,
    d_context: ArrayView2<f64>,
) -> Result<MultiHeadGrads> {
    if d_context.dim() != out.context.dim() {
        return invalid("context cotangent shape mismatch");
    }
    let dv = w.d_head();
    let dwo = out.concat.t().dot(&d_context);
    let d_concat = d_context.dot(&w.wo.t());
    let mut dx = Array2::zeros(x.dim());
    let h = w.heads();
    let mut grads = MultiHeadGrads {
        dx: Array2::zeros((0, 0)),
        dwq: Vec::with_capacity(h),
        dwk: Vec::with_capacity(h),
        dwv: Vec::with_capacity(h),
        dwo,
        dalpha: Vec::with_capacity(h),
        dalpha_pre: Vec::with_capacity(h),
    };
    for (head, cfg) in out.kinds.iter().enumerate() {
        let (q, k, v) = &out.qkv[head];
        let d_head = d_concat.slice(s![.., head * dv..(head + 1) * dv]);
        let g = attention_head_backward(q.view(), k.view(), v.view(), cfg, &out.mask, &out.heads[head], d_head)?;
        grads.dwq.push(x.t().dot(&g.dq));
        grads.dwk.push(x.t().dot(&g.dk));
        grads.dwv.push(x.t().dot(&g.dv));
        dx += &g.dq.dot(&w.wq[head].t());
        dx += &g.dk.dot(&w.wk[head].t());
        dx += &g.dv.dot(&w.wv[head].t());
        grads.dalpha.push(g.dalpha);
        grads.dalpha_pre.push(match *cfg {
            HeadNormalizerConfig::EntmaxAdaptive { pre } => g.dalpha * AlphaParameter::new(pre).dalpha_dpre(),
            _ => 0.0,
        });
    }
    grads.dx = dx;
    Ok(grads)
}

/// Per-head summary of attention weights.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeadScoreStats {
    /// Shannon entropy per row, averaged over rows.
    pub mean_entropy: f64,
    /// Exact zeros over allowed entries.
    pub zero_fraction: f64,
    /// Fraction of rows with at least one exact zero among allowed keys.
    pub rows_with_zero_fraction: f64,
    /// 20 equal-width bins over [0, 1] of all allowed weights.
    pub histogram: [u64; 20],
}

pub fn head_score_stats(out: &AttentionOutput) -> Vec<HeadScoreStats> {
    out.heads
        .iter()
        .map(|h| weight_stats(h.weights.view(), &out.mask))
        .collect()
}

/// Statistics of one weight matrix under `mask`.
pub fn weight_stats(weights: ArrayView2<f64>, mask: &AttentionMask) -> HeadScoreStats {
    let mut histogram = [0u64; 20];
    let mut entropy_sum = 0.0;
    let mut zeros = 0usize;
    let mut allowed = 0usize;
    let mut rows_with_zero = 0usize;
    let mut row_buf = Vec::new();
    for (i, row) in weights.axis_iter(Axis(0)).enumerate() {
        row_buf.clear();
        for (j, &w) in row.iter().enumerate() {
            if mask.allowed[[i, j]] {
                row_buf.push(w);
                let bin = ((w * 20.0) as usize).min(19);
                histogram[bin] += 1;
            }
        }
        let row_zeros = row_buf.iter().filter(|&&w| w == 0.0).count();
        zeros += row_zeros;
        allowed += row_buf.len();
        if row_zeros > 0 {
            rows_with_zero += 1;
        }
        entropy_sum += tsallis_entropy_slice(&row_buf, 1.0).unwrap_or(0.0);
    }
    let rows = weights.nrows().max(1) as f64;
    HeadScoreStats {
        mean_entropy: entropy_sum / rows,
        zero_fraction: zeros as f64 / allowed.max(1) as f64,
        rows_with_zero_fraction: rows_with_zero as f64 / rows,
        histogram,
    }
}

/// Adds the positional encoding to `x` in place.
pub fn add_positional_encoding(x: &mut Array2<f64>) -> Result<()> {
    let pe = sinusoidal_pe(x.nrows(), x.ncols())?;
    *x += &pe;
    Ok(())
}
