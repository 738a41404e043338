//! Adaptive monotonic multi-head attention.
//!
//! For output step `i` a head scans encoder frames `j = t_{i-1}, t_{i-1}+1, …`,
//! scoring each with a monotonic energy `e_{i,j}` and selection probability
//! `p_{i,j} = σ(e_{i,j})`. At inference it stops at the first frame whose
//! Bernoulli decision fires and attends that frame. Training uses the expected
//! alignment, which marginalizes over every decision sequence:
//!
//! ```text
//! a[i,j] = p[i,j] · Σ_{k≤j} a[i−1,k] · Π_{l=k}^{j−1} (1 − p[i,l])
//! ```
//!
//! Redundant heads are pruned by an L1 penalty on their selection
//! probabilities.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::uniform_matrix;
use crate::error::{invalid, Result};
use crate::transforms::sigmoid;

/// Initial offset `r`: biases heads toward low selection probability early on.
pub const DEFAULT_ENERGY_OFFSET: f64 = -1.0;

/// Weights of `e = g · (v/‖v‖) · tanh(Wsᵀ s + Whᵀ h + b) + r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotonicEnergyParams {
    /// decoder-state width × d
    pub ws: Array2<f64>,
    /// encoder-state width × d
    pub wh: Array2<f64>,
    pub b: Array1<f64>,
    pub v: Array1<f64>,
    pub g: f64,
    pub r: f64,
}

impl MonotonicEnergyParams {
    pub fn random<R: Rng>(state_width: usize, enc_width: usize, d: usize, rng: &mut R) -> Self {
        let v_bound = 1.0 / (d as f64).sqrt();
        MonotonicEnergyParams {
            ws: uniform_matrix(state_width, d, 1.0 / (state_width as f64).sqrt(), rng),
            wh: uniform_matrix(enc_width, d, 1.0 / (enc_width as f64).sqrt(), rng),
            b: Array1::zeros(d),
            v: Array1::from_shape_fn(d, |_| rng.gen_range(-v_bound..=v_bound)),
            g: 1.0,
            r: DEFAULT_ENERGY_OFFSET,
        }
    }

    pub fn hidden(&self) -> usize {
        self.b.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.b.len();
        if self.ws.ncols() != d || self.wh.ncols() != d || self.v.len() != d {
            return invalid("energy parameters disagree on the hidden width");
        }
        let finite = self
            .ws
            .iter()
            .chain(self.wh.iter())
            .chain(self.b.iter())
            .chain(self.v.iter())
            .chain([&self.g, &self.r])
            .all(|x| x.is_finite());
        if !finite {
            return invalid("energy parameters must be finite");
        }
        if self.v.iter().all(|&x| x == 0.0) {
            return invalid("energy direction v must not be all zero");
        }
        Ok(())
    }

    fn unit_direction(&self) -> (Array1<f64>, f64) {
        let norm = self.v.dot(&self.v).sqrt();
        (&self.v / norm, norm)
    }
}

/// Energy of a single (decoder state, encoder frame) pair.
pub fn monotonic_energy(s_prev: ArrayView1<f64>, h_j: ArrayView1<f64>, params: &MonotonicEnergyParams) -> Result<f64> {
    params.validate()?;
    if s_prev.len() != params.ws.nrows() || h_j.len() != params.wh.nrows() {
        return invalid(format!(
            "state widths ({}, {}) do not match energy params ({}, {})",
            s_prev.len(),
            h_j.len(),
            params.ws.nrows(),
            params.wh.nrows()
        ));
    }
    let (v_hat, _) = params.unit_direction();
    let pre = s_prev.dot(&params.ws) + h_j.dot(&params.wh) + &params.b;
    Ok(params.g * v_hat.dot(&pre.mapv(f64::tanh)) + params.r)
}

/// Largest f64 below 1.
const P_MAX: f64 = 1.0 - f64::EPSILON / 2.0;

/// `σ(e)`, clamped to the open interval (0, 1) where f64 would round to 0 or 1.
pub fn selection_prob(e: f64) -> f64 {
    sigmoid(e).clamp(f64::MIN_POSITIVE, P_MAX)
}

/// Energies for every (output step, frame) pair with the cache for backward.
#[derive(Debug, Clone)]
pub struct EnergyForward {
    /// `U × S`
    pub energies: Array2<f64>,
    /// tanh activations, `U × S × d`
    act: Array3<f64>,
}

/// `energies[i, j] = e(states[i], frames[j])`.
pub fn energy_matrix(
    states: ArrayView2<f64>,
    frames: ArrayView2<f64>,
    params: &MonotonicEnergyParams,
) -> Result<EnergyForward> {
    params.validate()?;
    if states.ncols() != params.ws.nrows() || frames.ncols() != params.wh.nrows() {
        return invalid("state widths do not match energy params");
    }
    let (u, s, d) = (states.nrows(), frames.nrows(), params.hidden());
    let (v_hat, _) = params.unit_direction();
    let a = states.dot(&params.ws) + &params.b;
    let c = frames.dot(&params.wh);
    let mut act = Array3::zeros((u, s, d));
    let mut energies = Array2::zeros((u, s));
    for i in 0..u {
        for j in 0..s {
            let mut e = 0.0;
            for k in 0..d {
                let t = (a[[i, k]] + c[[j, k]]).tanh();
                act[[i, j, k]] = t;
                e += v_hat[k] * t;
            }
            energies[[i, j]] = params.g * e + params.r;
        }
    }
    Ok(EnergyForward { energies, act })
}

/// Gradients of the energy function.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyGrads {
    pub ws: Array2<f64>,
    pub wh: Array2<f64>,
    pub b: Array1<f64>,
    pub v: Array1<f64>,
    pub g: f64,
    pub r: f64,
    pub d_states: Array2<f64>,
    pub d_frames: Array2<f64>,
}

pub fn energy_matrix_backward(
    states: ArrayView2<f64>,
    frames: ArrayView2<f64>,
    params: &MonotonicEnergyParams,
    fwd: &EnergyForward,
    d_energies: ArrayView2<f64>,
) -> Result<EnergyGrads> {
    if d_energies.dim() != fwd.energies.dim() {
        return invalid("energy cotangent shape mismatch");
    }
    let (u, s) = fwd.energies.dim();
    let d = params.hidden();
    let (v_hat, v_norm) = params.unit_direction();
    let mut dv_hat = Array1::<f64>::zeros(d);
    let mut dg = 0.0;
    let mut da = Array2::<f64>::zeros((u, d));
    let mut dc = Array2::<f64>::zeros((s, d));
    for i in 0..u {
        for j in 0..s {
            let de = d_energies[[i, j]];
            if de == 0.0 {
                continue;
            }
            let mut dot = 0.0;
            for k in 0..d {
                let t = fwd.act[[i, j, k]];
                dot += v_hat[k] * t;
                dv_hat[k] += de * params.g * t;
                let dpre = de * params.g * v_hat[k] * (1.0 - t * t);
                da[[i, k]] += dpre;
                dc[[j, k]] += dpre;
            }
            dg += de * dot;
        }
    }
    let dv = (&dv_hat - &(&v_hat * v_hat.dot(&dv_hat))) / v_norm;
    Ok(EnergyGrads {
        ws: states.t().dot(&da),
        wh: frames.t().dot(&dc),
        b: da.sum_axis(Axis(0)),
        v: dv,
        g: dg,
        r: d_energies.sum(),
        d_states: da.dot(&params.ws.t()),
        d_frames: dc.dot(&params.wh.t()),
    })
}

/// Selection probabilities `p[i, j]` for `U` output steps over `S` frames.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionProbabilities {
    p: Array2<f64>,
}

impl SelectionProbabilities {
    /// Accepts any matrix with entries in [0, 1]; probabilities coming from
    /// [`SelectionProbabilities::from_energies`] are strictly inside.
    pub fn new(p: Array2<f64>) -> Result<Self> {
        if p.ncols() == 0 {
            return invalid("selection probabilities need at least one frame");
        }
        if p.iter().any(|x| !(0.0..=1.0).contains(x)) {
            return invalid("selection probabilities must lie in [0, 1]");
        }
        Ok(SelectionProbabilities { p })
    }

    pub fn from_energies(e: ArrayView2<f64>) -> Self {
        SelectionProbabilities {
            p: e.mapv(selection_prob),
        }
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.p
    }

    pub fn steps(&self) -> usize {
        self.p.nrows()
    }

    pub fn frames(&self) -> usize {
        self.p.ncols()
    }

    pub fn mean(&self) -> f64 {
        self.p.mean().unwrap_or(0.0)
    }
}

/// Attended frame per output step; `None` is the end sentinel (scan exhausted).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentPath {
    pub t: Vec<Option<usize>>,
}

impl AlignmentPath {
    /// Non-decreasing, with the sentinel ordered after every frame.
    pub fn is_monotone(&self) -> bool {
        self.t.windows(2).all(|w| match (w[0], w[1]) {
            (Some(a), Some(b)) => a <= b,
            (None, Some(_)) => false,
            _ => true,
        })
    }

    /// `c_i = h_{t_i}`, or the final frame when the scan was exhausted.
    pub fn contexts(&self, frames: ArrayView2<f64>) -> Result<Array2<f64>> {
        let s = frames.nrows();
        if s == 0 {
            return invalid("no encoder frames");
        }
        let mut out = Array2::zeros((self.t.len(), frames.ncols()));
        for (i, t) in self.t.iter().enumerate() {
            let j = t.unwrap_or(s - 1);
            if j >= s {
                return invalid(format!("alignment index {j} out of range for {s} frames"));
            }
            out.row_mut(i).assign(&frames.row(j));
        }
        Ok(out)
    }
}

/// How the Bernoulli decisions `z[i, j]` are taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    /// `z = 1` iff `p ≥ 0.5`.
    Threshold,
    /// `z ~ Bernoulli(p)` from a ChaCha8 stream seeded with `seed`.
    Sample { seed: u64 },
}

pub fn hard_monotonic_decode(p: &SelectionProbabilities, mode: DecodeMode) -> AlignmentPath {
    match mode {
        DecodeMode::Threshold => decode_with(p, |pij| pij >= 0.5),
        DecodeMode::Sample { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            decode_with(p, |pij| rng.gen::<f64>() < pij)
        }
    }
}

/// Sample-mode decoding with a caller-owned generator.
pub fn hard_monotonic_decode_with_rng<R: Rng>(p: &SelectionProbabilities, rng: &mut R) -> AlignmentPath {
    decode_with(p, |pij| rng.gen::<f64>() < pij)
}

fn decode_with(p: &SelectionProbabilities, mut fire: impl FnMut(f64) -> bool) -> AlignmentPath {
    let mut scan = MonotonicScan::default();
    let t = p.p.rows().into_iter().map(|row| scan.step(row, &mut fire)).collect();
    AlignmentPath { t }
}

/// Incremental form of the scan, for decoders that produce one row of
/// selection probabilities per output step.
#[derive(Debug, Clone, Default)]
pub struct MonotonicScan {
    start: usize,
    exhausted: bool,
}

impl MonotonicScan {
    /// Scans `row` from the previous stopping point; `None` once exhausted.
    pub fn step(&mut self, row: ArrayView1<f64>, mut fire: impl FnMut(f64) -> bool) -> Option<usize> {
        if self.exhausted {
            return None;
        }
        let hit = (self.start..row.len()).find(|&j| fire(row[j]));
        match hit {
            Some(j) => self.start = j,
            None => self.exhausted = true,
        }
        hit
    }

    pub fn threshold_step(&mut self, row: ArrayView1<f64>) -> Option<usize> {
        self.step(row, |p| p >= 0.5)
    }
}

/// Expected alignment and the mass that never triggered.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpectedAlignment {
    /// `U × S`
    pub a: Array2<f64>,
    /// Per-row probability that no frame was selected by step `i`.
    pub leftover: Vec<f64>,
    /// Mass arriving at each frame before its decision, `U × S` (backward cache).
    reach: Array2<f64>,
}

pub fn expected_alignment(p: &SelectionProbabilities) -> ExpectedAlignment {
    let (u, s) = p.p.dim();
    let mut a = Array2::zeros((u, s));
    let mut reach = Array2::zeros((u, s));
    let mut leftover = Vec::with_capacity(u);
    let mut prev = Array1::zeros(s);
    prev[0] = 1.0;
    let mut prev_left = 0.0;
    for i in 0..u {
        let mut q = 0.0;
        for j in 0..s {
            q = if j == 0 {
                prev[0]
            } else {
                (1.0 - p.p[[i, j - 1]]) * q + prev[j]
            };
            reach[[i, j]] = q;
            a[[i, j]] = p.p[[i, j]] * q;
        }
        let left = prev_left + (1.0 - p.p[[i, s - 1]]) * q;
        leftover.push(left);
        prev_left = left;
        prev = a.row(i).to_owned();
    }
    ExpectedAlignment { a, leftover, reach }
}

/// Reverse-mode pass of [`expected_alignment`]: returns dL/dp given dL/da.
pub fn expected_alignment_backward(
    p: &SelectionProbabilities,
    ea: &ExpectedAlignment,
    d_a: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    if d_a.dim() != p.p.dim() || ea.a.dim() != p.p.dim() {
        return invalid("expected-alignment cotangent shape mismatch");
    }
    let (u, s) = p.p.dim();
    let mut dp = Array2::zeros((u, s));
    // dL/da for the current row, including what flows back from the next row
    let mut da_row: Array1<f64> = Array1::zeros(s);
    for i in (0..u).rev() {
        for j in 0..s {
            da_row[j] += d_a[[i, j]];
        }
        let mut d_prev = Array1::zeros(s);
        let mut dq_next = 0.0;
        for j in (0..s).rev() {
            let pij = p.p[[i, j]];
            let q = ea.reach[[i, j]];
            let mut dq = da_row[j] * pij;
            let mut dpij = da_row[j] * q;
            if j + 1 < s {
                dq += dq_next * (1.0 - pij);
                dpij -= dq_next * q;
            }
            dp[[i, j]] = dpij;
            d_prev[j] = dq;
            dq_next = dq;
        }
        da_row = d_prev;
    }
    Ok(dp)
}

/// Selection probabilities of one head tagged with its decoder layer.
#[derive(Debug, Clone, Copy)]
pub struct HeadSelection<'a> {
    pub layer: usize,
    pub probs: &'a SelectionProbabilities,
}

/// `λ · Σ |p[i, j]|` over heads whose layer is in `layers`.
pub fn head_l1_penalty(heads: &[HeadSelection<'_>], lambda: f64, layers: &BTreeSet<usize>) -> Result<f64> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return invalid(format!("L1 coefficient must be nonnegative, got {lambda}"));
    }
    Ok(lambda
        * heads
            .iter()
            .filter(|h| layers.contains(&h.layer))
            .map(|h| h.probs.p.iter().map(|x| x.abs()).sum::<f64>())
            .sum::<f64>())
}

/// First half of `n_layers` decoder layers, rounded up.
pub fn shallow_layers(n_layers: usize) -> BTreeSet<usize> {
    (0..n_layers.div_ceil(2)).collect()
}
