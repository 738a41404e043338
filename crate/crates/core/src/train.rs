//! Desk-scale training harness.
//!
//! The synthetic task repeats each target token's embedding `r` times (plus
//! noise), so the gold alignment of output step `i` is frame `r·i`. The model
//! is one encoder self-attention layer with configurable per-head normalizers
//! followed by one decoder layer of monotonic heads:
//!
//! ```text
//! X  = frames + P_enc                      (position tables start sinusoidal)
//! H  = X + MultiHead(X)
//! M  = [H; e_end]                           (learned end-of-input frame)
//! s_i = E_dec[y_{i-1}] + P_i                 (teacher forcing, y_{-1} = BOS)
//! c_i^m = Σ_j a^m[i,j] V^m_j + ℓ^m_i V^m_end  (V^m = M W_v^m, ℓ = leftover)
//! logits_i = concat_m(c_i^m) W_o W_out + b_out
//! ```
//!
//! The loss is token cross-entropy plus the L1 penalty on selection
//! probabilities. Alignment labels are only used for evaluation.
//! Gradients are assembled by hand from the backward passes of the
//! attention and monotonic modules.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::{
    multi_head, multi_head_backward, sinusoidal_pe, uniform_matrix, weight_stats, AttentionMask, AttentionOutput,
    HeadNormalizerConfig, HeadScoreStats, ProjectionWeights,
};
use crate::error::{invalid, Error, Result};
use crate::monotonic::{
    energy_matrix, energy_matrix_backward, expected_alignment, expected_alignment_backward, head_l1_penalty,
    shallow_layers, AlignmentPath, EnergyForward, ExpectedAlignment, HeadSelection, MonotonicEnergyParams,
    MonotonicScan, SelectionProbabilities,
};

/// Standard deviation of the additive frame noise.
pub const FRAME_NOISE_STD: f64 = 0.1;

/// Fraction of generated samples held out for evaluation.
pub const EVAL_FRACTION: f64 = 0.1;

/// A synthetic copy task. In JSON, omitted fields take the copy-task
/// defaults and the seed comes from the enclosing run config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticTask {
    pub vocab_size: usize,
    /// Output length `U`.
    pub output_len: usize,
    /// Frames per token `r`; the input length is `r·U`.
    pub upsample: usize,
    pub samples: usize,
    #[serde(skip)]
    pub seed: u64,
    /// Width of each input frame (the model width).
    pub frame_dim: usize,
}

impl Default for SyntheticTask {
    fn default() -> Self {
        SyntheticTask::copy_task(0)
    }
}

impl SyntheticTask {
    /// The copy task: 16 tokens, 10 outputs, 2 frames per token, 2000 samples.
    pub fn copy_task(seed: u64) -> Self {
        SyntheticTask {
            vocab_size: 16,
            output_len: 10,
            upsample: 2,
            samples: 2000,
            seed,
            frame_dim: 32,
        }
    }

    pub fn input_len(&self) -> usize {
        self.upsample * self.output_len
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 || self.output_len == 0 || self.upsample == 0 || self.samples == 0 {
            return Err(Error::Config(
                "task needs vocab_size >= 2 and positive output_len, upsample, samples".into(),
            ));
        }
        if self.frame_dim == 0 || !self.frame_dim.is_multiple_of(2) {
            return Err(Error::Config("frame_dim must be even and positive".into()));
        }
        Ok(())
    }
}

/// One synthetic example.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `S × frame_dim`
    pub frames: Array2<f64>,
    pub tokens: Vec<usize>,
    /// Gold frame index per output step (0-based): `r·i`.
    pub gold: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    /// `vocab × frame_dim`
    pub embedding: Array2<f64>,
}

impl Dataset {
    /// Training / evaluation split: the last tenth (at least one sample) is
    /// held out. A single-sample dataset is used for both.
    pub fn split(&self) -> (&[Sample], &[Sample]) {
        let n = self.samples.len();
        if n < 2 {
            return (&self.samples, &self.samples);
        }
        let n_eval = ((n as f64 * EVAL_FRACTION).round() as usize).clamp(1, n - 1);
        self.samples.split_at(n - n_eval)
    }
}

pub fn gen_task(task: &SyntheticTask) -> Result<Dataset> {
    task.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(task.seed);
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    let noise = Normal::new(0.0, FRAME_NOISE_STD).expect("valid normal");
    let embedding = Array2::from_shape_fn((task.vocab_size, task.frame_dim), |_| unit.sample(&mut rng));
    let s_len = task.input_len();
    let samples = (0..task.samples)
        .map(|_| {
            let tokens: Vec<usize> = (0..task.output_len)
                .map(|_| rng.gen_range(0..task.vocab_size))
                .collect();
            let frames = Array2::from_shape_fn((s_len, task.frame_dim), |(j, k)| {
                embedding[[tokens[j / task.upsample], k]] + noise.sample(&mut rng)
            });
            let gold = (0..task.output_len).map(|i| i * task.upsample).collect();
            Sample { frames, tokens, gold }
        })
        .collect();
    Ok(Dataset { samples, embedding })
}

/// Fraction of steps whose predicted frame is within `tol` of gold.
/// The end sentinel always counts as a miss.
pub fn eval_alignment(predicted: &AlignmentPath, gold: &[usize], tol: usize) -> Result<f64> {
    if predicted.t.len() != gold.len() {
        return invalid(format!(
            "predicted path has {} steps but gold has {}",
            predicted.t.len(),
            gold.len()
        ));
    }
    if gold.is_empty() {
        return Ok(1.0);
    }
    let hits = predicted
        .t
        .iter()
        .zip(gold)
        .filter(|(t, &g)| matches!(t, Some(t) if t.abs_diff(g) <= tol))
        .count();
    Ok(hits as f64 / gold.len() as f64)
}

/// Optimisation and model settings. In JSON, omitted fields take the
/// defaults and the seed comes from the enclosing run config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Normalizer per encoder self-attention head.
    pub encoder_heads: Vec<HeadNormalizerConfig>,
    /// Number of monotonic heads in the decoder layer.
    pub monotonic_heads: usize,
    /// L1 coefficient on selection probabilities.
    pub lambda: f64,
    /// Decoder layers the L1 penalty applies to; defaults to the shallow half.
    pub l1_layers: Option<Vec<usize>>,
    /// Decoder layer tag of each monotonic head, used by the L1 layer filter.
    /// Defaults to every head in layer 0.
    pub head_layers: Option<Vec<usize>>,
    #[serde(skip)]
    pub seed: u64,
    /// Log α and the monitor loss every this many steps.
    pub log_every: usize,
    /// Disables encoder self-attention (H = X); used by the linear gradient check.
    pub encoder_attention: bool,
    /// Adds the encoder input back onto the self-attention output.
    pub encoder_residual: bool,
    /// Std of Gaussian noise added to monotonic energies during training,
    /// which pushes selection probabilities towards 0 or 1.
    pub energy_noise: f64,
}

fn default_true() -> bool {
    true
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            learning_rate: 1e-3,
            steps: 3000,
            batch_size: 32,
            encoder_heads: vec![
                HeadNormalizerConfig::Softmax,
                HeadNormalizerConfig::EntmaxAdaptive { pre: 0.0 },
            ],
            monotonic_heads: 2,
            lambda: 0.0,
            l1_layers: None,
            head_layers: None,
            seed: 0,
            log_every: 50,
            encoder_attention: true,
            encoder_residual: true,
            energy_noise: 2.0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self, d_model: usize) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 || self.log_every == 0 {
            return bad("batch_size and log_every must be positive");
        }
        if self.monotonic_heads == 0 || !d_model.is_multiple_of(self.monotonic_heads) {
            return bad("monotonic_heads must divide the model width");
        }
        if self.encoder_heads.is_empty() || !d_model.is_multiple_of(self.encoder_heads.len()) {
            return bad("the number of encoder heads must divide the model width");
        }
        for h in &self.encoder_heads {
            h.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad("lambda must be nonnegative");
        }
        if !(self.energy_noise.is_finite() && self.energy_noise >= 0.0) {
            return bad("energy_noise must be nonnegative");
        }
        if let Some(tags) = &self.head_layers {
            if tags.len() != self.monotonic_heads {
                return bad("head_layers needs one entry per monotonic head");
            }
        }
        Ok(())
    }

    fn head_layer_tags(&self) -> Vec<usize> {
        self.head_layers
            .clone()
            .unwrap_or_else(|| vec![0; self.monotonic_heads])
    }

    fn l1_layer_set(&self) -> BTreeSet<usize> {
        match &self.l1_layers {
            Some(layers) => layers.iter().copied().collect(),
            None => {
                let depth = self.head_layer_tags().iter().max().map_or(1, |&l| l + 1);
                shallow_layers(depth)
            }
        }
    }
}

/// One monotonic attention head with its value projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotonicHead {
    pub energy: MonotonicEnergyParams,
    /// `d_model × d_v`
    pub wv: Array2<f64>,
}

/// The trainable model. A gradient is stored in the same shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub vocab: usize,
    pub d_model: usize,
    /// Learned encoder position table, `max_frames × d_model`, initialised
    /// with the sinusoidal encoding.
    pub enc_pos: Array2<f64>,
    pub encoder: Option<ProjectionWeights>,
    #[serde(default = "default_true")]
    pub encoder_residual: bool,
    pub encoder_heads: Vec<HeadNormalizerConfig>,
    /// `(vocab + 1) × d_model`; the last row is BOS.
    pub dec_embed: Array2<f64>,
    /// Learned decoder position table, `max_steps × d_model`, initialised
    /// with the sinusoidal encoding.
    pub dec_pos: Array2<f64>,
    /// Learned end-of-input frame appended to the encoder output. A monotonic
    /// head that selects no real frame reads this one.
    pub end_frame: Array1<f64>,
    pub mono: Vec<MonotonicHead>,
    /// `(M·d_v) × d_model`
    pub wo_dec: Array2<f64>,
    /// `d_model × vocab`
    pub w_out: Array2<f64>,
    pub b_out: Array1<f64>,
}

/// Sizes fixed at construction time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub vocab: usize,
    pub d_model: usize,
    /// Longest input the position table covers.
    pub max_frames: usize,
    /// Longest output the position table covers.
    pub max_steps: usize,
}

impl ModelDims {
    pub fn for_task(task: &SyntheticTask) -> Self {
        ModelDims {
            vocab: task.vocab_size,
            d_model: task.frame_dim,
            max_frames: task.input_len(),
            max_steps: task.output_len,
        }
    }
}

impl ToyModel {
    pub fn new(cfg: &TrainerConfig, dims: ModelDims) -> Result<Self> {
        let ModelDims {
            vocab,
            d_model,
            max_frames,
            max_steps,
        } = dims;
        if max_steps == 0 || max_frames == 0 || vocab == 0 {
            return invalid("model dimensions must be positive");
        }
        cfg.validate(d_model)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let bound = 1.0 / (d_model as f64).sqrt();
        let encoder = if cfg.encoder_attention {
            Some(ProjectionWeights::random(d_model, cfg.encoder_heads.len(), &mut rng)?)
        } else {
            None
        };
        let dec_embed = uniform_matrix(vocab + 1, d_model, 1.0, &mut rng);
        let end_frame = uniform_matrix(1, d_model, 1.0, &mut rng).row(0).to_owned();
        let dec_pos = sinusoidal_pe(max_steps, d_model)?;
        let enc_pos = sinusoidal_pe(max_frames, d_model)?;
        let dv = d_model / cfg.monotonic_heads;
        let mono = (0..cfg.monotonic_heads)
            .map(|_| MonotonicHead {
                energy: MonotonicEnergyParams::random(d_model, d_model, d_model, &mut rng),
                wv: uniform_matrix(d_model, dv, bound, &mut rng),
            })
            .collect();
        let wo_dec = uniform_matrix(cfg.monotonic_heads * dv, d_model, bound, &mut rng);
        let w_out = uniform_matrix(d_model, vocab, bound, &mut rng);
        Ok(ToyModel {
            vocab,
            d_model,
            encoder,
            encoder_residual: cfg.encoder_residual,
            encoder_heads: cfg.encoder_heads.clone(),
            enc_pos,
            dec_embed,
            dec_pos,
            end_frame,
            mono,
            wo_dec,
            w_out,
            b_out: Array1::zeros(vocab),
        })
    }

    fn bos(&self) -> usize {
        self.vocab
    }

    /// α of every encoder head (1 for softmax kinds).
    pub fn alphas(&self) -> Vec<f64> {
        self.encoder_heads.iter().map(|h| h.alpha()).collect()
    }

    /// Indices of encoder heads with a learnable α.
    pub fn adaptive_heads(&self) -> Vec<usize> {
        self.encoder_heads
            .iter()
            .enumerate()
            .filter(|(_, h)| h.is_adaptive())
            .map(|(i, _)| i)
            .collect()
    }

    /// Every trainable tensor, flattened, in a fixed order.
    pub fn params(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = Vec::new();
        out.push(("enc.pos".into(), flat(&self.enc_pos)));
        if let Some(enc) = &self.encoder {
            for (h, m) in enc.wq.iter().enumerate() {
                out.push((format!("enc.wq.{h}"), flat(m)));
            }
            for (h, m) in enc.wk.iter().enumerate() {
                out.push((format!("enc.wk.{h}"), flat(m)));
            }
            for (h, m) in enc.wv.iter().enumerate() {
                out.push((format!("enc.wv.{h}"), flat(m)));
            }
            out.push(("enc.wo".into(), flat(&enc.wo)));
        }
        for (h, cfg) in self.encoder_heads.iter().enumerate() {
            if let HeadNormalizerConfig::EntmaxAdaptive { pre } = cfg {
                out.push((format!("enc.alpha_pre.{h}"), std::slice::from_ref(pre)));
            }
        }
        out.push(("dec.embed".into(), flat(&self.dec_embed)));
        out.push(("dec.pos".into(), flat(&self.dec_pos)));
        out.push(("dec.end_frame".into(), self.end_frame.as_slice().expect("contiguous")));
        for (m, head) in self.mono.iter().enumerate() {
            let e = &head.energy;
            out.push((format!("mono.{m}.ws"), flat(&e.ws)));
            out.push((format!("mono.{m}.wh"), flat(&e.wh)));
            out.push((format!("mono.{m}.b"), e.b.as_slice().expect("contiguous")));
            out.push((format!("mono.{m}.v"), e.v.as_slice().expect("contiguous")));
            out.push((format!("mono.{m}.g"), std::slice::from_ref(&e.g)));
            out.push((format!("mono.{m}.r"), std::slice::from_ref(&e.r)));
            out.push((format!("mono.{m}.wv"), flat(&head.wv)));
        }
        out.push(("dec.wo".into(), flat(&self.wo_dec)));
        out.push(("out.w".into(), flat(&self.w_out)));
        out.push(("out.b".into(), self.b_out.as_slice().expect("contiguous")));
        out
    }

    /// Mutable counterpart of [`ToyModel::params`], same order.
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        out.push(flat_mut(&mut self.enc_pos));
        if let Some(enc) = &mut self.encoder {
            for m in enc.wq.iter_mut() {
                out.push(flat_mut(m));
            }
            for m in enc.wk.iter_mut() {
                out.push(flat_mut(m));
            }
            for m in enc.wv.iter_mut() {
                out.push(flat_mut(m));
            }
            out.push(flat_mut(&mut enc.wo));
        }
        for cfg in self.encoder_heads.iter_mut() {
            if let HeadNormalizerConfig::EntmaxAdaptive { pre } = cfg {
                out.push(std::slice::from_mut(pre));
            }
        }
        out.push(flat_mut(&mut self.dec_embed));
        out.push(flat_mut(&mut self.dec_pos));
        out.push(self.end_frame.as_slice_mut().expect("contiguous"));
        for head in self.mono.iter_mut() {
            let e = &mut head.energy;
            out.push(flat_mut(&mut e.ws));
            out.push(flat_mut(&mut e.wh));
            out.push(e.b.as_slice_mut().expect("contiguous"));
            out.push(e.v.as_slice_mut().expect("contiguous"));
            out.push(std::slice::from_mut(&mut e.g));
            out.push(std::slice::from_mut(&mut e.r));
            out.push(flat_mut(&mut head.wv));
        }
        out.push(flat_mut(&mut self.wo_dec));
        out.push(flat_mut(&mut self.w_out));
        out.push(self.b_out.as_slice_mut().expect("contiguous"));
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, p)| p.len()).sum()
    }

    /// A model-shaped container of zeros, used to accumulate gradients.
    pub fn zeros_like(&self) -> ToyModel {
        let mut g = self.clone();
        for p in g.params_mut() {
            p.fill(0.0);
        }
        g
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.params().into_iter().flat_map(|(_, p)| p.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, values: &[f64]) {
        let mut offset = 0;
        for p in self.params_mut() {
            let n = p.len();
            p.copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
    }

    fn encode(&self, frames: ArrayView2<f64>) -> Result<(Array2<f64>, Option<AttentionOutput>, Array2<f64>)> {
        if frames.nrows() == 0 || frames.nrows() > self.enc_pos.nrows() || frames.ncols() != self.d_model {
            return invalid(format!(
                "input is {}x{}, model takes up to {}x{}",
                frames.nrows(),
                frames.ncols(),
                self.enc_pos.nrows(),
                self.d_model
            ));
        }
        let x = &frames + &self.enc_pos.slice(s![..frames.nrows(), ..]);
        match &self.encoder {
            Some(enc) => {
                let mask = AttentionMask::full(x.nrows(), x.nrows());
                let out = multi_head(x.view(), enc, &self.encoder_heads, &mask)?;
                let h = if self.encoder_residual {
                    &x + &out.context
                } else {
                    out.context.clone()
                };
                Ok((x, Some(out), h))
            }
            None => {
                let h = x.clone();
                Ok((x, None, h))
            }
        }
    }

    /// Encoder output with the end-of-input frame appended.
    fn memory(&self, h: &Array2<f64>) -> Array2<f64> {
        let mut mem = Array2::zeros((h.nrows() + 1, h.ncols()));
        mem.slice_mut(s![..h.nrows(), ..]).assign(h);
        mem.row_mut(h.nrows()).assign(&self.end_frame);
        mem
    }

    pub fn max_steps(&self) -> usize {
        self.dec_pos.nrows()
    }

    fn check_steps(&self, steps: usize) -> Result<()> {
        if steps > self.max_steps() {
            return invalid(format!(
                "model decodes at most {} steps, asked for {steps}",
                self.max_steps()
            ));
        }
        Ok(())
    }

    /// Decoder states: previous-token embedding plus the step's position row.
    fn states(&self, tokens: &[usize]) -> Result<Array2<f64>> {
        self.check_steps(tokens.len())?;
        let mut states = self.dec_pos.slice(s![..tokens.len(), ..]).to_owned();
        for i in 0..tokens.len() {
            let prev = if i == 0 { self.bos() } else { tokens[i - 1] };
            let mut row = states.row_mut(i);
            row += &self.dec_embed.row(prev);
        }
        Ok(states)
    }

    /// Teacher-forced forward pass on one sample.
    pub fn forward(&self, sample: &Sample, penalty: &PenaltySpec) -> Result<Forward> {
        self.forward_noisy(sample, penalty, None)
    }

    /// Forward pass with optional `(rng, std)` energy noise.
    pub fn forward_noisy(
        &self,
        sample: &Sample,
        penalty: &PenaltySpec,
        mut noise: Option<(&mut ChaCha8Rng, f64)>,
    ) -> Result<Forward> {
        let (x, enc, h) = self.encode(sample.frames.view())?;
        let memory = self.memory(&h);
        let states = self.states(&sample.tokens)?;
        let u = sample.tokens.len();
        let dv = self.wo_dec.nrows() / self.mono.len();
        let mut concat = Array2::zeros((u, self.mono.len() * dv));
        let mut heads = Vec::with_capacity(self.mono.len());
        for (m, head) in self.mono.iter().enumerate() {
            let energy = energy_matrix(states.view(), memory.view(), &head.energy)?;
            let probs = match noise.as_mut() {
                Some((rng, std)) if *std > 0.0 => {
                    let dist = Normal::new(0.0, *std).expect("valid normal");
                    let noisy = energy.energies.mapv(|e| e + dist.sample(&mut **rng));
                    SelectionProbabilities::from_energies(noisy.view())
                }
                _ => SelectionProbabilities::from_energies(energy.energies.view()),
            };
            let ea = expected_alignment(&probs);
            let values = memory.dot(&head.wv);
            let ctx = expected_context(&ea, &values);
            concat.slice_mut(s![.., m * dv..(m + 1) * dv]).assign(&ctx);
            heads.push(MonoForward {
                energy,
                probs,
                ea,
                values,
            });
        }
        let pen = penalty.value(&heads.iter().map(|h| &h.probs).collect::<Vec<_>>())?;
        let o = concat.dot(&self.wo_dec);
        let logits = o.dot(&self.w_out) + &self.b_out;
        let mut softmax = logits.clone();
        let mut ce = 0.0;
        let mut correct = 0;
        for (i, mut row) in softmax.axis_iter_mut(Axis(0)).enumerate() {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|z| (z - m).exp());
            let sum = row.sum();
            row /= sum;
            ce -= row[sample.tokens[i]].ln();
            let argmax = argmax(row.view());
            if argmax == sample.tokens[i] {
                correct += 1;
            }
        }
        ce /= u as f64;
        Ok(Forward {
            x,
            enc,
            memory,
            states,
            heads,
            concat,
            o,
            softmax,
            ce,
            penalty: pen,
            correct,
        })
    }

    /// Accumulates `scale · ∂loss/∂θ` of one sample into `grads`.
    pub fn backward(
        &self,
        sample: &Sample,
        fwd: &Forward,
        penalty: &PenaltySpec,
        scale: f64,
        grads: &mut ToyModel,
    ) -> Result<()> {
        let u = sample.tokens.len() as f64;
        let mut dlogits = fwd.softmax.clone();
        for (i, &t) in sample.tokens.iter().enumerate() {
            dlogits[[i, t]] -= 1.0;
        }
        dlogits *= scale / u;
        grads.w_out += &fwd.o.t().dot(&dlogits);
        grads.b_out += &dlogits.sum_axis(Axis(0));
        let d_o = dlogits.dot(&self.w_out.t());
        grads.wo_dec += &fwd.concat.t().dot(&d_o);
        let d_concat = d_o.dot(&self.wo_dec.t());
        let dv = self.wo_dec.nrows() / self.mono.len();
        let mut d_mem = Array2::<f64>::zeros(fwd.memory.dim());
        let mut d_states = Array2::<f64>::zeros(fwd.states.dim());
        for (m, (head, hf)) in self.mono.iter().zip(&fwd.heads).enumerate() {
            let d_ctx = d_concat.slice(s![.., m * dv..(m + 1) * dv]);
            // leftover mass reads the last frame; ℓ_i = 1 − Σ_j a[i, j]
            let last = hf.values.nrows() - 1;
            let d_left = d_ctx.dot(&hf.values.row(last));
            let mut d_a = d_ctx.dot(&hf.values.t());
            d_a -= &d_left.insert_axis(Axis(1));
            let mut d_values = hf.ea.a.t().dot(&d_ctx);
            let left = Array1::from(hf.ea.leftover.clone());
            let mut d_last = d_values.row_mut(last);
            d_last += &d_ctx.t().dot(&left);
            grads.mono[m].wv += &fwd.memory.t().dot(&d_values);
            d_mem += &d_values.dot(&head.wv.t());
            let mut d_p = expected_alignment_backward(&hf.probs, &hf.ea, d_a.view())?;
            if penalty.applies(m) {
                d_p += penalty.lambda * scale;
            }
            let p = hf.probs.as_array();
            let d_e = &d_p * &p.mapv(|x| x * (1.0 - x));
            let eg = energy_matrix_backward(
                fwd.states.view(),
                fwd.memory.view(),
                &head.energy,
                &hf.energy,
                d_e.view(),
            )?;
            let ge = &mut grads.mono[m].energy;
            ge.ws += &eg.ws;
            ge.wh += &eg.wh;
            ge.b += &eg.b;
            ge.v += &eg.v;
            ge.g += eg.g;
            ge.r += eg.r;
            d_mem += &eg.d_frames;
            d_states += &eg.d_states;
        }
        let s_len = fwd.memory.nrows() - 1;
        grads.end_frame += &d_mem.row(s_len);
        let d_h = d_mem.slice(s![..s_len, ..]);
        let mut d_pos = grads.dec_pos.slice_mut(s![..d_states.nrows(), ..]);
        d_pos += &d_states;
        for (i, row) in d_states.axis_iter(Axis(0)).enumerate() {
            let prev = if i == 0 { self.bos() } else { sample.tokens[i - 1] };
            let mut target = grads.dec_embed.row_mut(prev);
            target += &row;
        }
        let mut d_x = match (&self.encoder, self.encoder_residual) {
            (Some(_), false) => Array2::zeros(d_h.dim()),
            _ => d_h.to_owned(),
        };
        if let (Some(enc), Some(out)) = (&self.encoder, &fwd.enc) {
            let g = multi_head_backward(fwd.x.view(), enc, out, d_h)?;
            d_x += &g.dx;
            let ge = grads.encoder.as_mut().expect("gradient has an encoder");
            for h in 0..enc.heads() {
                ge.wq[h] += &g.dwq[h];
                ge.wk[h] += &g.dwk[h];
                ge.wv[h] += &g.dwv[h];
            }
            ge.wo += &g.dwo;
            for (cfg, d) in grads.encoder_heads.iter_mut().zip(&g.dalpha_pre) {
                if let HeadNormalizerConfig::EntmaxAdaptive { pre } = cfg {
                    *pre += d;
                }
            }
        }
        let mut d_pos = grads.enc_pos.slice_mut(s![..s_len, ..]);
        d_pos += &d_x;
        Ok(())
    }

    /// Mean loss and gradient over a batch.
    pub fn loss_and_grad(&self, batch: &[&Sample], penalty: &PenaltySpec) -> Result<(f64, ToyModel)> {
        self.loss_and_grad_noisy(batch, penalty, None)
    }

    pub fn loss_and_grad_noisy(
        &self,
        batch: &[&Sample],
        penalty: &PenaltySpec,
        mut noise: Option<(&mut ChaCha8Rng, f64)>,
    ) -> Result<(f64, ToyModel)> {
        let mut grads = self.zeros_like();
        let scale = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        for sample in batch {
            let fwd = self.forward_noisy(sample, penalty, noise.as_mut().map(|(r, s)| (&mut **r, *s)))?;
            loss += (fwd.ce + fwd.penalty) * scale;
            self.backward(sample, &fwd, penalty, scale, &mut grads)?;
        }
        Ok((loss, grads))
    }

    pub fn loss(&self, batch: &[&Sample], penalty: &PenaltySpec) -> Result<f64> {
        let mut loss = 0.0;
        for sample in batch {
            let fwd = self.forward(sample, penalty)?;
            loss += fwd.ce + fwd.penalty;
        }
        Ok(loss / batch.len() as f64)
    }

    /// Greedy decoding with hard (threshold) monotonic attention.
    pub fn greedy_decode(&self, frames: ArrayView2<f64>, steps: usize) -> Result<Decoded> {
        let (_, _, h) = self.encode(frames)?;
        let memory = self.memory(&h);
        let end = memory.nrows() - 1;
        let dv = self.wo_dec.nrows() / self.mono.len();
        let values: Vec<Array2<f64>> = self.mono.iter().map(|m| memory.dot(&m.wv)).collect();
        let mut scans = vec![MonotonicScan::default(); self.mono.len()];
        let mut paths = vec![Vec::with_capacity(steps); self.mono.len()];
        let mut tokens = Vec::with_capacity(steps);
        self.check_steps(steps)?;
        let mut prev = self.bos();
        for i in 0..steps {
            let state = &self.dec_embed.slice(s![prev..prev + 1, ..]) + &self.dec_pos.slice(s![i..i + 1, ..]);
            let state = state.view();
            let mut concat = Array1::zeros(self.mono.len() * dv);
            for (m, head) in self.mono.iter().enumerate() {
                let e = energy_matrix(state, memory.view(), &head.energy)?;
                let p = SelectionProbabilities::from_energies(e.energies.view());
                let t = scans[m].threshold_step(p.as_array().row(0));
                paths[m].push(t);
                let j = t.unwrap_or(end);
                concat.slice_mut(s![m * dv..(m + 1) * dv]).assign(&values[m].row(j));
            }
            let logits = concat.dot(&self.wo_dec).dot(&self.w_out) + &self.b_out;
            prev = argmax(logits.view());
            tokens.push(prev);
        }
        Ok(Decoded {
            tokens,
            paths: paths.into_iter().map(|t| AlignmentPath { t }).collect(),
        })
    }

    /// Encoder self-attention weights per head for one input.
    pub fn encoder_attention(&self, frames: ArrayView2<f64>) -> Result<Option<AttentionOutput>> {
        Ok(self.encode(frames)?.1)
    }
}

/// Expected context under the hard decoding rule: rows that select no frame
/// fall back to the last memory slot.
fn expected_context(ea: &ExpectedAlignment, values: &Array2<f64>) -> Array2<f64> {
    let mut ctx = ea.a.dot(values);
    let last = values.row(values.nrows() - 1);
    for (mut row, &l) in ctx.axis_iter_mut(Axis(0)).zip(&ea.leftover) {
        row.scaled_add(l, &last);
    }
    ctx
}

fn flat(m: &Array2<f64>) -> &[f64] {
    m.as_slice().expect("parameters are stored contiguously")
}

fn flat_mut(m: &mut Array2<f64>) -> &mut [f64] {
    m.as_slice_mut().expect("parameters are stored contiguously")
}

fn argmax(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Which monotonic heads the L1 penalty applies to, and how strongly.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltySpec {
    pub lambda: f64,
    /// Layer tag per monotonic head.
    pub head_layers: Vec<usize>,
    pub layers: BTreeSet<usize>,
}

impl PenaltySpec {
    pub fn new(cfg: &TrainerConfig) -> Self {
        PenaltySpec {
            lambda: cfg.lambda,
            head_layers: cfg.head_layer_tags(),
            layers: cfg.l1_layer_set(),
        }
    }

    pub fn none(heads: usize) -> Self {
        PenaltySpec {
            lambda: 0.0,
            head_layers: vec![0; heads],
            layers: BTreeSet::new(),
        }
    }

    fn applies(&self, head: usize) -> bool {
        self.lambda > 0.0 && self.head_layers.get(head).is_some_and(|l| self.layers.contains(l))
    }

    fn value(&self, probs: &[&SelectionProbabilities]) -> Result<f64> {
        let heads: Vec<HeadSelection<'_>> = probs
            .iter()
            .zip(&self.head_layers)
            .map(|(p, &layer)| HeadSelection { layer, probs: p })
            .collect();
        head_l1_penalty(&heads, self.lambda, &self.layers)
    }
}

/// Per-head cache of the monotonic decoder.
#[derive(Debug, Clone)]
pub struct MonoForward {
    pub energy: EnergyForward,
    pub probs: SelectionProbabilities,
    pub ea: ExpectedAlignment,
    pub values: Array2<f64>,
}

/// Cache of a teacher-forced forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    x: Array2<f64>,
    pub enc: Option<AttentionOutput>,
    /// Encoder output plus the end-of-input frame.
    pub memory: Array2<f64>,
    states: Array2<f64>,
    pub heads: Vec<MonoForward>,
    concat: Array2<f64>,
    o: Array2<f64>,
    softmax: Array2<f64>,
    pub ce: f64,
    pub penalty: f64,
    pub correct: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub tokens: Vec<usize>,
    /// One hard path per monotonic head.
    pub paths: Vec<AlignmentPath>,
}

/// Adam with the β values used for the full-scale models; constant step size.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl Adam {
    pub fn new(lr: f64, n: usize) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
        }
    }
}

/// One logged point of a run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub step: usize,
    pub loss: f64,
    /// α of each adaptive encoder head, in head order.
    pub alphas: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum RunStatus {
    Converged,
    Diverged { step: usize },
}

/// Evaluation of a model on held-out samples.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub token_accuracy: f64,
    /// Best per-head alignment accuracy (tolerance 1).
    pub alignment_accuracy: f64,
    pub head_alignment_accuracy: Vec<f64>,
    /// Mean teacher-forced selection probability over all (step, frame) pairs.
    pub head_mean_selection: Vec<f64>,
    /// Encoder self-attention statistics per head, over all evaluated rows.
    pub encoder_stats: Vec<HeadScoreStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainingTrace {
    /// Encoder head index of each α column.
    pub alpha_heads: Vec<usize>,
    pub rows: Vec<TraceRow>,
    pub status: RunStatus,
    pub eval: Option<EvalReport>,
}

impl TrainingTrace {
    pub fn token_accuracy(&self) -> f64 {
        self.eval.as_ref().map_or(0.0, |e| e.token_accuracy)
    }

    pub fn alignment_accuracy(&self) -> f64 {
        self.eval.as_ref().map_or(0.0, |e| e.alignment_accuracy)
    }

    pub fn head_mean_selection(&self) -> Vec<f64> {
        self.eval
            .as_ref()
            .map_or_else(Vec::new, |e| e.head_mean_selection.clone())
    }
}

#[derive(Debug, Clone)]
pub struct TrainingRun {
    pub trace: TrainingTrace,
    pub model: ToyModel,
}

/// Samples used to log the loss, fixed for the whole run.
const MONITOR_SAMPLES: usize = 64;

pub fn train(cfg: &TrainerConfig, task: &SyntheticTask) -> Result<TrainingRun> {
    let data = gen_task(task)?;
    train_on(cfg, task, &data)
}

pub fn train_on(cfg: &TrainerConfig, task: &SyntheticTask, data: &Dataset) -> Result<TrainingRun> {
    task.validate()?;
    let mut model = ToyModel::new(cfg, ModelDims::for_task(task))?;
    let penalty = PenaltySpec::new(cfg);
    let (train_set, eval_set) = data.split();
    let monitor: Vec<&Sample> = train_set.iter().take(MONITOR_SAMPLES).collect();
    let alpha_heads = model.adaptive_heads();
    let mut rows = Vec::new();
    let log = |model: &ToyModel, step: usize, rows: &mut Vec<TraceRow>| -> Result<f64> {
        let loss = model.loss(&monitor, &penalty)?;
        let alphas = alpha_heads.iter().map(|&h| model.encoder_heads[h].alpha()).collect();
        rows.push(TraceRow { step, loss, alphas });
        Ok(loss)
    };
    let initial = log(&model, 0, &mut rows)?;
    if !initial.is_finite() {
        return Ok(diverged(alpha_heads, rows, 0, model));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_ba7c);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0015_e000);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut cursor = order.len();
    let mut adam = Adam::new(cfg.learning_rate, model.param_count());
    let mut flat = model.to_flat();
    for step in 1..=cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&train_set[order[cursor]]);
            cursor += 1;
        }
        let (loss, grads) = model.loss_and_grad_noisy(&batch, &penalty, Some((&mut noise_rng, cfg.energy_noise)))?;
        let g = grads.to_flat();
        if !loss.is_finite() || g.iter().any(|x| !x.is_finite()) {
            return Ok(diverged(alpha_heads, rows, step, model));
        }
        adam.step(&mut flat, &g);
        model.set_flat(&flat);
        if step % cfg.log_every == 0 || step == cfg.steps {
            let l = log(&model, step, &mut rows)?;
            if !l.is_finite() {
                return Ok(diverged(alpha_heads, rows, step, model));
            }
        }
    }
    let eval = evaluate(&model, eval_set)?;
    Ok(TrainingRun {
        trace: TrainingTrace {
            alpha_heads,
            rows,
            status: RunStatus::Converged,
            eval: Some(eval),
        },
        model,
    })
}

fn diverged(alpha_heads: Vec<usize>, rows: Vec<TraceRow>, step: usize, model: ToyModel) -> TrainingRun {
    TrainingRun {
        trace: TrainingTrace {
            alpha_heads,
            rows,
            status: RunStatus::Diverged { step },
            eval: None,
        },
        model,
    }
}

/// Greedy token accuracy, hard-path alignment accuracy, selection statistics
/// and encoder attention statistics on `samples`.
pub fn evaluate(model: &ToyModel, samples: &[Sample]) -> Result<EvalReport> {
    let heads = model.mono.len();
    let mut correct = 0usize;
    let mut total = 0usize;
    let mut align = vec![0.0; heads];
    let mut selection = vec![0.0; heads];
    let penalty = PenaltySpec::none(heads);
    let n_enc = model.encoder_heads.len();
    let mut stacked: Vec<Vec<Array2<f64>>> = vec![Vec::new(); n_enc];
    for sample in samples {
        let dec = model.greedy_decode(sample.frames.view(), sample.tokens.len())?;
        correct += dec.tokens.iter().zip(&sample.tokens).filter(|(a, b)| a == b).count();
        total += sample.tokens.len();
        for (m, path) in dec.paths.iter().enumerate() {
            align[m] += eval_alignment(path, &sample.gold, 1)?;
        }
        let fwd = model.forward(sample, &penalty)?;
        for (m, hf) in fwd.heads.iter().enumerate() {
            selection[m] += hf.probs.mean();
        }
        if let Some(enc) = &fwd.enc {
            for (h, head) in enc.heads.iter().enumerate() {
                stacked[h].push(head.weights.clone());
            }
        }
    }
    let n = samples.len().max(1) as f64;
    align.iter_mut().for_each(|a| *a /= n);
    selection.iter_mut().for_each(|s| *s /= n);
    let encoder_stats = stacked
        .iter()
        .filter(|w| !w.is_empty())
        .map(|ws| {
            let views: Vec<_> = ws.iter().map(|w| w.view()).collect();
            let all = ndarray::concatenate(Axis(0), &views).expect("equal widths");
            let mask = AttentionMask::full(all.nrows(), all.ncols());
            weight_stats(all.view(), &mask)
        })
        .collect();
    Ok(EvalReport {
        token_accuracy: correct as f64 / total.max(1) as f64,
        alignment_accuracy: align.iter().copied().fold(0.0, f64::max),
        head_alignment_accuracy: align,
        head_mean_selection: selection,
        encoder_stats,
    })
}

/// Which parameters a gradient check compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradcheckScope {
    /// Encoder attention disabled; only the linear read-out tensors are compared.
    LinearOnly,
    /// Every parameter, including α pre-parameters and energy parameters.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    /// Relative error per tensor: ‖analytic − fd‖ / max(‖analytic‖, ‖fd‖, 1e-8).
    pub per_tensor: BTreeMap<String, f64>,
    pub max_rel_err: f64,
    /// Coordinates compared / skipped because the perturbation changed an
    /// attention support set.
    pub checked: usize,
    pub skipped: usize,
}

/// Compares the manual backward pass with central finite differences of the
/// loss on a tiny task (width ≤ 8, at most 4 output steps).
pub fn gradcheck_model(
    cfg: &TrainerConfig,
    task: &SyntheticTask,
    eps: f64,
    scope: GradcheckScope,
) -> Result<GradcheckReport> {
    if task.frame_dim > 8 || task.output_len > 4 {
        return invalid("gradient check is meant for tiny models (width <= 8, U <= 4)");
    }
    let mut cfg = cfg.clone();
    if scope == GradcheckScope::LinearOnly {
        cfg.encoder_attention = false;
    }
    let data = gen_task(task)?;
    let mut model = ToyModel::new(&cfg, ModelDims::for_task(task))?;
    // move off the symmetric init so every path carries gradient
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(17));
    for p in model.params_mut() {
        for x in p.iter_mut() {
            *x += rng.gen_range(-0.3..0.3);
        }
    }
    let penalty = PenaltySpec::new(&cfg);
    let batch: Vec<&Sample> = data.samples.iter().take(2).collect();
    let (_, grads) = model.loss_and_grad(&batch, &penalty)?;
    let names: Vec<String> = model.params().into_iter().map(|(n, _)| n).collect();
    let analytic: Vec<Vec<f64>> = grads.params().into_iter().map(|(_, g)| g.to_vec()).collect();
    let base = model.to_flat();
    let supports = |m: &ToyModel| -> Result<Vec<Vec<bool>>> {
        let mut out = Vec::new();
        for s in &batch {
            if let Some(enc) = m.encoder_attention(s.frames.view())? {
                for h in &enc.heads {
                    out.push(h.weights.iter().map(|&w| w > 0.0).collect());
                }
            }
        }
        Ok(out)
    };
    let mut report = GradcheckReport {
        per_tensor: BTreeMap::new(),
        max_rel_err: 0.0,
        checked: 0,
        skipped: 0,
    };
    let mut offset = 0;
    let mut probe = model.clone();
    for (name, g) in names.iter().zip(&analytic) {
        let include = match scope {
            GradcheckScope::Full => true,
            GradcheckScope::LinearOnly => name.starts_with("out.") || name == "dec.wo",
        };
        if include {
            let mut diff = 0.0;
            let mut norm_a = 0.0;
            let mut norm_f = 0.0;
            for (k, &ga) in g.iter().enumerate() {
                let mut plus = base.clone();
                plus[offset + k] += eps;
                probe.set_flat(&plus);
                let lp = probe.loss(&batch, &penalty)?;
                let sp = supports(&probe)?;
                let mut minus = base.clone();
                minus[offset + k] -= eps;
                probe.set_flat(&minus);
                let lm = probe.loss(&batch, &penalty)?;
                let sm = supports(&probe)?;
                if sp != sm {
                    report.skipped += 1;
                    continue;
                }
                let fd = (lp - lm) / (2.0 * eps);
                diff += (ga - fd) * (ga - fd);
                norm_a += ga * ga;
                norm_f += fd * fd;
                report.checked += 1;
            }
            let rel = diff.sqrt() / norm_a.sqrt().max(norm_f.sqrt()).max(1e-8);
            report.max_rel_err = report.max_rel_err.max(rel);
            report.per_tensor.insert(name.clone(), rel);
        }
        offset += g.len();
    }
    Ok(report)
}
