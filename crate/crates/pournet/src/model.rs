//! Air-column regression model: a 2-layer LSTM encoder over fused feature
//! slices feeding a small MLP head, trained with mean squared height error
//! plus a hinge penalty on any predicted rise of the air column.
//!
//! Everything is implemented directly on flat `f64` buffers: forward,
//! exact backpropagation through time (including the per-clip batch-norm
//! statistics), Adam with global gradient-norm clipping, and a versioned
//! binary checkpoint. Training is deterministic for a fixed seed and thread
//! count; gradients reduce in clip order, so any thread count produces the
//! same bytes.

use std::io::{BufReader, BufWriter, Read as IoRead, Write as IoWrite};
use std::ops::Range;
use std::path::Path;

use rand::{Rng, RngExt};
use serde::{Deserialize, Serialize};

use crate::data::{FeatureMatrix, LabeledClip, FEATURE_ROWS, FT_ROWS};
use crate::dsp::SPECTROGRAM_BINS;
use crate::{seedmix, Error, Result};

/// Recurrent width of both LSTM layers and the head's hidden layer.
pub const HIDDEN: usize = 56;

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

// Seed stages under TrainConfig::seed (see seedmix).
const STAGE_INIT: u64 = 41;
const STAGE_SPLIT: u64 = 42;
const STAGE_SHUFFLE: u64 = 43;

/// Which sensor rows of the fused feature matrix the model consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// Full fused input: spectrogram plus force/torque.
    Mp,
    /// Audio-only: spectrogram rows.
    Ap,
    /// Force/torque-only rows.
    Ft,
}

impl Variant {
    pub fn input_rows(self) -> usize {
        match self {
            Variant::Mp => FEATURE_ROWS,
            Variant::Ap => SPECTROGRAM_BINS,
            Variant::Ft => FT_ROWS,
        }
    }

    /// Start of this variant's band within the fused 305-row matrix.
    pub fn row_offset(self) -> usize {
        match self {
            Variant::Mp | Variant::Ap => 0,
            Variant::Ft => SPECTROGRAM_BINS,
        }
    }

    /// Leading rows that get `log1p` before standardization (spectrogram
    /// magnitudes span orders of magnitude; F/T rows do not).
    pub fn log_rows(self) -> usize {
        match self {
            Variant::Mp | Variant::Ap => SPECTROGRAM_BINS,
            Variant::Ft => 0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Mp => "mp",
            Variant::Ap => "ap",
            Variant::Ft => "ft",
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "mp" => Ok(Variant::Mp),
            "ap" => Ok(Variant::Ap),
            "ft" => Ok(Variant::Ft),
            other => Err(Error::UnknownVariant(other.to_string())),
        }
    }

    fn tag(self) -> u8 {
        match self {
            Variant::Mp => 0,
            Variant::Ap => 1,
            Variant::Ft => 2,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Variant::Mp),
            1 => Some(Variant::Ap),
            2 => Some(Variant::Ft),
            _ => None,
        }
    }
}

/// Input and target standardization fitted on the training split and stored
/// with the parameters, so a checkpoint is self-contained.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    /// Per-row mean, after `log1p` on the first `log_rows` rows.
    pub mean: Vec<f64>,
    /// Per-row standard deviation, floored away from zero.
    pub std: Vec<f64>,
    pub log_rows: usize,
    /// Target affine: the head predicts in standardized units and the
    /// output maps back to millimetres. Pure reparameterization; the loss
    /// is computed in millimetres.
    pub target_mean: f64,
    pub target_std: f64,
}

impl NormStats {
    /// Pass-through stats (mean 0, std 1) for an untrained model.
    pub fn identity(rows: usize, log_rows: usize) -> Self {
        Self {
            mean: vec![0.0; rows],
            std: vec![1.0; rows],
            log_rows,
            target_mean: 0.0,
            target_std: 1.0,
        }
    }

    /// Fits per-row and target statistics over every slice of `clips`,
    /// reading only the variant's band of the fused matrix.
    pub fn fit(clips: &[LabeledClip], variant: Variant) -> Result<Self> {
        let refs: Vec<&LabeledClip> = clips.iter().collect();
        Self::fit_refs(&refs, variant)
    }

    /// Standardizes one raw column into `out`.
    fn apply(&self, raw: &[f64], out: &mut [f64]) {
        for (r, (&v, o)) in raw.iter().zip(out.iter_mut()).enumerate() {
            let v = if r < self.log_rows { v.ln_1p() } else { v };
            *o = (v - self.mean[r]) / self.std[r];
        }
    }
}

/// Offsets of each trainable tensor inside the flat parameter vector.
/// Order is fixed; the checkpoint format and optimizer state rely on it.
#[derive(Debug, Clone, PartialEq)]
struct Layout {
    l1_w: Range<usize>,
    l1_u: Range<usize>,
    l1_b: Range<usize>,
    l2_w: Range<usize>,
    l2_u: Range<usize>,
    l2_b: Range<usize>,
    fc1_w: Range<usize>,
    fc1_b: Range<usize>,
    gamma: Range<usize>,
    beta: Range<usize>,
    fc2_w: Range<usize>,
    fc2_b: Range<usize>,
}

impl Layout {
    fn new(input: usize, hidden: usize) -> Self {
        let mut at = 0usize;
        let mut take = |len: usize| {
            let r = at..at + len;
            at += len;
            r
        };
        let g = 4 * hidden;
        Self {
            l1_w: take(g * input),
            l1_u: take(g * hidden),
            l1_b: take(g),
            l2_w: take(g * hidden),
            l2_u: take(g * hidden),
            l2_b: take(g),
            fc1_w: take(hidden * hidden),
            fc1_b: take(hidden),
            gamma: take(hidden),
            beta: take(hidden),
            fc2_w: take(hidden),
            fc2_b: take(1),
        }
    }

    fn len(&self) -> usize {
        self.fc2_b.end
    }
}

/// Recurrent state of both LSTM layers, for streaming continuation.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h1: Vec<f64>,
    pub c1: Vec<f64>,
    pub h2: Vec<f64>,
    pub c2: Vec<f64>,
}

impl LstmState {
    fn zeros(hidden: usize) -> Self {
        Self {
            h1: vec![0.0; hidden],
            c1: vec![0.0; hidden],
            h2: vec![0.0; hidden],
            c2: vec![0.0; hidden],
        }
    }
}

/// Per-slice model output.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionTrace {
    /// Predicted air-column length per slice, mm.
    pub ha_hat: Vec<f64>,
    /// Recurrent features (second LSTM layer output) per slice, row-major
    /// `[slice * HIDDEN .. (slice + 1) * HIDDEN]`.
    pub a_h: Vec<f64>,
    /// State after the last slice, for streaming continuation.
    pub hidden_final: LstmState,
}

impl PredictionTrace {
    /// The 56 recurrent features for one slice.
    pub fn a_h_at(&self, slice: usize) -> &[f64] {
        &self.a_h[slice * HIDDEN..(slice + 1) * HIDDEN]
    }
}

/// The estimator: parameters, normalization, and batch-norm running stats.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    variant: Variant,
    hidden: usize,
    norm: NormStats,
    params: Vec<f64>,
    layout: Layout,
    /// Batch-norm running statistics (inference mode); not trained by the
    /// optimizer, updated with momentum during training.
    run_mean: Vec<f64>,
    run_var: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Model {
    /// Seeded initialization: orthogonal recurrent kernels, uniform fan-in
    /// input kernels, forget-gate bias 1, unit batch-norm scale.
    pub fn init(variant: Variant, seed: u64) -> Self {
        let hidden = HIDDEN;
        let input = variant.input_rows();
        let layout = Layout::new(input, hidden);
        let mut params = vec![0.0; layout.len()];
        let mut rng = seedmix::stream(seed, STAGE_INIT, 0);

        let mut uniform_fan_in = |range: &Range<usize>, fan_in: usize, params: &mut Vec<f64>| {
            let k = 1.0 / (fan_in as f64).sqrt();
            for v in &mut params[range.clone()] {
                *v = rng.random_range(-k..k);
            }
        };
        uniform_fan_in(&layout.l1_w, input, &mut params);
        uniform_fan_in(&layout.l2_w, hidden, &mut params);
        uniform_fan_in(&layout.fc1_w, hidden, &mut params);
        uniform_fan_in(&layout.fc1_b, hidden, &mut params);
        uniform_fan_in(&layout.fc2_w, hidden, &mut params);
        uniform_fan_in(&layout.fc2_b, hidden, &mut params);

        let mut rng = seedmix::stream(seed, STAGE_INIT, 1);
        orthogonal_gates(&mut params[layout.l1_u.clone()], hidden, &mut rng);
        orthogonal_gates(&mut params[layout.l2_u.clone()], hidden, &mut rng);

        // Forget-gate bias 1 keeps early memory; gate order is i, f, g, o.
        for layer in [&layout.l1_b, &layout.l2_b] {
            for v in &mut params[layer.start + hidden..layer.start + 2 * hidden] {
                *v = 1.0;
            }
        }
        for v in &mut params[layout.gamma.clone()] {
            *v = 1.0;
        }

        Self {
            variant,
            hidden,
            norm: NormStats::identity(input, variant.log_rows()),
            params,
            layout,
            run_mean: vec![0.0; hidden],
            run_var: vec![1.0; hidden],
        }
    }

    /// All parameters zero (and pass-through normalization); the base case
    /// for forward-path tests.
    #[cfg(test)]
    fn zeroed(variant: Variant) -> Self {
        let mut m = Self::init(variant, 0);
        m.params.iter_mut().for_each(|v| *v = 0.0);
        m.norm = NormStats::identity(variant.input_rows(), variant.log_rows());
        m
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn norm_stats(&self) -> &NormStats {
        &self.norm
    }

    pub fn set_norm_stats(&mut self, norm: NormStats) -> Result<()> {
        if norm.mean.len() != self.variant.input_rows() || norm.std.len() != norm.mean.len() {
            return Err(Error::InputWidth {
                expected: self.variant.input_rows(),
                got: norm.mean.len(),
            });
        }
        self.norm = norm;
        Ok(())
    }

    /// Number of trainable parameters.
    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn param(&self, index: usize) -> f64 {
        self.params[index]
    }

    pub fn set_param(&mut self, index: usize, value: f64) {
        self.params[index] = value;
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    fn tensor(&self, range: &Range<usize>) -> &[f64] {
        &self.params[range.clone()]
    }

    pub fn fresh_state(&self) -> LstmState {
        LstmState::zeros(self.hidden)
    }

    /// One LSTM step for a layer given flat kernels; writes the activated
    /// gates into `gates` (i, f, g, o blocks) and updates `h`/`c` in place.
    fn lstm_step(
        w: &[f64],
        u: &[f64],
        b: &[f64],
        x: &[f64],
        h: &mut [f64],
        c: &mut [f64],
        gates: &mut [f64],
        hidden: usize,
    ) {
        let input = x.len();
        for r in 0..4 * hidden {
            gates[r] = b[r] + dot(&w[r * input..(r + 1) * input], x)
                + dot(&u[r * hidden..(r + 1) * hidden], h);
        }
        let (ig, rest) = gates.split_at_mut(hidden);
        let (fg, rest) = rest.split_at_mut(hidden);
        let (gg, og) = rest.split_at_mut(hidden);
        for j in 0..hidden {
            ig[j] = sigmoid(ig[j]);
            fg[j] = sigmoid(fg[j]);
            gg[j] = gg[j].tanh();
            og[j] = sigmoid(og[j]);
            c[j] = fg[j] * c[j] + ig[j] * gg[j];
            h[j] = og[j] * c[j].tanh();
        }
    }

    /// Head in inference mode: running-stat batch norm.
    fn head_infer(&self, a_h: &[f64], z: &mut [f64]) -> f64 {
        let h = self.hidden;
        let fc1_w = self.tensor(&self.layout.fc1_w);
        let fc1_b = self.tensor(&self.layout.fc1_b);
        let gamma = self.tensor(&self.layout.gamma);
        let beta = self.tensor(&self.layout.beta);
        let fc2_w = self.tensor(&self.layout.fc2_w);
        let fc2_b = self.tensor(&self.layout.fc2_b)[0];
        let mut y = fc2_b;
        for j in 0..h {
            z[j] = fc1_b[j] + dot(&fc1_w[j * h..(j + 1) * h], a_h);
            let zhat = (z[j] - self.run_mean[j]) / (self.run_var[j] + BN_EPS).sqrt();
            let r = (gamma[j] * zhat + beta[j]).max(0.0);
            y += fc2_w[j] * r;
        }
        self.norm.target_mean + self.norm.target_std * y
    }

    /// Advances the recurrent state by one slice and returns the predicted
    /// air column, mm. `column` is one raw variant-width feature column.
    pub fn step(&self, state: &mut LstmState, column: &[f64]) -> Result<f64> {
        let input = self.variant.input_rows();
        if column.len() != input {
            return Err(Error::InputWidth { expected: input, got: column.len() });
        }
        if column.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: "feature column".into() });
        }
        let h = self.hidden;
        let mut x = vec![0.0; input];
        self.norm.apply(column, &mut x);
        let mut gates = vec![0.0; 4 * h];
        Self::lstm_step(
            self.tensor(&self.layout.l1_w),
            self.tensor(&self.layout.l1_u),
            self.tensor(&self.layout.l1_b),
            &x,
            &mut state.h1,
            &mut state.c1,
            &mut gates,
            h,
        );
        let h1 = state.h1.clone();
        Self::lstm_step(
            self.tensor(&self.layout.l2_w),
            self.tensor(&self.layout.l2_u),
            self.tensor(&self.layout.l2_b),
            &h1,
            &mut state.h2,
            &mut state.c2,
            &mut gates,
            h,
        );
        let mut z = vec![0.0; h];
        Ok(self.head_infer(&state.h2, &mut z))
    }

    /// Full-clip inference. The input must have exactly this variant's row
    /// count; slices are consumed in time order and the trace is causal
    /// (truncating the input truncates the trace, unchanged).
    pub fn predict(&self, features: &FeatureMatrix) -> Result<PredictionTrace> {
        let input = self.variant.input_rows();
        if features.rows() != input {
            return Err(Error::InputWidth { expected: input, got: features.rows() });
        }
        let mut state = self.fresh_state();
        let mut ha_hat = Vec::with_capacity(features.cols());
        let mut a_h = Vec::with_capacity(features.cols() * self.hidden);
        for t in 0..features.cols() {
            let ha = self.step(&mut state, features.column(t))?;
            ha_hat.push(ha);
            a_h.extend_from_slice(&state.h2);
        }
        Ok(PredictionTrace { ha_hat, a_h, hidden_final: state })
    }

    /// Inference on a fused 305-row clip matrix: extracts this variant's
    /// band and predicts. The dataset stores fused clips once; every
    /// variant reads its own rows.
    pub fn predict_fused(&self, fused: &FeatureMatrix) -> Result<PredictionTrace> {
        if fused.rows() != FEATURE_ROWS {
            return Err(Error::InputWidth { expected: FEATURE_ROWS, got: fused.rows() });
        }
        let band = fused.row_band(self.variant.row_offset(), self.variant.input_rows());
        self.predict(&band)
    }
}

/// Fills `u` (4 stacked `hidden x hidden` blocks) with per-gate orthogonal
/// matrices via Gram-Schmidt on seeded Gaussian rows.
fn orthogonal_gates<R: Rng>(u: &mut [f64], hidden: usize, rng: &mut R) {
    for gate in 0..4 {
        let block = &mut u[gate * hidden * hidden..(gate + 1) * hidden * hidden];
        for row in 0..hidden {
            loop {
                for v in &mut block[row * hidden..(row + 1) * hidden] {
                    *v = seedmix::gaussian(rng);
                }
                for prev in 0..row {
                    let proj = dot(
                        &block[row * hidden..(row + 1) * hidden],
                        &block[prev * hidden..(prev + 1) * hidden],
                    );
                    for j in 0..hidden {
                        block[row * hidden + j] -= proj * block[prev * hidden + j];
                    }
                }
                let norm = dot(
                    &block[row * hidden..(row + 1) * hidden],
                    &block[row * hidden..(row + 1) * hidden],
                )
                .sqrt();
                if norm > 1e-8 {
                    for v in &mut block[row * hidden..(row + 1) * hidden] {
                        *v /= norm;
                    }
                    break;
                }
            }
        }
    }
}

/// Mean squared error over slices, mm^2.
pub fn loss_height(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::PredictionLength { pred: pred.len(), truth: truth.len() });
    }
    if pred.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = pred.len() as f64;
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n)
}

/// Hinge penalty on any rise of the predicted air column over time:
/// `sum_t max(0, pred[t+1] - pred[t])`. Zero exactly when the prediction is
/// non-increasing; fewer than two slices contribute zero by convention.
pub fn loss_mono(pred: &[f64]) -> f64 {
    pred.windows(2).map(|w| (w[1] - w[0]).max(0.0)).sum()
}

/// Combined training loss: `loss_height + alpha * loss_mono`.
pub fn loss_total(pred: &[f64], truth: &[f64], alpha: f64) -> Result<f64> {
    Ok(loss_height(pred, truth)? + alpha * loss_mono(pred))
}

/// Everything the backward pass needs from one clip's training forward.
struct ClipCache {
    /// Normalized inputs, t-major.
    xs: Vec<f64>,
    /// Activated gates per layer, t-major blocks of 4*hidden.
    gates1: Vec<f64>,
    gates2: Vec<f64>,
    /// Cell states and tanh(cell) per layer, t-major.
    c1: Vec<f64>,
    tc1: Vec<f64>,
    h1: Vec<f64>,
    c2: Vec<f64>,
    tc2: Vec<f64>,
    h2: Vec<f64>,
    /// Head pre-norm activations, per-clip batch-norm stats, and post-ReLU.
    z: Vec<f64>, // t-major
    mu: Vec<f64>,
    var: Vec<f64>,
    zhat: Vec<f64>,  // t-major
    relu: Vec<f64>,  // t-major, post-ReLU value
    /// Standardized head output per slice.
    y: Vec<f64>,
    /// Final prediction, mm.
    ha: Vec<f64>,
}

impl Model {
    /// Training-mode forward over one clip (batch norm uses this clip's own
    /// over-time statistics). Returns the cache for backprop.
    fn forward_train(&self, features: &FeatureMatrix, t_len: usize) -> ClipCache {
        let h = self.hidden;
        let input = self.variant.input_rows();
        let off = self.variant.row_offset();
        let g = 4 * h;
        let mut cache = ClipCache {

            xs: vec![0.0; t_len * input],
            gates1: vec![0.0; t_len * g],
            gates2: vec![0.0; t_len * g],
            c1: vec![0.0; t_len * h],
            tc1: vec![0.0; t_len * h],
            h1: vec![0.0; t_len * h],
            c2: vec![0.0; t_len * h],
            tc2: vec![0.0; t_len * h],
            h2: vec![0.0; t_len * h],
            z: vec![0.0; t_len * h],
            mu: vec![0.0; h],
            var: vec![0.0; h],
            zhat: vec![0.0; t_len * h],
            relu: vec![0.0; t_len * h],
            y: vec![0.0; t_len],
            ha: vec![0.0; t_len],
        };
        let mut state = self.fresh_state();
        let full = features.rows() == FEATURE_ROWS && input != FEATURE_ROWS;
        for t in 0..t_len {
            let col = features.column(t);
            let raw = if full { &col[off..off + input] } else { col };
            let x = &mut cache.xs[t * input..(t + 1) * input];
            self.norm.apply(raw, x);

            Self::lstm_step(
                self.tensor(&self.layout.l1_w),
                self.tensor(&self.layout.l1_u),
                self.tensor(&self.layout.l1_b),
                x,
                &mut state.h1,
                &mut state.c1,
                &mut cache.gates1[t * g..(t + 1) * g],
                h,
            );
            cache.c1[t * h..(t + 1) * h].copy_from_slice(&state.c1);
            cache.h1[t * h..(t + 1) * h].copy_from_slice(&state.h1);
            for j in 0..h {
                cache.tc1[t * h + j] = state.c1[j].tanh();
            }

            let h1_t = cache.h1[t * h..(t + 1) * h].to_vec();
            Self::lstm_step(
                self.tensor(&self.layout.l2_w),
                self.tensor(&self.layout.l2_u),
                self.tensor(&self.layout.l2_b),
                &h1_t,
                &mut state.h2,
                &mut state.c2,
                &mut cache.gates2[t * g..(t + 1) * g],
                h,
            );
            cache.c2[t * h..(t + 1) * h].copy_from_slice(&state.c2);
            cache.h2[t * h..(t + 1) * h].copy_from_slice(&state.h2);
            for j in 0..h {
                cache.tc2[t * h + j] = state.c2[j].tanh();
            }

            let fc1_w = self.tensor(&self.layout.fc1_w);
            let fc1_b = self.tensor(&self.layout.fc1_b);
            for j in 0..h {
                cache.z[t * h + j] =
                    fc1_b[j] + dot(&fc1_w[j * h..(j + 1) * h], &cache.h2[t * h..(t + 1) * h]);
            }
        }

        // Per-clip batch norm over the time axis (biased variance).
        let tn = t_len as f64;
        for j in 0..self.hidden {
            let mut s = 0.0;
            let mut sq = 0.0;
            for t in 0..t_len {
                let v = cache.z[t * self.hidden + j];
                s += v;
                sq += v * v;
            }
            let mu = s / tn;
            cache.mu[j] = mu;
            cache.var[j] = (sq / tn - mu * mu).max(0.0);
        }
        let gamma = self.tensor(&self.layout.gamma);
        let beta = self.tensor(&self.layout.beta);
        let fc2_w = self.tensor(&self.layout.fc2_w);
        let fc2_b = self.tensor(&self.layout.fc2_b)[0];
        for t in 0..t_len {
            let mut y = fc2_b;
            for j in 0..self.hidden {
                let denom = (cache.var[j] + BN_EPS).sqrt();
                let zhat = (cache.z[t * self.hidden + j] - cache.mu[j]) / denom;
                cache.zhat[t * self.hidden + j] = zhat;
                let r = (gamma[j] * zhat + beta[j]).max(0.0);
                cache.relu[t * self.hidden + j] = r;
                y += fc2_w[j] * r;
            }
            cache.y[t] = y;
            cache.ha[t] = self.norm.target_mean + self.norm.target_std * y;
        }
        cache
    }

    /// Loss and exact gradient for one clip; accumulates scaled gradients
    /// into `grad` (same layout as `params`) with weight `scale`. Per-clip
    /// batch-norm statistics are returned for running-stat updates.
    fn clip_gradient(
        &self,
        clip: &LabeledClip,
        alpha: f64,
        scale: f64,
        grad: &mut [f64],
    ) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        let h = self.hidden;
        let input = self.variant.input_rows();
        let g = 4 * h;
        let t_len = clip.features.cols().min(clip.targets.len());
        if t_len == 0 {
            return Err(Error::EmptyDataset);
        }
        let cache = self.forward_train(&clip.features, t_len);

        let mse = loss_height(&cache.ha, &clip.targets[..t_len])?;
        let mono = loss_mono(&cache.ha);
        let loss = mse + alpha * mono;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                context: format!("loss for clip {} @ {:.3}s", clip.meta.source, clip.meta.start),
            });
        }

        // d loss / d ha per slice: MSE term plus the hinge on strict rises
        // (a rise of exactly zero contributes no gradient).
        let tn = t_len as f64;
        let mut dha = vec![0.0; t_len];
        for t in 0..t_len {
            dha[t] = 2.0 * (cache.ha[t] - clip.targets[t]) / tn;
        }
        for t in 0..t_len - 1 {
            if cache.ha[t + 1] > cache.ha[t] {
                dha[t + 1] += alpha;
                dha[t] -= alpha;
            }
        }

        // Head backward. BN statistics couple all slices, so first collect
        // d loss / d zhat, then distribute through mean and variance.
        let gamma = self.tensor(&self.layout.gamma);
        let fc2_w = self.tensor(&self.layout.fc2_w);
        let mut d_fc2_w = vec![0.0; h];
        let mut d_fc2_b = 0.0;
        let mut d_gamma = vec![0.0; h];
        let mut d_beta = vec![0.0; h];
        let mut dzhat = vec![0.0; t_len * h];
        for t in 0..t_len {
            let dy = self.norm.target_std * dha[t];
            d_fc2_b += dy;
            for j in 0..h {
                let r = cache.relu[t * h + j];
                d_fc2_w[j] += dy * r;
                if r > 0.0 {
                    let dq = dy * fc2_w[j];
                    d_gamma[j] += dq * cache.zhat[t * h + j];
                    d_beta[j] += dq;
                    dzhat[t * h + j] = dq * gamma[j];
                }
            }
        }
        // BN backward over the time axis, per feature.
        let mut dz = vec![0.0; t_len * h];
        for j in 0..h {
            let denom = (cache.var[j] + BN_EPS).sqrt();
            let mut sum_dzhat = 0.0;
            let mut sum_dzhat_zhat = 0.0;
            for t in 0..t_len {
                sum_dzhat += dzhat[t * h + j];
                sum_dzhat_zhat += dzhat[t * h + j] * cache.zhat[t * h + j];
            }
            for t in 0..t_len {
                dz[t * h + j] = (dzhat[t * h + j]
                    - sum_dzhat / tn
                    - cache.zhat[t * h + j] * sum_dzhat_zhat / tn)
                    / denom;
            }
        }
        // fc1 backward and d loss / d h2 per slice.
        let fc1_w = self.tensor(&self.layout.fc1_w);
        let mut d_fc1_w = vec![0.0; h * h];
        let mut d_fc1_b = vec![0.0; h];
        let mut dh2_head = vec![0.0; t_len * h];
        for t in 0..t_len {
            let h2_t = &cache.h2[t * h..(t + 1) * h];
            for j in 0..h {
                let d = dz[t * h + j];
                if d != 0.0 {
                    d_fc1_b[j] += d;
                    for k in 0..h {
                        d_fc1_w[j * h + k] += d * h2_t[k];
                        dh2_head[t * h + k] += d * fc1_w[j * h + k];
                    }
                }
            }
        }

        // BPTT through layer 2, producing d loss / d h1 per slice.
        let mut d_l2_w = vec![0.0; g * h];
        let mut d_l2_u = vec![0.0; g * h];
        let mut d_l2_b = vec![0.0; g];
        let mut dh1_from2 = vec![0.0; t_len * h];
        Self::bptt_layer(
            &cache.gates2,
            &cache.c2,
            &cache.tc2,
            &cache.h1,
            &cache.h2,
            &dh2_head,
            self.tensor(&self.layout.l2_u),
            self.tensor(&self.layout.l2_w),
            h,
            t_len,
            &mut d_l2_w,
            &mut d_l2_u,
            &mut d_l2_b,
            Some(&mut dh1_from2),
        );

        // BPTT through layer 1 (input gradients not needed).
        let mut d_l1_w = vec![0.0; g * input];
        let mut d_l1_u = vec![0.0; g * h];
        let mut d_l1_b = vec![0.0; g];
        Self::bptt_layer(
            &cache.gates1,
            &cache.c1,
            &cache.tc1,
            &cache.xs,
            &cache.h1,
            &dh1_from2,
            self.tensor(&self.layout.l1_u),
            self.tensor(&self.layout.l1_w),
            h,
            t_len,
            &mut d_l1_w,
            &mut d_l1_u,
            &mut d_l1_b,
            None,
        );

        // Accumulate in layout order.
        let l = &self.layout;
        let add = |grad: &mut [f64], range: &Range<usize>, src: &[f64]| {
            for (gslot, s) in grad[range.clone()].iter_mut().zip(src) {
                *gslot += scale * s;
            }
        };
        add(grad, &l.l1_w, &d_l1_w);
        add(grad, &l.l1_u, &d_l1_u);
        add(grad, &l.l1_b, &d_l1_b);
        add(grad, &l.l2_w, &d_l2_w);
        add(grad, &l.l2_u, &d_l2_u);
        add(grad, &l.l2_b, &d_l2_b);
        add(grad, &l.fc1_w, &d_fc1_w);
        add(grad, &l.fc1_b, &d_fc1_b);
        add(grad, &l.gamma, &d_gamma);
        add(grad, &l.beta, &d_beta);
        add(grad, &l.fc2_w, &d_fc2_w);
        grad[l.fc2_b.start] += scale * d_fc2_b;

        // Running stats follow the unbiased variance; the backward pass above
        // kept the biased one the normalization actually used.
        let t = t_len as f64;
        let var_unbiased = if t_len > 1 {
            cache.var.iter().map(|v| v * t / (t - 1.0)).collect()
        } else {
            cache.var
        };
        Ok((loss, cache.mu, var_unbiased))
    }

    /// Backward through one LSTM layer. `inputs` is the layer's input
    /// sequence (t-major, width `inputs.len() / t_len`), `h` its own hidden
    /// outputs, `dh_above` the gradient arriving at each h_t from later
    /// stages. Writes kernel gradients and, optionally, the gradient with
    /// respect to the inputs (needed to chain into the layer below).
    #[allow(clippy::too_many_arguments)]
    fn bptt_layer(
        gates: &[f64],
        c: &[f64],
        tc: &[f64],
        inputs: &[f64],
        h_seq: &[f64],
        dh_above: &[f64],
        u: &[f64],
        w: &[f64],
        hidden: usize,
        t_len: usize,
        d_w: &mut [f64],
        d_u: &mut [f64],
        d_b: &mut [f64],
        mut d_inputs: Option<&mut [f64]>,
    ) {
        let h = hidden;
        let g = 4 * h;
        let input = inputs.len() / t_len;
        let mut dh_next = vec![0.0; h];
        let mut dc_next = vec![0.0; h];
        let mut dpre = vec![0.0; g];
        for t in (0..t_len).rev() {
            let gt = &gates[t * g..(t + 1) * g];
            let (ig, rest) = gt.split_at(h);
            let (fg, rest) = rest.split_at(h);
            let (gg, og) = rest.split_at(h);
            let tct = &tc[t * h..(t + 1) * h];
            for j in 0..h {
                let dh = dh_above[t * h + j] + dh_next[j];
                let dc = dh * og[j] * (1.0 - tct[j] * tct[j]) + dc_next[j];
                let d_og = dh * tct[j];
                let d_ig = dc * gg[j];
                let d_gg = dc * ig[j];
                let cp = if t > 0 { c[(t - 1) * h + j] } else { 0.0 };
                let d_fg = dc * cp;
                dpre[j] = d_ig * ig[j] * (1.0 - ig[j]);
                dpre[h + j] = d_fg * fg[j] * (1.0 - fg[j]);
                dpre[2 * h + j] = d_gg * (1.0 - gg[j] * gg[j]);
                dpre[3 * h + j] = d_og * og[j] * (1.0 - og[j]);
                dc_next[j] = dc * fg[j];
            }

            let x_t = &inputs[t * input..(t + 1) * input];
            let h_prev = if t > 0 { &h_seq[(t - 1) * h..t * h] } else { &[] as &[f64] };
            dh_next.iter_mut().for_each(|v| *v = 0.0);
            let dx_t = d_inputs
                .as_deref_mut()
                .map(|d| &mut d[t * input..(t + 1) * input]);
            let mut dx_t = dx_t;
            for r in 0..g {
                let d = dpre[r];
                d_b[r] += d;
                if d == 0.0 {
                    continue;
                }
                for (slot, &xv) in d_w[r * input..(r + 1) * input].iter_mut().zip(x_t) {
                    *slot += d * xv;
                }
                if t > 0 {
                    for (slot, &hv) in d_u[r * h..(r + 1) * h].iter_mut().zip(h_prev) {
                        *slot += d * hv;
                    }
                }
                for (j, &uv) in u[r * h..(r + 1) * h].iter().enumerate() {
                    dh_next[j] += d * uv;
                }
                if let Some(dx) = dx_t.as_deref_mut() {
                    for (slot, &wv) in dx.iter_mut().zip(&w[r * input..(r + 1) * input]) {
                        *slot += d * wv;
                    }
                }
            }
        }
    }
}

/// Mean training-mode loss over a batch (per-clip batch-norm statistics),
/// with no side effects; the quantity `batch_gradient` differentiates.
pub fn batch_loss(model: &Model, clips: &[&LabeledClip], alpha: f64) -> Result<f64> {
    if clips.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut sum = 0.0;
    for clip in clips {
        let t_len = validate_clip(clip)?;
        let cache = model.forward_train(&clip.features, t_len);
        let loss = loss_total(&cache.ha, &clip.targets[..t_len], alpha)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                context: format!("loss for clip {} @ {:.3}s", clip.meta.source, clip.meta.start),
            });
        }
        sum += loss;
    }
    Ok(sum / clips.len() as f64)
}

fn validate_clip(clip: &LabeledClip) -> Result<usize> {
    if clip.features.rows() != FEATURE_ROWS {
        return Err(Error::InputWidth { expected: FEATURE_ROWS, got: clip.features.rows() });
    }
    if clip.targets.len() != clip.features.cols() {
        return Err(Error::PredictionLength {
            pred: clip.features.cols(),
            truth: clip.targets.len(),
        });
    }
    if clip.features.cols() == 0 {
        return Err(Error::EmptyDataset);
    }
    let finite = clip.features.data().iter().all(|v| v.is_finite())
        && clip.targets.iter().all(|v| v.is_finite());
    if !finite {
        return Err(Error::NonFinite {
            context: format!("clip {} @ {:.3}s", clip.meta.source, clip.meta.start),
        });
    }
    Ok(clip.features.cols())
}

/// Clips gradients computed concurrently in one window; keeps peak memory
/// bounded while the reduction stays in clip order (thread-count invariant).
const GRAD_WINDOW: usize = 32;

/// Mean loss and mean gradient of `loss_total` over the batch. Per-clip
/// gradients reduce in clip order regardless of `threads`, so results are
/// identical for any thread count.
pub fn batch_gradient(
    model: &Model,
    clips: &[&LabeledClip],
    alpha: f64,
    threads: usize,
) -> Result<(f64, Vec<f64>)> {
    let (loss, grad, _, _) = batch_gradient_stats(model, clips, alpha, threads)?;
    Ok((loss, grad))
}

/// As `batch_gradient`, also returning the batch-mean head batch-norm
/// statistics (mean and unbiased variance) for running-stat updates.
fn batch_gradient_stats(
    model: &Model,
    clips: &[&LabeledClip],
    alpha: f64,
    threads: usize,
) -> Result<(f64, Vec<f64>, Vec<f64>, Vec<f64>)> {
    if clips.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for clip in clips {
        validate_clip(clip)?;
    }
    let p = model.param_count();
    let h = model.hidden();
    let window = GRAD_WINDOW.min(clips.len());
    let mut slots: Vec<Vec<f64>> = (0..window).map(|_| vec![0.0; p]).collect();
    let mut results: Vec<Option<Result<(f64, Vec<f64>, Vec<f64>)>>> =
        (0..window).map(|_| None).collect();

    let mut grad = vec![0.0; p];
    let mut loss_sum = 0.0;
    let mut mu_sum = vec![0.0; h];
    let mut var_sum = vec![0.0; h];
    for group in clips.chunks(window) {
        let used = group.len();
        for slot in slots.iter_mut().take(used) {
            slot.iter_mut().for_each(|v| *v = 0.0);
        }
        if threads <= 1 {
            for (i, clip) in group.iter().enumerate() {
                results[i] = Some(model.clip_gradient(clip, alpha, 1.0, &mut slots[i]));
            }
        } else {
            let per = used.div_ceil(threads);
            let mut units: Vec<(&&LabeledClip, &mut Vec<f64>, &mut Option<_>)> = group
                .iter()
                .zip(slots.iter_mut())
                .zip(results.iter_mut())
                .map(|((c, s), r)| (c, s, r))
                .collect();
            std::thread::scope(|scope| {
                for chunk in units.chunks_mut(per) {
                    scope.spawn(|| {
                        for (clip, slot, result) in chunk.iter_mut() {
                            **result = Some(model.clip_gradient(clip, alpha, 1.0, slot));
                        }
                    });
                }
            });
        }
        for i in 0..used {
            let (loss, mu, var) = results[i]
                .take()
                .expect("every clip slot is filled")?;
            loss_sum += loss;
            for (acc, g) in grad.iter_mut().zip(&slots[i]) {
                *acc += g;
            }
            for j in 0..h {
                mu_sum[j] += mu[j];
                var_sum[j] += var[j];
            }
        }
    }
    let inv = 1.0 / clips.len() as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    mu_sum.iter_mut().for_each(|v| *v *= inv);
    var_sum.iter_mut().for_each(|v| *v *= inv);
    Ok((loss_sum * inv, grad, mu_sum, var_sum))
}

/// Scales the gradient so its global L2 norm is at most `max_norm`.
pub fn clip_gradient_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = dot(grad, grad).sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

/// Adaptive-moment optimizer state.
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    lr: f64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(param_count: usize, lr: f64) -> Self {
        Self { m: vec![0.0; param_count], v: vec![0.0; param_count], step: 0, lr }
    }

    fn update(&mut self, params: &mut [f64], grad: &[f64]) {
        self.step += 1;
        let b1t = 1.0 - Self::BETA1.powi(self.step as i32);
        let b2t = 1.0 - Self::BETA2.powi(self.step as i32);
        for i in 0..params.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grad[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
            let mhat = self.m[i] / b1t;
            let vhat = self.v[i] / b2t;
            params[i] -= self.lr * mhat / (vhat.sqrt() + Self::EPS);
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Weight of the monotonicity hinge in the combined loss.
    pub alpha: f64,
    /// Global gradient L2 norm cap, applied before the optimizer.
    pub clip_norm: f64,
    pub seed: u64,
    /// Fraction of clips held out for validation (clip-level split).
    pub val_fraction: f64,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch_size: 16,
            learning_rate: 1e-3,
            alpha: 0.01,
            clip_norm: 5.0,
            seed: 0,
            val_fraction: 0.1,
            threads: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_frac_under_5mm: f64,
}

pub struct TrainReport {
    pub model: Model,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

/// Writes the per-epoch training log.
pub fn write_train_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut out = String::from("epoch,train_loss,val_loss,val_frac_under_5mm\n");
    for row in log {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.4}\n",
            row.epoch, row.train_loss, row.val_loss, row.val_frac_under_5mm
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Inference-mode loss and below-5 mm slice fraction over a clip set.
fn holdout_metrics(model: &Model, clips: &[&LabeledClip], alpha: f64) -> Result<(f64, f64)> {
    let mut loss_sum = 0.0;
    let mut under = 0usize;
    let mut total = 0usize;
    for clip in clips {
        let trace = model.predict_fused(&clip.features)?;
        loss_sum += loss_total(&trace.ha_hat, &clip.targets, alpha)?;
        for (p, t) in trace.ha_hat.iter().zip(&clip.targets) {
            if (p - t).abs() < 5.0 {
                under += 1;
            }
            total += 1;
        }
    }
    Ok((loss_sum / clips.len() as f64, under as f64 / total as f64))
}

/// Trains a variant from scratch. Deterministic for a fixed seed and thread
/// count (and across thread counts, since gradient reduction is clip
/// ordered). Returns the best-validation checkpoint.
pub fn train(clips: &[LabeledClip], variant: Variant, cfg: &TrainConfig) -> Result<TrainReport> {
    if clips.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let bad = |key: &str, detail: String| Error::BadConfigValue { key: key.into(), detail };
    if cfg.alpha < 0.0 {
        return Err(bad("alpha", format!("{} must be non-negative", cfg.alpha)));
    }
    if cfg.learning_rate < 0.0 {
        return Err(bad("learning_rate", format!("{} must be non-negative", cfg.learning_rate)));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(bad("epochs/batch_size", "must be at least 1".into()));
    }
    if !(0.0..1.0).contains(&cfg.val_fraction) {
        return Err(bad("val_fraction", format!("{} outside [0,1)", cfg.val_fraction)));
    }
    for clip in clips {
        validate_clip(clip)?;
    }

    // Clip-level split, seeded; validation takes the tail of the shuffle.
    let n = clips.len();
    let mut order: Vec<usize> = (0..n).collect();
    shuffle(&mut order, &mut seedmix::stream(cfg.seed, STAGE_SPLIT, 0));
    let val_count = ((n as f64 * cfg.val_fraction).round() as usize).min(n - 1);
    let (train_idx, val_idx) = order.split_at(n - val_count);
    let train_idx = train_idx.to_vec();
    let val_refs: Vec<&LabeledClip> = val_idx.iter().map(|&i| &clips[i]).collect();

    let mut model = Model::init(variant, cfg.seed);
    let train_refs: Vec<&LabeledClip> = train_idx.iter().map(|&i| &clips[i]).collect();
    let norm = NormStats::fit_refs(&train_refs, variant)?;
    model.set_norm_stats(norm)?;

    let mut adam = Adam::new(model.param_count(), cfg.learning_rate);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, Vec<f64>, Vec<f64>, Vec<f64>)> = None;

    let mut epoch_order = train_idx.clone();
    for epoch in 0..cfg.epochs {
        shuffle(&mut epoch_order, &mut seedmix::stream(cfg.seed, STAGE_SHUFFLE, epoch as u64));
        let mut loss_weighted = 0.0;
        for batch in epoch_order.chunks(cfg.batch_size) {
            let refs: Vec<&LabeledClip> = batch.iter().map(|&i| &clips[i]).collect();
            let (loss, mut grad, mu, var) =
                batch_gradient_stats(&model, &refs, cfg.alpha, cfg.threads)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            loss_weighted += loss * refs.len() as f64;
            clip_gradient_norm(&mut grad, cfg.clip_norm);
            adam.update(&mut model.params, &grad);
            for j in 0..model.hidden {
                model.run_mean[j] = (1.0 - BN_MOMENTUM) * model.run_mean[j] + BN_MOMENTUM * mu[j];
                model.run_var[j] = (1.0 - BN_MOMENTUM) * model.run_var[j] + BN_MOMENTUM * var[j];
            }
        }
        let train_loss = loss_weighted / train_idx.len() as f64;
        // With no held-out clips the validation columns report the training
        // set (inference mode), so the log and best tracking stay defined.
        let (val_loss, val_frac) = if val_refs.is_empty() {
            holdout_metrics(&model, &train_refs, cfg.alpha)?
        } else {
            holdout_metrics(&model, &val_refs, cfg.alpha)?
        };
        log.push(EpochLog { epoch, train_loss, val_loss, val_frac_under_5mm: val_frac });
        if best.as_ref().is_none_or(|(_, b, _, _, _)| val_loss < *b) {
            best = Some((
                epoch,
                val_loss,
                model.params.clone(),
                model.run_mean.clone(),
                model.run_var.clone(),
            ));
        }
    }

    let (best_epoch, best_val_loss, params, run_mean, run_var) =
        best.expect("at least one epoch ran");
    model.params = params;
    model.run_mean = run_mean;
    model.run_var = run_var;
    Ok(TrainReport { model, log, best_epoch, best_val_loss })
}

impl NormStats {
    fn fit_refs(clips: &[&LabeledClip], variant: Variant) -> Result<Self> {
        let rows = variant.input_rows();
        let off = variant.row_offset();
        let log_rows = variant.log_rows();
        let mut sum = vec![0.0; rows];
        let mut sumsq = vec![0.0; rows];
        let mut t_sum = 0.0;
        let mut t_sumsq = 0.0;
        let mut count = 0usize;
        for clip in clips {
            if clip.features.rows() != FEATURE_ROWS {
                return Err(Error::InputWidth {
                    expected: FEATURE_ROWS,
                    got: clip.features.rows(),
                });
            }
            for t in 0..clip.features.cols() {
                let col = &clip.features.column(t)[off..off + rows];
                for (r, &raw) in col.iter().enumerate() {
                    let v = if r < log_rows { raw.ln_1p() } else { raw };
                    sum[r] += v;
                    sumsq[r] += v * v;
                }
                let target = clip.targets[t];
                t_sum += target;
                t_sumsq += target * target;
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::EmptyDataset);
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std: Vec<f64> = sumsq
            .iter()
            .zip(&mean)
            .map(|(sq, m)| ((sq / n - m * m).max(0.0)).sqrt().max(1e-6))
            .collect();
        let target_mean = t_sum / n;
        let target_std = ((t_sumsq / n - target_mean * target_mean).max(0.0))
            .sqrt()
            .max(1e-6);
        Ok(Self { mean, std, log_rows, target_mean, target_std })
    }
}

fn shuffle<R: Rng>(indices: &mut [usize], rng: &mut R) {
    for i in (1..indices.len()).rev() {
        let j = rng.random_range(0..=i as u64) as usize;
        indices.swap(i, j);
    }
}

/// Per-slice absolute errors (mm) over a clip set, concatenated in clip
/// order; inference mode.
pub fn slice_abs_errors(model: &Model, clips: &[&LabeledClip]) -> Result<Vec<f64>> {
    let mut errors = Vec::new();
    for clip in clips {
        let trace = model.predict_fused(&clip.features)?;
        if trace.ha_hat.len() != clip.targets.len() {
            return Err(Error::PredictionLength {
                pred: trace.ha_hat.len(),
                truth: clip.targets.len(),
            });
        }
        errors.extend(trace.ha_hat.iter().zip(&clip.targets).map(|(p, t)| (p - t).abs()));
    }
    Ok(errors)
}

/// Fraction of values strictly below `tol`.
pub fn frac_within(errors: &[f64], tol: f64) -> f64 {
    if errors.is_empty() {
        return 0.0;
    }
    errors.iter().filter(|e| **e < tol).count() as f64 / errors.len() as f64
}

/// Compares the analytic batch gradient against central finite differences
/// (epsilon 1e-4) at `probes` seeded parameter positions plus every tensor
/// boundary. Returns the maximum relative error.
pub fn finite_difference_check(
    model: &mut Model,
    clips: &[&LabeledClip],
    alpha: f64,
    probes: usize,
    seed: u64,
) -> Result<f64> {
    const STAGE_PROBE: u64 = 44;
    const EPS: f64 = 1e-4;
    let (_, grad) = batch_gradient(model, clips, alpha, 1)?;
    let l = model.layout.clone();
    let mut targets: Vec<usize> = Vec::new();
    for range in [
        &l.l1_w, &l.l1_u, &l.l1_b, &l.l2_w, &l.l2_u, &l.l2_b, &l.fc1_w, &l.fc1_b, &l.gamma,
        &l.beta, &l.fc2_w, &l.fc2_b,
    ] {
        targets.push(range.start);
        targets.push(range.start + (range.end - range.start) / 2);
        targets.push(range.end - 1);
    }
    let mut rng = seedmix::stream(seed, STAGE_PROBE, 0);
    for _ in 0..probes {
        targets.push(rng.random_range(0..model.param_count() as u64) as usize);
    }
    let mut worst = 0.0f64;
    for &i in &targets {
        let original = model.param(i);
        model.set_param(i, original + EPS);
        let up = batch_loss(model, clips, alpha)?;
        model.set_param(i, original - EPS);
        let down = batch_loss(model, clips, alpha)?;
        model.set_param(i, original);
        let fd = (up - down) / (2.0 * EPS);
        let rel = (grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1e-3);
        worst = worst.max(rel);
    }
    Ok(worst)
}

const MODEL_MAGIC: &[u8; 4] = b"PNCK";
const MODEL_VERSION: u32 = 1;

/// Sidecar manifest describing a checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub variant: String,
    pub input_rows: usize,
    pub hidden: usize,
    pub param_count: usize,
    pub config: TrainConfig,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub val_loss: f64,
    pub val_frac_under_5mm: f64,
}

/// Path of the JSON manifest that travels with a checkpoint.
pub fn model_manifest_path(path: &Path) -> std::path::PathBuf {
    path.with_extension("manifest.json")
}

pub fn write_model_manifest(path: &Path, manifest: &CheckpointManifest) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest)?;
    std::fs::write(model_manifest_path(path), text + "\n")?;
    Ok(())
}

pub fn read_model_manifest(path: &Path) -> Result<CheckpointManifest> {
    let text = std::fs::read_to_string(model_manifest_path(path))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_f64s(out: &mut impl IoWrite, values: &[f64]) -> std::io::Result<()> {
    for v in values {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_f64s(input: &mut impl IoRead, len: usize) -> std::io::Result<Vec<f64>> {
    let mut buf = vec![0u8; len * 8];
    input.read_exact(&mut buf)?;
    Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

/// Saves the model as a versioned little-endian binary checkpoint.
pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    out.write_all(MODEL_MAGIC)?;
    out.write_all(&MODEL_VERSION.to_le_bytes())?;
    out.write_all(&[model.variant.tag()])?;
    out.write_all(&(model.variant.input_rows() as u32).to_le_bytes())?;
    out.write_all(&(model.hidden as u32).to_le_bytes())?;
    out.write_all(&(model.norm.log_rows as u32).to_le_bytes())?;
    out.write_all(&model.norm.target_mean.to_le_bytes())?;
    out.write_all(&model.norm.target_std.to_le_bytes())?;
    out.write_all(&(model.params.len() as u64).to_le_bytes())?;
    write_f64s(&mut out, &model.params)?;
    write_f64s(&mut out, &model.norm.mean)?;
    write_f64s(&mut out, &model.norm.std)?;
    write_f64s(&mut out, &model.run_mean)?;
    write_f64s(&mut out, &model.run_var)?;
    out.flush()?;
    Ok(())
}

/// Loads a checkpoint saved by [`save_model`].
pub fn load_model(path: &Path) -> Result<Model> {
    let corrupt = |detail: &str| Error::Corrupt {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    };
    let mut input = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != MODEL_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found: magic,
            expected: *MODEL_MAGIC,
        });
    }
    let mut u32buf = [0u8; 4];
    input.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != MODEL_VERSION {
        return Err(Error::BadVersion {
            path: path.to_path_buf(),
            found: version,
            supported: MODEL_VERSION,
        });
    }
    let mut tag = [0u8; 1];
    input.read_exact(&mut tag)?;
    let variant = Variant::from_tag(tag[0]).ok_or_else(|| corrupt("unknown variant tag"))?;
    input.read_exact(&mut u32buf)?;
    let input_rows = u32::from_le_bytes(u32buf) as usize;
    input.read_exact(&mut u32buf)?;
    let hidden = u32::from_le_bytes(u32buf) as usize;
    input.read_exact(&mut u32buf)?;
    let log_rows = u32::from_le_bytes(u32buf) as usize;
    if input_rows != variant.input_rows() {
        return Err(corrupt("input rows do not match the variant"));
    }
    if hidden == 0 || hidden > 4096 {
        return Err(corrupt("implausible hidden width"));
    }
    if log_rows > input_rows {
        return Err(corrupt("log rows exceed input rows"));
    }
    let mut f64buf = [0u8; 8];
    input.read_exact(&mut f64buf)?;
    let target_mean = f64::from_le_bytes(f64buf);
    input.read_exact(&mut f64buf)?;
    let target_std = f64::from_le_bytes(f64buf);
    let mut u64buf = [0u8; 8];
    input.read_exact(&mut u64buf)?;
    let param_count = u64::from_le_bytes(u64buf) as usize;
    let layout = Layout::new(input_rows, hidden);
    if param_count != layout.len() {
        return Err(corrupt("parameter count does not match the layout"));
    }
    let params = read_f64s(&mut input, param_count)?;
    let mean = read_f64s(&mut input, input_rows)?;
    let std = read_f64s(&mut input, input_rows)?;
    let run_mean = read_f64s(&mut input, hidden)?;
    let run_var = read_f64s(&mut input, hidden)?;
    let mut rest = Vec::new();
    input.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(corrupt("trailing bytes after checkpoint payload"));
    }
    if params.iter().any(|v| !v.is_finite()) {
        return Err(corrupt("non-finite parameter"));
    }
    Ok(Model {
        variant,
        hidden,
        norm: NormStats { mean, std, log_rows, target_mean, target_std },
        params,
        layout,
        run_mean,
        run_var,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::SnrLevel;
    use crate::data::ClipMeta;
    use proptest::prelude::*;

    fn meta(name: &str) -> ClipMeta {
        ClipMeta {
            source: name.into(),
            container: "cup".into(),
            start: 0.0,
            snr: SnrLevel::Clean,
        }
    }

    /// A fused clip with smoothly decreasing targets. The targets leak into
    /// one spectrogram row and every force/torque row so there is signal to
    /// learn; everything else is seeded noise.
    fn micro_clip(name: &str, slices: usize, seed: u64) -> LabeledClip {
        let mut rng = seedmix::stream(seed, 90, 0);
        let mut features = FeatureMatrix::zeros(FEATURE_ROWS, slices);
        let start = 60.0 + rng.random::<f64>() * 60.0;
        let slope = 0.2 + rng.random::<f64>() * 0.5;
        let targets: Vec<f64> = (0..slices).map(|t| start - slope * t as f64).collect();
        for t in 0..slices {
            for r in 0..FEATURE_ROWS {
                let v = if r < SPECTROGRAM_BINS {
                    seedmix::gaussian(&mut rng).abs() * 0.1
                        + if r == 40 { targets[t] / 20.0 } else { 0.0 }
                } else {
                    seedmix::gaussian(&mut rng) * 0.05 + targets[t] / 50.0
                };
                features.set(r, t, v);
            }
        }
        LabeledClip { features, targets, meta: meta(name) }
    }

    #[test]
    fn height_loss_is_mean_squared_error() {
        let l = loss_height(&[1.0, 2.0], &[0.0, 0.0]).unwrap();
        assert!((l - 2.5).abs() < 1e-12);
        assert!(matches!(
            loss_height(&[1.0], &[1.0, 2.0]),
            Err(Error::PredictionLength { .. })
        ));
        assert!(matches!(loss_height(&[], &[]), Err(Error::EmptyDataset)));
    }

    #[test]
    fn mono_penalty_sums_rises_only() {
        assert_eq!(loss_mono(&[1.0, 3.0, 2.0]), 2.0);
        assert_eq!(loss_mono(&[0.0, 1.0, 0.0, 1.0]), 2.0);
        assert_eq!(loss_mono(&[3.0, 2.0, 2.0, 1.0]), 0.0);
        assert_eq!(loss_mono(&[5.0]), 0.0);
        assert_eq!(loss_mono(&[]), 0.0);
    }

    #[test]
    fn total_loss_decomposes_exactly() {
        let preds = [1.0, 3.0, 2.0];
        let targets = [0.0, 0.0, 0.0];
        let total = loss_total(&preds, &targets, 0.01).unwrap();
        let parts = loss_height(&preds, &targets).unwrap() + 0.01 * loss_mono(&preds);
        assert_eq!(total, parts);
        assert!((total - (14.0 / 3.0 + 0.02)).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn mono_is_zero_exactly_on_non_increasing_sequences(
            seq in proptest::collection::vec(-50.0f64..50.0, 0..40)
        ) {
            let zero = loss_mono(&seq) == 0.0;
            let non_increasing = seq.windows(2).all(|w| w[1] <= w[0]);
            prop_assert_eq!(zero, non_increasing);
        }
    }

    #[test]
    fn parameter_counts_match_the_architecture() {
        assert_eq!(Model::init(Variant::Mp, 0).param_count(), 109_761);
        assert_eq!(Model::init(Variant::Ap, 0).param_count(), 99_009);
        assert_eq!(Model::init(Variant::Ft, 0).param_count(), 52_193);
    }

    #[test]
    fn init_is_seeded_with_structured_gates() {
        let a = Model::init(Variant::Mp, 7);
        let b = Model::init(Variant::Mp, 7);
        assert_eq!(a.params(), b.params());
        let c = Model::init(Variant::Mp, 8);
        assert_ne!(a.params(), c.params());

        let l = a.layout.clone();
        let h = a.hidden();
        for r in 0..4 * h {
            let expect = if (h..2 * h).contains(&r) { 1.0 } else { 0.0 };
            assert_eq!(a.param(l.l1_b.start + r), expect);
            assert_eq!(a.param(l.l2_b.start + r), expect);
        }
        for (range, gate) in [(l.l1_u.clone(), 0), (l.l1_u.clone(), 3), (l.l2_u.clone(), 2)] {
            let u = &a.params()[range];
            for i in 0..h {
                let row_i = &u[(gate * h + i) * h..(gate * h + i + 1) * h];
                for j in i..h {
                    let row_j = &u[(gate * h + j) * h..(gate * h + j + 1) * h];
                    let d = dot(row_i, row_j);
                    let expect = if i == j { 1.0 } else { 0.0 };
                    assert!(
                        (d - expect).abs() < 1e-9,
                        "gate {gate} rows {i},{j}: dot {d}"
                    );
                }
            }
        }
    }

    #[test]
    fn zero_parameters_predict_the_target_mean() {
        let model = Model::zeroed(Variant::Ft);
        let features = FeatureMatrix::zeros(FT_ROWS, 9);
        let trace = model.predict(&features).unwrap();
        assert_eq!(trace.ha_hat, vec![0.0; 9]);
    }

    #[test]
    fn variants_enforce_their_input_width() {
        let model = Model::zeroed(Variant::Ap);
        let fused = FeatureMatrix::zeros(FEATURE_ROWS, 4);
        assert!(matches!(model.predict(&fused), Err(Error::InputWidth { .. })));
        assert!(model.predict_fused(&fused).is_ok());
        let narrow = FeatureMatrix::zeros(FT_ROWS, 4);
        assert!(matches!(
            model.predict_fused(&narrow),
            Err(Error::InputWidth { .. })
        ));
    }

    #[test]
    fn ft_variant_ignores_audio_rows() {
        let model = Model::init(Variant::Ft, 3);
        let a = micro_clip("ft_a", 12, 5);
        let mut b = a.clone();
        for t in 0..12 {
            for r in 0..SPECTROGRAM_BINS {
                b.features.set(r, t, 9.0 + (r + t) as f64);
            }
        }
        let ta = model.predict_fused(&a.features).unwrap();
        let tb = model.predict_fused(&b.features).unwrap();
        assert_eq!(ta.ha_hat, tb.ha_hat);
    }

    #[test]
    fn prefix_predictions_match_the_full_pass_bitwise() {
        let clip = micro_clip("stream", 20, 3);
        let mut model = Model::init(Variant::Mp, 11);
        model
            .set_norm_stats(NormStats::fit(std::slice::from_ref(&clip), Variant::Mp).unwrap())
            .unwrap();
        let full = model.predict_fused(&clip.features).unwrap();
        for k in [1usize, 7, 20] {
            let part = model.predict_fused(&clip.features.prefix(k)).unwrap();
            assert_eq!(&part.ha_hat[..], &full.ha_hat[..k]);
        }
        let mut state = model.fresh_state();
        let streamed: Vec<f64> = (0..20)
            .map(|t| model.step(&mut state, clip.features.column(t)).unwrap())
            .collect();
        assert_eq!(streamed, full.ha_hat);
    }

    #[test]
    fn running_stats_from_one_clip_reproduce_training_mode() {
        let mut model = Model::init(Variant::Mp, 2);
        let clip = micro_clip("bn", 16, 9);
        let cache = model.forward_train(&clip.features, 16);
        model.run_mean.copy_from_slice(&cache.mu);
        model.run_var.copy_from_slice(&cache.var);
        let trace = model.predict_fused(&clip.features).unwrap();
        for t in 0..16 {
            assert!(
                (trace.ha_hat[t] - cache.ha[t]).abs() < 1e-12,
                "slice {t}: inference {} vs training {}",
                trace.ha_hat[t],
                cache.ha[t]
            );
        }
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let clips = [micro_clip("fd0", 8, 21), micro_clip("fd1", 8, 22)];
        let mut model = Model::init(Variant::Mp, 4);
        model
            .set_norm_stats(NormStats::fit(&clips, Variant::Mp).unwrap())
            .unwrap();
        let refs: Vec<&LabeledClip> = clips.iter().collect();
        let worst = finite_difference_check(&mut model, &refs, 0.01, 40, 77).unwrap();
        assert!(worst < 1e-4, "max relative gradient error {worst:.3e}");
    }

    #[test]
    fn batch_gradient_is_the_mean_of_clip_gradients() {
        let model = Model::init(Variant::Mp, 6);
        let c0 = micro_clip("m0", 10, 31);
        let c1 = micro_clip("m1", 10, 32);
        let (l0, g0) = batch_gradient(&model, &[&c0], 0.01, 1).unwrap();
        let (l1, g1) = batch_gradient(&model, &[&c1], 0.01, 1).unwrap();
        let (lb, gb) = batch_gradient(&model, &[&c0, &c1], 0.01, 1).unwrap();
        assert!((lb - 0.5 * (l0 + l1)).abs() < 1e-12);
        for i in 0..gb.len() {
            let mean = 0.5 * (g0[i] + g1[i]);
            assert!(
                (gb[i] - mean).abs() <= 1e-10 * (1.0 + mean.abs()),
                "param {i}: batch {} vs mean {}",
                gb[i],
                mean
            );
        }
        let (lt, gt) = batch_gradient(&model, &[&c0, &c1], 0.01, 3).unwrap();
        assert_eq!(lb, lt);
        assert_eq!(gb, gt);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_untouched() {
        let clip = micro_clip("frozen", 10, 41);
        let cfg = TrainConfig {
            epochs: 1,
            learning_rate: 0.0,
            val_fraction: 0.0,
            ..Default::default()
        };
        let report = train(std::slice::from_ref(&clip), Variant::Mp, &cfg).unwrap();
        let fresh = Model::init(Variant::Mp, cfg.seed);
        assert_eq!(report.model.params(), fresh.params());
    }

    #[test]
    fn training_is_reproducible_and_thread_count_invariant() {
        let clips: Vec<LabeledClip> = (0..5)
            .map(|i| micro_clip(&format!("rep{i}"), 10, 100 + i as u64))
            .collect();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 2,
            seed: 9,
            val_fraction: 0.2,
            ..Default::default()
        };
        let a = train(&clips, Variant::Mp, &cfg).unwrap();
        let b = train(&clips, Variant::Mp, &cfg).unwrap();
        assert_eq!(a.model.params(), b.model.params());
        let c = train(&clips, Variant::Mp, &TrainConfig { threads: 3, ..cfg.clone() }).unwrap();
        assert_eq!(a.model.params(), c.model.params());
        assert_eq!(a.log.len(), 2);
        for row in &a.log {
            assert!(row.train_loss.is_finite());
            assert!((0.0..=1.0).contains(&row.val_frac_under_5mm));
        }
        assert!(a.best_epoch < 2);
    }

    #[test]
    fn a_short_run_beats_the_constant_predictor() {
        let clips: Vec<LabeledClip> = (0..6)
            .map(|i| micro_clip(&format!("learn{i}"), 40, 300 + i as u64))
            .collect();
        let all: Vec<f64> = clips.iter().flat_map(|c| c.targets.iter().copied()).collect();
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        let var = all.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / all.len() as f64;
        let cfg = TrainConfig {
            epochs: 40,
            batch_size: 3,
            seed: 1,
            val_fraction: 0.0,
            ..Default::default()
        };
        let report = train(&clips, Variant::Mp, &cfg).unwrap();
        let last = report.log.last().unwrap();
        assert!(
            last.train_loss < 0.5 * var,
            "train loss {} never got below half the target variance {}",
            last.train_loss,
            var
        );
    }

    #[test]
    fn non_finite_targets_name_the_clip() {
        let model = Model::init(Variant::Mp, 1);
        let mut clip = micro_clip("bad_clip", 6, 55);
        clip.targets[3] = f64::NAN;
        let err = batch_gradient(&model, &[&clip], 0.01, 1).unwrap_err();
        match err {
            Error::NonFinite { context } => assert!(context.contains("bad_clip")),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn adam_first_step_moves_by_the_learning_rate() {
        let mut p = vec![1.0, -2.0];
        let mut adam = Adam::new(2, 1e-3);
        adam.update(&mut p, &[0.5, -0.25]);
        assert!((p[0] - (1.0 - 1e-3)).abs() < 1e-6);
        assert!((p[1] - (-2.0 + 1e-3)).abs() < 1e-6);
    }

    #[test]
    fn gradient_norm_clipping_caps_the_global_norm() {
        let mut at_cap = vec![3.0, 4.0];
        assert_eq!(clip_gradient_norm(&mut at_cap, 5.0), 5.0);
        assert_eq!(at_cap, vec![3.0, 4.0]);
        let mut over = vec![6.0, 8.0];
        clip_gradient_norm(&mut over, 5.0);
        assert!((dot(&over, &over).sqrt() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn checkpoints_roundtrip_bitwise_and_refuse_damage() {
        let dir = tempfile::tempdir().unwrap();
        let clips = [micro_clip("ckpt", 10, 71)];
        let mut model = Model::init(Variant::Ap, 13);
        model
            .set_norm_stats(NormStats::fit(&clips, Variant::Ap).unwrap())
            .unwrap();
        for (i, v) in model.run_mean.iter_mut().enumerate() {
            *v = i as f64 * 0.01;
        }
        let path = dir.path().join("model.ckpt");
        save_model(&model, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(loaded.variant(), Variant::Ap);
        assert_eq!(loaded.params(), model.params());
        assert_eq!(loaded.run_mean, model.run_mean);
        assert_eq!(loaded.run_var, model.run_var);
        assert_eq!(loaded.norm_stats(), model.norm_stats());
        let band = clips[0].features.row_band(0, SPECTROGRAM_BINS);
        assert_eq!(
            model.predict(&band).unwrap().ha_hat,
            loaded.predict(&band).unwrap().ha_hat
        );

        let bytes = std::fs::read(&path).unwrap();
        let trunc = dir.path().join("trunc.ckpt");
        std::fs::write(&trunc, &bytes[..bytes.len() - 9]).unwrap();
        assert!(load_model(&trunc).is_err());

        let long = dir.path().join("long.ckpt");
        let mut extended = bytes.clone();
        extended.extend_from_slice(&[0u8; 4]);
        std::fs::write(&long, &extended).unwrap();
        assert!(matches!(load_model(&long), Err(Error::Corrupt { .. })));

        let magic = dir.path().join("magic.ckpt");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        std::fs::write(&magic, &bad).unwrap();
        assert!(matches!(load_model(&magic), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn manifest_rides_next_to_the_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mp.ckpt");
        let manifest = CheckpointManifest {
            version: 1,
            variant: "mp".into(),
            input_rows: FEATURE_ROWS,
            hidden: HIDDEN,
            param_count: 109_761,
            config: TrainConfig::default(),
            best_epoch: 3,
            epochs_run: 15,
            val_loss: 12.5,
            val_frac_under_5mm: 0.82,
        };
        write_model_manifest(&path, &manifest).unwrap();
        assert!(model_manifest_path(&path).ends_with("mp.manifest.json"));
        let back = read_model_manifest(&path).unwrap();
        assert_eq!(back.variant, "mp");
        assert_eq!(back.best_epoch, 3);
        assert_eq!(back.config.epochs, 15);
    }

    #[test]
    fn train_log_serializes_with_a_stable_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        let rows = vec![EpochLog {
            epoch: 0,
            train_loss: 1.5,
            val_loss: 2.25,
            val_frac_under_5mm: 0.5,
        }];
        write_train_log(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "epoch,train_loss,val_loss,val_frac_under_5mm\n0,1.500000,2.250000,0.5000\n"
        );
    }
}

