//! The vocoder: a frame-rate conditioning network upsampled to one context
//! vector per sample, and a sample-rate network of two GRUs feeding the
//! LP-shifted mixture head.

use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::dsp::{AudioBuffer, DspError, FeatureTrack, FrameConfig, LpFilter};
use crate::grad::{gemm, seeded_rng, GradError, Graph, MatRef, ParamId, ParamStore, Rng, Tensor, Var};
use crate::lpmdn::{head_loss, head_width, heads_to_mog, mog_nll, mog_sample, sharpen, LpMdnError, NetHeads};
use crate::net::{Conv1dLayer, DenseWeights, FcLayer, GruLayer, GruState, GruWeights, TransposedConvLayer};

/// Frames of context each side of a frame that its conditioning vector sees.
pub const CONTEXT_FRAMES: usize = 2;
/// Normalization spreads are floored so constant features stay finite.
const MIN_FEATURE_STD: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("input mismatch: {0}")]
    Input(String),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Head(#[from] LpMdnError),
    #[error(transparent)]
    Dsp(#[from] DspError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub lp_order: usize,
    /// Width of the upsampled conditioning vector.
    pub context_dim: usize,
    pub gru1_dim: usize,
    pub gru2_dim: usize,
    pub mixtures: usize,
    pub frame_shift: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            lp_order: 16,
            context_dim: 128,
            gru1_dim: 256,
            gru2_dim: 16,
            mixtures: 1,
            frame_shift: 120,
        }
    }
}

impl ModelConfig {
    /// Small model sized for CPU training runs.
    pub fn desk() -> Self {
        Self {
            gru1_dim: 64,
            gru2_dim: 8,
            ..Self::default()
        }
    }

    /// Full-size model.
    pub fn full() -> Self {
        Self {
            context_dim: 256,
            ..Self::default()
        }
    }

    pub fn feature_dim(&self) -> usize {
        FeatureTrack::width_for(self.lp_order)
    }

    /// Analysis settings whose features this model consumes.
    pub fn frame_config(&self) -> FrameConfig {
        FrameConfig {
            frame_shift: self.frame_shift,
            lp_order: self.lp_order,
            ..FrameConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("lp_order", self.lp_order),
            ("context_dim", self.context_dim),
            ("gru1_dim", self.gru1_dim),
            ("gru2_dim", self.gru2_dim),
            ("mixtures", self.mixtures),
            ("frame_shift", self.frame_shift),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }
}

/// One teacher-forced training example: `frames` frames of conditioning and
/// the matching `frames · frame_shift` samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    /// `(frames + 4) × feature_dim`, edge frames replicated.
    pub features: Vec<f64>,
    /// Network input `x_{n−1}` (possibly noisy).
    pub prev: Vec<f64>,
    /// LP prediction from the (possibly noisy) history.
    pub prediction: Vec<f64>,
    /// Clean target samples.
    pub target: Vec<f64>,
    pub voiced: Vec<bool>,
}

impl Segment {
    /// Cuts frames `[start, start + frames)` out of an utterance. With `noise`,
    /// every past sample the network and predictor see gets Gaussian noise of
    /// the given spread; targets stay clean. Samples before the utterance start
    /// are exact zeros.
    pub fn teacher_forced(
        track: &FeatureTrack,
        audio: &AudioBuffer,
        start: usize,
        frames: usize,
        noise: Option<(&mut Rng, f64)>,
    ) -> Result<Self, ModelError> {
        let shift = track.frame_shift();
        let m = track.lp_order();
        if start + frames > track.frames() || frames == 0 {
            return Err(ModelError::Input(format!(
                "frames {start}..{} outside track of {} frames",
                start + frames,
                track.frames()
            )));
        }
        if audio.len() < track.samples() {
            return Err(ModelError::Input(format!(
                "audio has {} samples, features need {}",
                audio.len(),
                track.samples()
            )));
        }
        let n0 = start * shift;
        let len = frames * shift;
        let x = &audio.samples;

        // history[j] holds sample n0 − m + j
        let mut history = vec![0.0; m + len - 1];
        let first = n0 as isize - m as isize;
        for (j, h) in history.iter_mut().enumerate() {
            let idx = first + j as isize;
            if idx >= 0 {
                *h = x[idx as usize];
            }
        }
        if let Some((rng, sigma)) = noise {
            let real = (-first).max(0) as usize;
            inject_noise(&mut history[real..], sigma, rng);
        }

        let mut prev = Vec::with_capacity(len);
        let mut prediction = Vec::with_capacity(len);
        for n in 0..len {
            let alpha = track.lpc(start + n / shift);
            // sample n0 + n − i sits at history[m + n − i]
            let p: f64 = (1..=m).map(|i| alpha[i - 1] * history[m + n - i]).sum();
            prediction.push(p);
            prev.push(history[m + n - 1]);
        }

        Ok(Self {
            features: padded_features(track, start, frames),
            prev,
            prediction,
            target: x[n0..n0 + len].to_vec(),
            voiced: (start..start + frames).map(|t| track.voiced(t)).collect(),
        })
    }
}

/// Adds `σ·N(0, 1)` to every sample, one draw per sample in order.
pub fn inject_noise(samples: &mut [f64], sigma: f64, rng: &mut Rng) {
    for v in samples {
        let e: f64 = StandardNormal.sample(rng);
        *v += sigma * e;
    }
}

/// Rows for frames `start − 2 ..= start + frames + 1`, clamped to the track.
fn padded_features(track: &FeatureTrack, start: usize, frames: usize) -> Vec<f64> {
    let last = track.frames() as isize - 1;
    let mut out = Vec::with_capacity((frames + 2 * CONTEXT_FRAMES) * track.width());
    for t in start as isize - CONTEXT_FRAMES as isize..(start + frames + CONTEXT_FRAMES) as isize {
        out.extend_from_slice(track.row(t.clamp(0, last) as usize));
    }
    out
}

/// Segments of equal length stacked for one forward pass. Sample-rate
/// vectors are time-major: entry `n·batch + b` is sample `n` of segment `b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub batch: usize,
    pub frames: usize,
    /// `batch·(frames + 4) × feature_dim`
    pub features: Tensor,
    pub prev: Vec<f64>,
    pub prediction: Vec<f64>,
    pub target: Vec<f64>,
}

impl Batch {
    pub fn from_segments(segments: &[Segment], frames: usize, feature_dim: usize) -> Result<Self, ModelError> {
        let b = segments.len();
        if b == 0 {
            return Err(ModelError::Input("empty batch".into()));
        }
        let len = segments[0].target.len();
        let rows = frames + 2 * CONTEXT_FRAMES;
        let mut features = Vec::with_capacity(b * rows * feature_dim);
        for s in segments {
            if s.target.len() != len || s.features.len() != rows * feature_dim {
                return Err(ModelError::Input("segments differ in length".into()));
            }
            features.extend_from_slice(&s.features);
        }
        let interleave = |f: fn(&Segment) -> &Vec<f64>| -> Vec<f64> {
            (0..len).flat_map(|n| segments.iter().map(move |s| f(s)[n])).collect()
        };
        Ok(Self {
            batch: b,
            frames,
            features: Tensor::new(&[b * rows, feature_dim], features)?,
            prev: interleave(|s| &s.prev),
            prediction: interleave(|s| &s.prediction),
            target: interleave(|s| &s.target),
        })
    }

    pub fn samples_per_segment(&self) -> usize {
        self.target.len() / self.batch
    }
}

pub struct ForwardOutput {
    /// Mean NLL per sample (scalar).
    pub nll: Var,
    /// Mixture mean per sample, time-major `(L·batch) × 1`.
    pub mixture_mean: Var,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub norm_mean: ParamId,
    pub norm_std: ParamId,
    pub conv1: Conv1dLayer,
    pub conv2: Conv1dLayer,
    pub fc_up: FcLayer,
    pub upsample: TransposedConvLayer,
    pub gru1: GruLayer,
    pub gru2: GruLayer,
    pub head: FcLayer,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = seeded_rng(seed);
        let mut store = ParamStore::new();
        let d = cfg.feature_dim();
        let c = cfg.context_dim;
        let norm_mean = store.insert("norm.mean", Tensor::zeros(&[d]), false);
        let norm_std = store.insert("norm.std", Tensor::full(&[d], 1.0), false);
        let conv1 = Conv1dLayer::new(&mut store, "cond.conv1", d, d, &mut rng);
        let conv2 = Conv1dLayer::new(&mut store, "cond.conv2", d, d, &mut rng);
        let fc_up = FcLayer::new(&mut store, "cond.fc", d, c, &mut rng);
        let upsample = TransposedConvLayer::new(&mut store, "cond.upsample", c, c, cfg.frame_shift, &mut rng);
        let gru1 = GruLayer::new(&mut store, "gru1", c + 1, cfg.gru1_dim, &mut rng);
        let gru2 = GruLayer::new(&mut store, "gru2", cfg.gru1_dim, cfg.gru2_dim, &mut rng);
        let head = FcLayer::new(&mut store, "head", cfg.gru2_dim, head_width(cfg.mixtures), &mut rng);
        Ok(Self {
            cfg,
            store,
            norm_mean,
            norm_std,
            conv1,
            conv2,
            fc_up,
            upsample,
            gru1,
            gru2,
            head,
        })
    }

    /// Sets the feature normalization to the per-dimension mean and spread
    /// of `tracks`.
    pub fn fit_normalization(&mut self, tracks: &[&FeatureTrack]) -> Result<(), ModelError> {
        let d = self.cfg.feature_dim();
        let mut sum = vec![0.0; d];
        let mut sq = vec![0.0; d];
        let mut count = 0usize;
        for tr in tracks {
            if tr.width() != d {
                return Err(ModelError::Input(format!("feature width {} vs model {d}", tr.width())));
            }
            for row in tr.rows().chunks(d) {
                for i in 0..d {
                    sum[i] += row[i];
                    sq[i] += row[i] * row[i];
                }
            }
            count += tr.frames();
        }
        if count == 0 {
            return Ok(());
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std: Vec<f64> = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(MIN_FEATURE_STD))
            .collect();
        self.store.set_data(self.norm_mean, mean)?;
        self.store.set_data(self.norm_std, std)?;
        Ok(())
    }

    /// Conditioning network: padded frame features (`batch·(frames+4) × D`)
    /// to one context vector per sample, segment-major
    /// (`batch·frames·frame_shift × context_dim`), before the output tanh.
    pub fn condition(&self, g: &mut Graph, features: Var, batch: usize, frames: usize) -> Result<Var, ModelError> {
        let store = &self.store;
        let padded = frames + 2 * CONTEXT_FRAMES;
        if g.value(features).rows() != batch * padded {
            return Err(ModelError::Input(format!(
                "{} feature rows for {batch} segments of {frames} frames",
                g.value(features).rows()
            )));
        }
        let mean = g.param(store, self.norm_mean)?;
        let std = g.param(store, self.norm_std)?;
        let x = g.sub(features, mean)?;
        let x = g.div(x, std)?;

        let centres1: Vec<usize> = (0..batch).flat_map(|b| (1..padded - 1).map(move |t| b * padded + t)).collect();
        let y = self.conv1.forward_at(g, store, x, &centres1)?;
        let y = g.tanh(y)?;
        let inner = padded - 2;
        let centres2: Vec<usize> = (0..batch).flat_map(|b| (1..inner - 1).map(move |t| b * inner + t)).collect();
        let y = self.conv2.forward_at(g, store, y, &centres2)?;
        let y = g.tanh(y)?;
        let skip: Vec<usize> = (0..batch)
            .flat_map(|b| (0..frames).map(move |t| b * padded + t + CONTEXT_FRAMES))
            .collect();
        let skip = g.gather_rows(x, skip)?;
        let y = g.add(y, skip)?;
        let y = self.fc_up.forward(g, store, y)?;
        let y = g.tanh(y)?;
        Ok(self.upsample.forward(g, store, y)?)
    }

    /// Teacher-forced forward pass over a batch.
    pub fn forward(&self, g: &mut Graph, batch: &Batch) -> Result<ForwardOutput, ModelError> {
        let store = &self.store;
        let b = batch.batch;
        let len = batch.samples_per_segment();
        if len != batch.frames * self.cfg.frame_shift {
            return Err(ModelError::Input(format!(
                "{len} samples per segment for {} frames",
                batch.frames
            )));
        }
        let feats = g.constant(batch.features.clone())?;
        let ctx = self.condition(g, feats, b, batch.frames)?;
        let ctx = g.tanh(ctx)?;
        let time_major: Vec<usize> = (0..len).flat_map(|n| (0..b).map(move |s| s * len + n)).collect();
        let ctx = g.gather_rows(ctx, time_major)?;
        let rows = len * b;
        let prev = g.constant(Tensor::new(&[rows, 1], batch.prev.clone())?)?;
        let input = g.concat_cols(&[ctx, prev])?;

        let p1 = self.gru1.project(g, store, input)?;
        let h1 = self.gru1.run(g, store, p1, b)?;
        let p2 = self.gru2.project(g, store, h1)?;
        let h2 = self.gru2.run(g, store, p2, b)?;
        let heads = self.head.forward(g, store, h2)?;

        let pred = g.constant(Tensor::new(&[rows, 1], batch.prediction.clone())?)?;
        let target = g.constant(Tensor::new(&[rows, 1], batch.target.clone())?)?;
        let out = head_loss(g, heads, pred, target, self.cfg.mixtures)?;
        Ok(ForwardOutput {
            nll: out.nll,
            mixture_mean: out.mixture_mean,
        })
    }

    /// Tape-free weights for sample-by-sample generation.
    pub fn synthesizer(&self) -> Result<Synthesizer<'_>, ModelError> {
        Synthesizer::new(self)
    }
}

/// Recurrent state carried across samples during generation.
#[derive(Clone, Debug)]
pub struct SynthesisState {
    pub gru1: GruState,
    pub gru2: GruState,
    pub filter: LpFilter,
    pub prev: f64,
}

impl SynthesisState {
    pub fn new(cfg: &ModelConfig) -> Self {
        Self {
            gru1: GruState::zeros(cfg.gru1_dim),
            gru2: GruState::zeros(cfg.gru2_dim),
            filter: LpFilter::new(vec![0.0; cfg.lp_order]),
            prev: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthesisOutput {
    pub audio: AudioBuffer,
    /// Samples that left `[-1, 1]` and were clamped.
    pub clamped: usize,
}

/// Weights of a [`Model`] laid out for per-sample inference.
pub struct Synthesizer<'a> {
    model: &'a Model,
    /// Input-projection columns of GRU1 for the context part (`3H₁ × C`).
    gru1_ctx: Vec<f64>,
    /// Input-projection column for `x_{n−1}`.
    gru1_prev: Vec<f64>,
    gru1_bias: Vec<f64>,
    gru1: GruWeights,
    gru2_in: DenseWeights,
    gru2_bias: Vec<f64>,
    gru2: GruWeights,
    head: DenseWeights,
    head_bias: Vec<f64>,
}

impl<'a> Synthesizer<'a> {
    fn new(model: &'a Model) -> Result<Self, ModelError> {
        let store = &model.store;
        let c = model.cfg.context_dim;
        let w1 = DenseWeights::from_tensor(store.get(model.gru1.w));
        let mut gru1_ctx = Vec::with_capacity(w1.rows * c);
        for row in w1.data.chunks(w1.cols) {
            gru1_ctx.extend_from_slice(&row[..c]);
        }
        Ok(Self {
            model,
            gru1_ctx,
            gru1_prev: w1.column(c),
            gru1_bias: store.get(model.gru1.b).data().to_vec(),
            gru1: GruWeights::from_layer(&model.gru1, store),
            gru2_in: DenseWeights::from_tensor(store.get(model.gru2.w)),
            gru2_bias: store.get(model.gru2.b).data().to_vec(),
            gru2: GruWeights::from_layer(&model.gru2, store),
            head: DenseWeights::from_tensor(&model.head.effective(store)?),
            head_bias: store.get(model.head.b).data().to_vec(),
        })
    }

    /// GRU1 input projections of the context, `W_ctx·tanh(ctx_n) + b`, one
    /// `3H₁` row per sample.
    fn context_projection(&self, track: &FeatureTrack) -> Result<Vec<f64>, ModelError> {
        let cfg = &self.model.cfg;
        if track.width() != cfg.feature_dim() || track.frame_shift() != cfg.frame_shift {
            return Err(ModelError::Input(format!(
                "features (width {}, shift {}) do not match the model (width {}, shift {})",
                track.width(),
                track.frame_shift(),
                cfg.feature_dim(),
                cfg.frame_shift
            )));
        }
        let frames = track.frames();
        let mut g = Graph::new();
        let feats = Tensor::new(&[frames + 2 * CONTEXT_FRAMES, track.width()], padded_features(track, 0, frames))?;
        let feats = g.constant(feats)?;
        let ctx = self.model.condition(&mut g, feats, 1, frames)?;
        let ctx = g.tanh(ctx)?;
        let ctx = g.value(ctx);
        let (n, c) = (ctx.rows(), ctx.cols());
        let h3 = 3 * cfg.gru1_dim;
        let mut out: Vec<f64> = (0..n).flat_map(|_| self.gru1_bias.iter().copied()).collect();
        gemm(
            MatRef::new(ctx.data(), n, c),
            MatRef::new(&self.gru1_ctx, h3, c).t(),
            &mut out,
            1.0,
        );
        Ok(out)
    }

    /// Raw head outputs for one sample, advancing the recurrent state.
    fn step(&self, state: &mut SynthesisState, ctx_proj: &[f64]) -> NetHeads {
        let mut p1 = ctx_proj.to_vec();
        for (p, w) in p1.iter_mut().zip(&self.gru1_prev) {
            *p += w * state.prev;
        }
        crate::net::gru_step(&self.gru1, &mut state.gru1, &p1);
        let mut p2 = self.gru2_bias.clone();
        self.gru2_in.matvec_acc(&state.gru1.h, &mut p2);
        crate::net::gru_step(&self.gru2, &mut state.gru2, &p2);
        let mut out = self.head_bias.clone();
        self.head.matvec_acc(&state.gru2.h, &mut out);
        NetHeads::from_row(&out, self.model.cfg.mixtures).expect("head width fixed at construction")
    }

    /// Generates audio for `track` by ancestral sampling. With `sharpen`,
    /// component spreads in voiced frames are scaled by that factor.
    pub fn synthesize(&self, track: &FeatureTrack, seed: u64, sharpen_factor: Option<f64>) -> Result<SynthesisOutput, ModelError> {
        let cfg = &self.model.cfg;
        let sr = track.sample_rate();
        if track.is_empty() {
            return Ok(SynthesisOutput {
                audio: AudioBuffer::new(Vec::new(), sr)?,
                clamped: 0,
            });
        }
        let proj = self.context_projection(track)?;
        let h3 = 3 * cfg.gru1_dim;
        let shift = cfg.frame_shift;
        let mut rng = seeded_rng(seed);
        let mut state = SynthesisState::new(cfg);
        let mut out = Vec::with_capacity(track.samples());
        let mut clamped = 0;
        for n in 0..track.samples() {
            let t = n / shift;
            if n % shift == 0 {
                state.filter.set_coeffs(track.lpc(t));
            }
            let pred = state.filter.predict();
            let heads = self.step(&mut state, &proj[n * h3..(n + 1) * h3]);
            let mut dist = heads_to_mog(&heads, pred)?;
            if let Some(f) = sharpen_factor {
                dist = sharpen(&dist, track.voiced(t), f)?;
            }
            let mut x = mog_sample(&dist, &mut rng);
            if !(-1.0..=1.0).contains(&x) {
                log::debug!("sample {n} clamped from {x}");
                clamped += 1;
                x = x.clamp(-1.0, 1.0);
            }
            state.filter.push(x);
            state.prev = x;
            out.push(x);
        }
        if clamped > 0 {
            log::warn!("{clamped} generated samples clamped to [-1, 1]");
        }
        Ok(SynthesisOutput {
            audio: AudioBuffer::new(out, sr)?,
            clamped,
        })
    }

    /// Mean per-sample NLL of `audio` under teacher forcing, computed with the
    /// same per-sample path as [`Synthesizer::synthesize`].
    pub fn teacher_forced_nll(&self, track: &FeatureTrack, audio: &AudioBuffer) -> Result<f64, ModelError> {
        let cfg = &self.model.cfg;
        if audio.len() < track.samples() {
            return Err(ModelError::Input(format!(
                "audio has {} samples, features need {}",
                audio.len(),
                track.samples()
            )));
        }
        if track.is_empty() {
            return Err(ModelError::Input("empty feature track".into()));
        }
        let proj = self.context_projection(track)?;
        let h3 = 3 * cfg.gru1_dim;
        let mut state = SynthesisState::new(cfg);
        let mut total = 0.0;
        for n in 0..track.samples() {
            if n % cfg.frame_shift == 0 {
                state.filter.set_coeffs(track.lpc(n / cfg.frame_shift));
            }
            let pred = state.filter.predict();
            let heads = self.step(&mut state, &proj[n * h3..(n + 1) * h3]);
            let x = audio.samples[n];
            total += mog_nll(&heads_to_mog(&heads, pred)?, x);
            state.filter.push(x);
            state.prev = x;
        }
        Ok(total / track.samples() as f64)
    }
}
