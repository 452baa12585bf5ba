//! Teacher-forced training: chunk sampling, input-noise injection, the
//! spectral power loss and one optimizer step per batch.

use std::f64::consts::PI;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use thiserror::Error;

use crate::dsp::{hann, AudioBuffer, FeatureTrack};
use crate::grad::{adam_step, gemm, noam_lr, seeded_rng, GradError, Graph, MatRef, OptimizerState, Rng, Tensor, Var};
use crate::lpmdn::LpMdnError;
use crate::model::{Batch, Model, ModelError, Segment};

/// Noise stream id, kept apart from the per-epoch shuffle streams.
const NOISE_STREAM: u64 = u64::MAX;
/// Keeps the magnitude differentiable at zero.
pub const MAGNITUDE_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("no utterance is long enough for one {0}-frame chunk")]
    NoChunks(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error("loss log: {0}")]
    Io(#[from] std::io::Error),
    #[error("non-finite value at step {step}: {cause}\n{dump}")]
    NonFinite { step: u64, cause: String, dump: String },
}

impl TrainError {
    /// True for numeric failures (NaN/Inf), as opposed to bad input or config.
    pub fn is_numeric(&self) -> bool {
        match self {
            TrainError::NonFinite { .. } => true,
            TrainError::Grad(g) | TrainError::Model(ModelError::Grad(g)) => {
                matches!(g, GradError::NonFinite { .. } | GradError::NonFiniteGradient { .. })
            }
            TrainError::Model(ModelError::Head(h)) => matches!(h, LpMdnError::NonFiniteHeads | LpMdnError::Graph(GradError::NonFinite { .. })),
            _ => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Samples per training chunk; a whole number of frames.
    pub chunk_len: usize,
    pub batch_size: usize,
    /// Weight of the spectral power loss.
    pub lambda_pl: f64,
    /// Spread of the noise added to past samples seen by the network.
    pub noise_sigma: f64,
    pub total_steps: u64,
    /// Validation interval in steps (0 disables).
    pub eval_every: u64,
    pub seed: u64,
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub fft_size: usize,
    pub stft_hop: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            chunk_len: 960,
            batch_size: 8,
            lambda_pl: 10.0,
            noise_sigma: 4.0 / 65_536.0,
            total_steps: 10_000,
            eval_every: 500,
            seed: 1,
            base_lr: 1e-3,
            warmup_steps: 4000,
            fft_size: 512,
            stft_hop: 120,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, frame_shift: usize) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.chunk_len == 0 || self.chunk_len % frame_shift != 0 {
            return bad(format!("chunk_len {} must be a positive multiple of the frame shift {frame_shift}", self.chunk_len));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.lambda_pl >= 0.0 && self.lambda_pl.is_finite()) {
            return bad(format!("lambda_pl must be finite and >= 0, got {}", self.lambda_pl));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be finite and >= 0, got {}", self.noise_sigma));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if self.warmup_steps == 0 {
            return bad("warmup_steps must be >= 1".into());
        }
        if self.stft_hop == 0 || self.fft_size < 2 || self.fft_size > self.chunk_len {
            return bad(format!(
                "fft_size {} must be in [2, chunk_len {}] and stft_hop >= 1",
                self.fft_size, self.chunk_len
            ));
        }
        Ok(())
    }

    pub fn chunk_frames(&self, frame_shift: usize) -> usize {
        self.chunk_len / frame_shift
    }
}

/// An utterance with its conditioning features.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub name: String,
    pub audio: AudioBuffer,
    pub features: FeatureTrack,
}

/// Utterances cut into non-overlapping, frame-aligned chunks.
#[derive(Clone, Debug)]
pub struct TrainingData {
    pub utterances: Vec<Utterance>,
    /// `(utterance, first frame)` of every chunk.
    pub chunks: Vec<(usize, usize)>,
    pub chunk_frames: usize,
}

impl TrainingData {
    pub fn new(utterances: Vec<Utterance>, chunk_frames: usize) -> Result<Self, TrainError> {
        if chunk_frames == 0 {
            return Err(TrainError::NoChunks(0));
        }
        let mut chunks = Vec::new();
        for (u, utt) in utterances.iter().enumerate() {
            let frames = utt.features.frames().min(utt.audio.len() / utt.features.frame_shift().max(1));
            if frames < chunk_frames {
                log::warn!("skipping {}: {frames} frames, chunks need {chunk_frames}", utt.name);
                continue;
            }
            chunks.extend((0..=frames - chunk_frames).step_by(chunk_frames).map(|s| (u, s)));
        }
        if chunks.is_empty() {
            return Err(TrainError::NoChunks(chunk_frames));
        }
        Ok(Self {
            utterances,
            chunks,
            chunk_frames,
        })
    }

    /// Chunk order of `epoch`: a permutation fixed by `seed`.
    pub fn epoch_order(&self, seed: u64, epoch: u64) -> Vec<usize> {
        let mut rng = seeded_rng(seed);
        rng.set_stream(epoch);
        let mut order: Vec<usize> = (0..self.chunks.len()).collect();
        order.shuffle(&mut rng);
        order
    }

    pub fn segment(&self, chunk: usize, noise: Option<(&mut Rng, f64)>) -> Result<Segment, ModelError> {
        let (u, start) = self.chunks[chunk];
        let utt = &self.utterances[u];
        Segment::teacher_forced(&utt.features, &utt.audio, start, self.chunk_frames, noise)
    }
}

/// Per-step loss values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub step: u64,
    pub nll: f64,
    pub power: f64,
    pub total: f64,
    pub lr: f64,
}

/// Windowed DFT of every STFT frame of a fixed-length signal as two dense
/// matrices (`len × frames·bins`), so spectra are one matrix product.
#[derive(Clone, Debug)]
pub struct PowerLossBasis {
    pub len: usize,
    pub frames: usize,
    pub bins: usize,
    cos: Tensor,
    sin: Tensor,
}

impl PowerLossBasis {
    pub fn new(len: usize, fft_size: usize, hop: usize) -> Result<Self, TrainError> {
        if fft_size > len || hop == 0 || fft_size == 0 {
            return Err(TrainError::Config(format!("cannot frame {len} samples with fft {fft_size}, hop {hop}")));
        }
        let frames = 1 + (len - fft_size) / hop;
        let bins = fft_size / 2 + 1;
        let cols = frames * bins;
        let window = hann(fft_size);
        let mut cos = vec![0.0; len * cols];
        let mut sin = vec![0.0; len * cols];
        for f in 0..frames {
            for i in 0..fft_size {
                let n = f * hop + i;
                for k in 0..bins {
                    let ph = 2.0 * PI * ((k * i) % fft_size) as f64 / fft_size as f64;
                    cos[n * cols + f * bins + k] = window[i] * ph.cos();
                    sin[n * cols + f * bins + k] = -window[i] * ph.sin();
                }
            }
        }
        Ok(Self {
            len,
            frames,
            bins,
            cos: Tensor::new(&[len, cols], cos)?,
            sin: Tensor::new(&[len, cols], sin)?,
        })
    }

    /// STFT magnitudes of the rows of `x` (`rows × len`), `rows × frames·bins`.
    pub fn magnitudes(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let cols = self.frames * self.bins;
        let mut re = vec![0.0; rows * cols];
        let mut im = vec![0.0; rows * cols];
        gemm(MatRef::new(x, rows, self.len), MatRef::new(self.cos.data(), self.len, cols), &mut re, 0.0);
        gemm(MatRef::new(x, rows, self.len), MatRef::new(self.sin.data(), self.len, cols), &mut im, 0.0);
        re.iter().zip(&im).map(|(r, i)| (r * r + i * i + MAGNITUDE_EPS).sqrt()).collect()
    }

    /// Mean over every frame and bin of `(|STFT(target)| − |STFT(x)|)²`;
    /// `x` is `rows × len` on the tape, `target` holds the same layout.
    pub fn loss(&self, g: &mut Graph, x: Var, target: &[f64]) -> Result<Var, GradError> {
        let rows = g.value(x).rows();
        let want = self.magnitudes(target, rows);
        let cos = g.constant(self.cos.clone())?;
        let sin = g.constant(self.sin.clone())?;
        let re = g.matmul(x, cos)?;
        let im = g.matmul(x, sin)?;
        let re2 = g.square(re)?;
        let im2 = g.square(im)?;
        let pow = g.add(re2, im2)?;
        let pow = g.affine(pow, 1.0, MAGNITUDE_EPS)?;
        let mag = g.sqrt(pow)?;
        let want = g.constant(Tensor::new(&[rows, self.frames * self.bins], want)?)?;
        let diff = g.sub(want, mag)?;
        let sq = g.square(diff)?;
        g.mean(sq)
    }
}

/// Model, optimizer and sampling state of a training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub optimizer: OptimizerState,
    pub cfg: TrainConfig,
    /// Completed optimizer steps.
    pub step: u64,
    pub noise_rng: Rng,
    basis: PowerLossBasis,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Result<Self, TrainError> {
        cfg.validate(model.cfg.frame_shift)?;
        let basis = PowerLossBasis::new(cfg.chunk_len, cfg.fft_size, cfg.stft_hop)?;
        let optimizer = OptimizerState::new(&model.store);
        let mut noise_rng = seeded_rng(cfg.seed);
        noise_rng.set_stream(NOISE_STREAM);
        Ok(Self {
            model,
            optimizer,
            cfg,
            step: 0,
            noise_rng,
            basis,
        })
    }

    /// Rebuilds a trainer from saved state.
    pub fn resume(model: Model, cfg: TrainConfig, optimizer: OptimizerState, step: u64, noise_rng: Rng) -> Result<Self, TrainError> {
        let mut t = Self::new(model, cfg)?;
        if optimizer.first_moment.len() != t.model.store.len() {
            return Err(TrainError::Config("optimizer state does not match the model".into()));
        }
        t.optimizer = optimizer;
        t.step = step;
        t.noise_rng = noise_rng;
        Ok(t)
    }

    pub fn chunk_frames(&self) -> usize {
        self.cfg.chunk_frames(self.model.cfg.frame_shift)
    }

    /// Chunks drawn at optimizer step `step` (1-based): consecutive slots of
    /// the concatenated per-epoch permutations.
    pub fn chunks_for_step(&self, data: &TrainingData, step: u64) -> Vec<usize> {
        let n = data.chunks.len() as u64;
        let b = self.cfg.batch_size as u64;
        let mut cached: Option<(u64, Vec<usize>)> = None;
        (0..b)
            .map(|j| {
                let slot = (step - 1) * b + j;
                let (epoch, pos) = (slot / n, (slot % n) as usize);
                if cached.as_ref().map(|c| c.0) != Some(epoch) {
                    cached = Some((epoch, data.epoch_order(self.cfg.seed, epoch)));
                }
                cached.as_ref().expect("just filled").1[pos]
            })
            .collect()
    }

    /// Noisy teacher-forced batch for the next step, advancing the noise stream.
    pub fn next_batch(&mut self, data: &TrainingData) -> Result<(Batch, Vec<f64>), TrainError> {
        if data.chunk_frames != self.chunk_frames() {
            return Err(TrainError::Config(format!(
                "data cut into {}-frame chunks, training expects {}",
                data.chunk_frames,
                self.chunk_frames()
            )));
        }
        let sigma = self.cfg.noise_sigma;
        let mut segments = Vec::with_capacity(self.cfg.batch_size);
        for c in self.chunks_for_step(data, self.step + 1) {
            segments.push(data.segment(c, Some((&mut self.noise_rng, sigma)))?);
        }
        let targets: Vec<f64> = segments.iter().flat_map(|s| s.target.iter().copied()).collect();
        let batch = Batch::from_segments(&segments, data.chunk_frames, self.model.cfg.feature_dim())?;
        Ok((batch, targets))
    }

    /// One Adam step on `nll + λ·power`. A non-finite value anywhere aborts
    /// the step with a dump of the batch that produced it.
    pub fn train_step(&mut self, data: &TrainingData) -> Result<LossBreakdown, TrainError> {
        let step = self.step + 1;
        let chunks = self.chunks_for_step(data, step);
        let (batch, targets) = self.next_batch(data)?;
        let lr = noam_lr(step, self.cfg.base_lr, self.cfg.warmup_steps)?;
        match self.update(&batch, &targets, step, lr) {
            Err(e) if e.is_numeric() => {
                let dump = batch_dump(data, &chunks, &batch);
                log::error!("non-finite value at step {step}: {e}\n{dump}");
                Err(TrainError::NonFinite {
                    step,
                    cause: e.to_string(),
                    dump,
                })
            }
            other => other,
        }
    }

    fn update(&mut self, batch: &Batch, targets: &[f64], step: u64, lr: f64) -> Result<LossBreakdown, TrainError> {
        let mut g = Graph::new();
        let out = self.model.forward(&mut g, batch)?;
        let b = batch.batch;
        let len = batch.samples_per_segment();
        let xhat = g.reshape(out.mixture_mean, &[len, b])?;
        let xhat = g.transpose(xhat)?;
        let power = self.basis.loss(&mut g, xhat, targets)?;
        let total = if self.cfg.lambda_pl == 0.0 {
            out.nll
        } else {
            let weighted = g.scale(power, self.cfg.lambda_pl)?;
            g.add(out.nll, weighted)?
        };
        g.backward(total)?;
        self.model.store.zero_grads();
        g.accumulate_param_grads(&mut self.model.store);
        adam_step(&mut self.model.store, &mut self.optimizer, lr)?;
        self.step = step;
        Ok(LossBreakdown {
            step,
            nll: g.value(out.nll).item(),
            power: g.value(power).item(),
            total: g.value(total).item(),
            lr,
        })
    }

    /// Mean teacher-forced NLL per sample over every chunk of `data`, without
    /// input noise.
    pub fn evaluate(&self, data: &TrainingData) -> Result<f64, TrainError> {
        evaluate_nll(&self.model, data, self.cfg.batch_size)
    }
}

/// Where a batch came from and the range of every input it fed the model.
fn batch_dump(data: &TrainingData, chunks: &[usize], batch: &Batch) -> String {
    let mut out = String::new();
    for (j, &c) in chunks.iter().enumerate() {
        let (u, start) = data.chunks[c];
        out.push_str(&format!(
            "  segment {j}: chunk {c} = {} frames {start}..{}\n",
            data.utterances[u].name,
            start + data.chunk_frames
        ));
    }
    let stats = |name: &str, v: &[f64]| {
        let bad = v.iter().filter(|x| !x.is_finite()).count();
        let (lo, hi) = v.iter().filter(|x| x.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
        format!("  {name}: min {lo:e} max {hi:e} non-finite {bad}\n")
    };
    out.push_str(&stats("features", batch.features.data()));
    out.push_str(&stats("prev", &batch.prev));
    out.push_str(&stats("prediction", &batch.prediction));
    out.push_str(&stats("target", &batch.target));
    out
}

/// Mean teacher-forced NLL per sample over every chunk of `data`.
pub fn evaluate_nll(model: &Model, data: &TrainingData, batch_size: usize) -> Result<f64, TrainError> {
    let mut total = 0.0;
    let mut count = 0usize;
    let ids: Vec<usize> = (0..data.chunks.len()).collect();
    for group in ids.chunks(batch_size.max(1)) {
        let segments = group.iter().map(|&c| data.segment(c, None)).collect::<Result<Vec<_>, _>>()?;
        let batch = Batch::from_segments(&segments, data.chunk_frames, model.cfg.feature_dim())?;
        let mut g = Graph::new();
        let out = model.forward(&mut g, &batch)?;
        total += g.value(out.nll).item() * group.len() as f64;
        count += group.len();
    }
    Ok(total / count as f64)
}

/// Restores a noise generator from its saved position.
pub fn rng_from_state(seed: [u8; 32], stream: u64, word_pos: u128) -> Rng {
    let mut r = Rng::from_seed(seed);
    r.set_stream(stream);
    r.set_word_pos(word_pos);
    r
}

/// CSV writer for per-step losses; floats use shortest round-trip formatting.
pub struct LossLog<W: Write> {
    out: W,
}

impl<W: Write> LossLog<W> {
    pub const HEADER: &'static str = "step,nll,power,total,lr";

    pub fn new(mut out: W) -> Result<Self, TrainError> {
        writeln!(out, "{}", Self::HEADER)?;
        Ok(Self { out })
    }

    /// Appends to an existing log without repeating the header.
    pub fn append(out: W) -> Self {
        Self { out }
    }

    pub fn record(&mut self, l: &LossBreakdown) -> Result<(), TrainError> {
        writeln!(self.out, "{},{:?},{:?},{:?},{:?}", l.step, l.nll, l.power, l.total, l.lr)?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<(), TrainError> {
        self.out.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{extract_features, stft, FrameConfig};
    use crate::grad::gradcheck::check_gradients;
    use crate::model::ModelConfig;
    use rand::Rng as _;

    fn tiny_model_cfg() -> ModelConfig {
        ModelConfig {
            lp_order: 4,
            context_dim: 6,
            gru1_dim: 5,
            gru2_dim: 3,
            mixtures: 1,
            frame_shift: 8,
        }
    }

    fn tiny_train_cfg() -> TrainConfig {
        TrainConfig {
            chunk_len: 32,
            batch_size: 3,
            fft_size: 16,
            stft_hop: 8,
            warmup_steps: 10,
            base_lr: 1e-2,
            noise_sigma: 1e-3,
            ..TrainConfig::default()
        }
    }

    fn tiny_data(cfg: &ModelConfig, utts: usize, frames: usize, seed: u64) -> Vec<Utterance> {
        let mut rng = seeded_rng(seed);
        (0..utts)
            .map(|u| {
                let period = rng.random_range(20.0..40.0);
                let x: Vec<f64> = (0..frames * cfg.frame_shift)
                    .map(|i| 0.4 * (2.0 * PI * i as f64 / period).sin() + 0.05 * rng.random_range(-1.0..1.0))
                    .collect();
                let audio = AudioBuffer::new(x, 24_000).unwrap();
                let fc = FrameConfig {
                    frame_shift: cfg.frame_shift,
                    analysis_window: 4 * cfg.frame_shift,
                    lp_order: cfg.lp_order,
                    ..FrameConfig::default()
                };
                Utterance {
                    name: format!("u{u}"),
                    features: extract_features(&audio, &fc).unwrap(),
                    audio,
                }
            })
            .collect()
    }

    fn trainer(seed: u64) -> (Trainer, TrainingData) {
        let mc = tiny_model_cfg();
        let tc = tiny_train_cfg();
        let utts = tiny_data(&mc, 3, 13, seed);
        let data = TrainingData::new(utts, tc.chunk_frames(mc.frame_shift)).unwrap();
        let mut model = Model::new(mc, seed).unwrap();
        let tracks: Vec<&FeatureTrack> = data.utterances.iter().map(|u| &u.features).collect();
        model.fit_normalization(&tracks).unwrap();
        (Trainer::new(model, tc).unwrap(), data)
    }

    #[test]
    fn non_finite_weight_aborts_with_batch_dump() {
        let (mut t, data) = trainer(3);
        let id = t.model.gru1.u_h;
        let mut w = t.model.store.get(id).data().to_vec();
        w[0] = f64::NAN;
        t.model.store.set_data(id, w).unwrap();
        let err = t.train_step(&data).unwrap_err();
        assert!(err.is_numeric());
        let TrainError::NonFinite { step, dump, .. } = err else { panic!("{err}") };
        assert_eq!(step, 1);
        assert!(dump.contains("segment 0: chunk"), "{dump}");
        assert!(dump.contains("target: min"), "{dump}");
        assert_eq!(t.step, 0);
    }

    #[test]
    fn chunks_tile_each_utterance() {
        let mc = tiny_model_cfg();
        let mut utts = tiny_data(&mc, 3, 13, 1);
        let short = &mut utts[2];
        short.features = short.features.slice(0, 3);
        short.audio.samples.truncate(3 * mc.frame_shift);
        let data = TrainingData::new(utts.clone(), 4).unwrap();
        assert_eq!(data.chunks, vec![(0, 0), (0, 4), (0, 8), (1, 0), (1, 4), (1, 8)]);
        let covered = data.chunks.len() * 4;
        assert!(covered as f64 >= 0.9 * 26.0);
        assert!(matches!(TrainingData::new(utts[2..].to_vec(), 4), Err(TrainError::NoChunks(4))));
    }

    #[test]
    fn epochs_are_permutations() {
        let (t, data) = trainer(1);
        let per_epoch = data.chunks.len();
        let mut seen = Vec::new();
        let mut step = 1;
        while seen.len() < per_epoch {
            seen.extend(t.chunks_for_step(&data, step));
            step += 1;
        }
        seen.truncate(per_epoch);
        seen.sort_unstable();
        assert_eq!(seen, (0..per_epoch).collect::<Vec<_>>());
        assert_ne!(data.epoch_order(1, 0), data.epoch_order(1, 1));
    }

    #[test]
    fn basis_magnitudes_match_fft_stft() {
        let mut rng = seeded_rng(4);
        let x: Vec<f64> = (0..960).map(|_| rng.random_range(-0.5..0.5)).collect();
        let basis = PowerLossBasis::new(960, 512, 120).unwrap();
        assert_eq!(basis.frames, 4);
        let mags = basis.magnitudes(&x, 1);
        let spec = stft(&x, 512, 120).unwrap();
        for (a, b) in mags.iter().zip(&spec.magnitudes) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn power_loss_values() {
        let mut rng = seeded_rng(5);
        let x: Vec<f64> = (0..64).map(|_| rng.random_range(-0.5..0.5)).collect();
        let basis = PowerLossBasis::new(64, 16, 8).unwrap();
        let run = |a: &[f64], b: &[f64]| {
            let mut g = Graph::new();
            let av = g.constant(Tensor::new(&[1, 64], a.to_vec()).unwrap()).unwrap();
            let l = basis.loss(&mut g, av, b).unwrap();
            g.value(l).item()
        };
        assert!(run(&x, &x).abs() < 1e-20);
        // sign flips leave magnitudes unchanged
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!(run(&neg, &x) < 1e-20);
        // against magnitudes from the FFT path
        let y: Vec<f64> = (0..64).map(|_| rng.random_range(-0.5..0.5)).collect();
        let (sx, sy) = (stft(&x, 16, 8).unwrap(), stft(&y, 16, 8).unwrap());
        let want = sx.magnitudes.iter().zip(&sy.magnitudes).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / sx.magnitudes.len() as f64;
        assert!((run(&x, &y) - want).abs() < 1e-9 * want.max(1.0));
    }

    #[test]
    fn power_loss_gradient() {
        let mut rng = seeded_rng(6);
        let basis = PowerLossBasis::new(24, 8, 4).unwrap();
        let target: Vec<f64> = (0..48).map(|_| rng.random_range(-0.5..0.5)).collect();
        let x = Tensor::new(&[2, 24], (0..48).map(|_| rng.random_range(-0.5..0.5)).collect()).unwrap();
        let report = check_gradients(
            &[x],
            |xs| {
                let mut g = Graph::new();
                let v = g.variable(xs[0].clone()).unwrap();
                let l = basis.loss(&mut g, v, &target).unwrap();
                (g, vec![v], l)
            },
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{}", report.max_rel_error);
    }

    #[test]
    fn total_is_weighted_sum() {
        let (mut t, data) = trainer(7);
        for _ in 0..3 {
            let l = t.train_step(&data).unwrap();
            assert!((l.total - (l.nll + 10.0 * l.power)).abs() <= 1e-12 * l.total.abs().max(1.0));
        }
    }

    #[test]
    fn zero_weight_trains_on_nll_alone() {
        let (mut t0, data) = trainer(8);
        t0.cfg.lambda_pl = 0.0;
        let (mut t1, _) = trainer(8);
        let a = t0.train_step(&data).unwrap();
        let b = t1.train_step(&data).unwrap();
        assert_eq!(a.total, a.nll);
        assert_eq!(a.nll, b.nll);
        assert_eq!(a.power, b.power);
        let a2 = t0.train_step(&data).unwrap();
        let b2 = t1.train_step(&data).unwrap();
        assert_ne!(a2.nll, b2.nll);
    }

    #[test]
    fn training_reduces_loss() {
        let (mut t, data) = trainer(9);
        let before = t.evaluate(&data).unwrap();
        for _ in 0..60 {
            t.train_step(&data).unwrap();
        }
        let after = t.evaluate(&data).unwrap();
        assert!(after < before - 0.1, "{before} -> {after}");
    }

    #[test]
    fn same_seed_same_trajectory() {
        let (mut a, data) = trainer(10);
        let (mut b, _) = trainer(10);
        for _ in 0..4 {
            assert_eq!(a.train_step(&data).unwrap(), b.train_step(&data).unwrap());
        }
        assert_eq!(a.model.store, b.model.store);
    }

    #[test]
    fn resumed_noise_stream_continues() {
        let (mut a, data) = trainer(11);
        a.train_step(&data).unwrap();
        let r = &a.noise_rng;
        let mut copy = rng_from_state(r.get_seed(), r.get_stream(), r.get_word_pos());
        let mut orig = a.noise_rng.clone();
        for _ in 0..10 {
            assert_eq!(orig.random::<u64>(), copy.random::<u64>());
        }
    }

    #[test]
    fn loss_log_round_trips() {
        let mut buf = Vec::new();
        let l = LossBreakdown {
            step: 3,
            nll: -1.234_567_890_123_456_7,
            power: 0.1 + 0.2,
            total: 1.0 / 3.0,
            lr: 2.5e-7,
        };
        {
            let mut log = LossLog::new(&mut buf).unwrap();
            log.record(&l).unwrap();
        }
        let text = String::from_utf8(buf).unwrap();
        let line = text.lines().nth(1).unwrap();
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f[0], "3");
        assert_eq!(f[1].parse::<f64>().unwrap(), l.nll);
        assert_eq!(f[2].parse::<f64>().unwrap(), l.power);
        assert_eq!(f[3].parse::<f64>().unwrap(), l.total);
        assert_eq!(f[4].parse::<f64>().unwrap(), l.lr);
    }

    #[test]
    fn config_validation() {
        let c = TrainConfig::default();
        assert!(c.validate(120).is_ok());
        assert!(TrainConfig { chunk_len: 1000, ..c.clone() }.validate(120).is_err());
        assert!(TrainConfig { batch_size: 0, ..c.clone() }.validate(120).is_err());
        assert!(TrainConfig { lambda_pl: -1.0, ..c.clone() }.validate(120).is_err());
        assert!(TrainConfig { fft_size: 1024, ..c }.validate(120).is_err());
    }
}
