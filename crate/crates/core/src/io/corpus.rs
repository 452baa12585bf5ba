//! Synthetic speech-like corpora with known pitch and spectral envelopes.
//!
//! Voiced stretches are band-limited sawtooth waves following a smooth F0
//! contour; unvoiced stretches are white noise. Both drive an all-pole filter
//! whose poles drift slowly across the utterance and are held per frame, so
//! every frame's envelope is exactly an order-M linear predictor. Each frame's
//! excitation is divided by the filter's power gain, which keeps the level
//! steady while the poles move.

use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::dsp::{extract_features, AudioBuffer, DspError, FeatureTrack, FrameConfig};
use super::wav::{f64_to_pcm16, pcm16_to_f64};
use crate::grad::{seeded_rng, Rng};
use crate::trainer::Utterance;

pub const CORPUS_PEAK: f64 = 0.5;
pub const F0_RANGE: (f64, f64) = (100.0, 300.0);
/// Unvoiced excitation level relative to the voiced excitation RMS.
const NOISE_LEVEL: f64 = 0.3;
/// Breath noise mixed into voiced excitation.
const ASPIRATION: f64 = 0.02;
const POLE_RADIUS: (f64, f64) = (0.7, 0.92);
const VOICED_MS: (f64, f64) = (250.0, 600.0);
const UNVOICED_MS: (f64, f64) = (60.0, 150.0);
/// Excitation crossfade between segments.
const FADE: usize = 240;

/// Generator output for one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthUtterance {
    pub audio: AudioBuffer,
    /// Programmed F0 per sample, 0 in unvoiced stretches.
    pub f0: Vec<f64>,
    /// Predictor coefficients of the synthesis filter per frame.
    pub lpc: Vec<Vec<f64>>,
}

/// `(start, end, voiced)` sample ranges covering `len` samples.
fn segment_plan(len: usize, sr: f64, rng: &mut Rng) -> Vec<(usize, usize, bool)> {
    let mut out = Vec::new();
    let mut pos = 0;
    let mut voiced = true;
    while pos < len {
        let (lo, hi) = if voiced { VOICED_MS } else { UNVOICED_MS };
        let dur = (rng.random_range(lo..hi) * sr / 1000.0) as usize;
        let end = (pos + dur).min(len);
        out.push((pos, end, voiced));
        pos = end;
        voiced = !voiced;
    }
    out
}

/// Resonance angles stay inside the harmonic band so no resonance is driven
/// by aspiration noise alone.
const POLE_ANGLE: (f64, f64) = (0.12, 0.8 * PI);

/// Sorted resonance angles with a minimum spacing and moderate radii.
fn pole_set(pairs: usize, rng: &mut Rng) -> Vec<(f64, f64)> {
    loop {
        let mut th: Vec<f64> = (0..pairs).map(|_| rng.random_range(POLE_ANGLE.0..POLE_ANGLE.1)).collect();
        th.sort_by(f64::total_cmp);
        if th.windows(2).all(|w| w[1] - w[0] > 0.12) {
            return th.into_iter().map(|t| (rng.random_range(POLE_RADIUS.0..POLE_RADIUS.1), t)).collect();
        }
    }
}

/// Impulse response samples used to measure a filter's power gain.
const GAIN_TAPS: usize = 1024;

/// RMS gain of `1 / (1 − Σ αᵢ z⁻ⁱ)` for white input.
fn power_gain(alpha: &[f64]) -> f64 {
    let mut h = vec![0.0; GAIN_TAPS];
    for n in 0..GAIN_TAPS {
        let p: f64 = (1..=alpha.len().min(n)).map(|i| alpha[i - 1] * h[n - i]).sum();
        h[n] = p + if n == 0 { 1.0 } else { 0.0 };
    }
    h.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// RMS gain of the same filter for the 1/k harmonic series at `f0` cycles per sample.
fn harmonic_gain(alpha: &[f64], f0: f64) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for k in 1..=(0.45 / f0) as usize {
        let w = 2.0 * PI * k as f64 * f0;
        let (mut re, mut im) = (1.0, 0.0);
        for (i, a) in alpha.iter().enumerate() {
            let p = w * (i + 1) as f64;
            re -= a * p.cos();
            im += a * p.sin();
        }
        let amp = 1.0 / (k * k) as f64;
        num += amp / (re * re + im * im);
        den += amp;
    }
    (num / den).sqrt()
}

/// Predictor `α` with `1 − Σ αᵢ z⁻ⁱ = Π (1 − 2r cosθ z⁻¹ + r² z⁻²)` (times `1 − r z⁻¹` for odd orders).
fn poles_to_lpc(poles: &[(f64, f64)], real_pole: Option<f64>) -> Vec<f64> {
    let mut poly = vec![1.0];
    let mut mul = |f: &[f64]| {
        let mut out = vec![0.0; poly.len() + f.len() - 1];
        for (i, a) in poly.iter().enumerate() {
            for (j, b) in f.iter().enumerate() {
                out[i + j] += a * b;
            }
        }
        poly = out;
    };
    for &(r, t) in poles {
        mul(&[1.0, -2.0 * r * t.cos(), r * r]);
    }
    if let Some(r) = real_pole {
        mul(&[1.0, -r]);
    }
    poly[1..].iter().map(|c| -c).collect()
}

/// One utterance of `len` samples with an order-`lp_order` envelope.
pub fn synth_utterance(len: usize, sample_rate: u32, frame_shift: usize, lp_order: usize, rng: &mut Rng) -> SynthUtterance {
    let sr = sample_rate as f64;
    let plan = segment_plan(len, sr, rng);

    // Programmed F0 per sample: a log-linear glide per voiced segment.
    let mut f0 = vec![0.0; len];
    for &(a, b, voiced) in &plan {
        if !voiced {
            continue;
        }
        let start: f64 = rng.random_range(F0_RANGE.0..F0_RANGE.1);
        let end = (start * rng.random_range(0.8..1.25)).clamp(F0_RANGE.0, F0_RANGE.1);
        let n = (b - a).max(1) as f64;
        for (i, f) in f0[a..b].iter_mut().enumerate() {
            *f = start * (end / start).powf(i as f64 / n);
        }
    }

    // Excitation: harmonics with 1/k amplitudes up to 0.45·sr, noise elsewhere.
    let mut voiced_exc = vec![0.0; len];
    let mut held_f0 = vec![0.0; len];
    let mut phase = 0.0f64;
    let mut last_f0 = F0_RANGE.0;
    for n in 0..len {
        let f = if f0[n] > 0.0 { f0[n] } else { last_f0 };
        last_f0 = f;
        held_f0[n] = f;
        phase = (phase + f / sr).fract();
        let harmonics = (0.45 * sr / f) as usize;
        let mut s = 0.0;
        for k in 1..=harmonics {
            s += (2.0 * PI * k as f64 * phase).sin() / k as f64;
        }
        let asp: f64 = StandardNormal.sample(rng);
        voiced_exc[n] = 0.6 * s + ASPIRATION * asp;
    }
    let mut gate: Vec<f64> = f0.iter().map(|&f| if f > 0.0 { 1.0 } else { 0.0 }).collect();
    smooth_gate(&mut gate);
    let mut noise_exc = vec![0.0; len];
    for n in 0..len {
        let z: f64 = StandardNormal.sample(rng);
        voiced_exc[n] *= gate[n];
        noise_exc[n] = (1.0 - gate[n]) * NOISE_LEVEL * z;
    }

    // Slowly drifting all-pole envelope, held per frame.
    let pairs = lp_order / 2;
    let real_pole = (lp_order % 2 == 1).then(|| rng.random_range(-0.5..0.5));
    let from = pole_set(pairs, rng);
    let to = pole_set(pairs, rng);
    let frames = len.div_ceil(frame_shift);
    let mut lpc = Vec::with_capacity(frames);
    let mut x = vec![0.0; len];
    for t in 0..frames {
        let a = if frames > 1 { t as f64 / (frames - 1) as f64 } else { 0.0 };
        let poles: Vec<(f64, f64)> = from
            .iter()
            .zip(&to)
            .map(|(p, q)| (p.0 + a * (q.0 - p.0), p.1 + a * (q.1 - p.1)))
            .collect();
        let alpha = poles_to_lpc(&poles, real_pole);
        let range = t * frame_shift..((t + 1) * frame_shift).min(len);
        let gv = 1.0 / harmonic_gain(&alpha, held_f0[(range.start + range.end) / 2] / sr);
        let gu = 1.0 / power_gain(&alpha);
        for n in range {
            let p: f64 = (1..=lp_order.min(n)).map(|i| alpha[i - 1] * x[n - i]).sum();
            x[n] = p + gv * voiced_exc[n] + gu * noise_exc[n];
        }
        lpc.push(alpha);
    }

    let mut audio = AudioBuffer::new(x, sample_rate).expect("stable filter keeps samples finite");
    audio.normalize_peak(CORPUS_PEAK);
    SynthUtterance { audio, f0, lpc }
}

/// Linear ramps of `FADE` samples at every voicing change.
fn smooth_gate(gate: &mut [f64]) {
    let raw = gate.to_vec();
    for n in 1..raw.len() {
        if raw[n] != raw[n - 1] {
            let (from, to) = (raw[n - 1], raw[n]);
            let start = n.saturating_sub(FADE / 2);
            let end = (n + FADE / 2).min(raw.len());
            for (i, g) in gate[start..end].iter_mut().enumerate() {
                let a = (i as f64 + 0.5) / (end - start) as f64;
                *g = from + a * (to - from);
            }
        }
    }
}

/// Rounds samples to 16-bit PCM resolution, as a WAV round trip would.
pub fn quantize_audio(audio: &AudioBuffer) -> AudioBuffer {
    AudioBuffer {
        samples: audio.samples.iter().map(|&s| pcm16_to_f64(f64_to_pcm16(s))).collect(),
        sample_rate: audio.sample_rate,
    }
}

/// Rounds features to 32-bit floats, as a feature-file round trip would.
pub fn quantize_track(track: &FeatureTrack) -> Result<FeatureTrack, DspError> {
    let rows = track.rows().iter().map(|&v| v as f32 as f64).collect();
    FeatureTrack::from_rows(track.lp_order(), track.frame_shift(), track.sample_rate(), rows)
}

fn utterance(name: String, audio: &AudioBuffer, frame: &FrameConfig) -> Result<Utterance, DspError> {
    let audio = quantize_audio(audio);
    let features = quantize_track(&extract_features(&audio, frame)?)?;
    Ok(Utterance { name, audio, features })
}

/// `n` utterances of `duration_s` seconds with features extracted by
/// [`extract_features`], quantized to file precision.
pub fn synth_corpus(n: usize, duration_s: f64, seed: u64, frame: &FrameConfig) -> Result<Vec<Utterance>, DspError> {
    frame.validate()?;
    let mut rng = seeded_rng(seed);
    let len = (duration_s * frame.sample_rate as f64).round() as usize;
    (0..n)
        .map(|i| {
            let u = synth_utterance(len, frame.sample_rate, frame.frame_shift, frame.lp_order, &mut rng);
            utterance(format!("utt{i:04}"), &u.audio, frame)
        })
        .collect()
}

/// First-order autoregressive noise `x_n = a·x_{n−1} + σ·e_n`, peak-normalized.
pub fn ar1_corpus(n: usize, duration_s: f64, coeff: f64, seed: u64, frame: &FrameConfig) -> Result<Vec<Utterance>, DspError> {
    frame.validate()?;
    let mut rng = seeded_rng(seed);
    let len = (duration_s * frame.sample_rate as f64).round() as usize;
    (0..n)
        .map(|i| {
            let mut x = vec![0.0; len];
            let mut prev = 0.0;
            for v in x.iter_mut() {
                let e: f64 = StandardNormal.sample(&mut rng);
                prev = coeff * prev + e;
                *v = prev;
            }
            let mut audio = AudioBuffer::new(x, frame.sample_rate)?;
            audio.normalize_peak(CORPUS_PEAK);
            utterance(format!("ar{i:04}"), &audio, frame)
        })
        .collect()
}
