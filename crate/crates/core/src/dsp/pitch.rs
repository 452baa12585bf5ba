//! Normalized cross-correlation pitch tracker.

use super::{AudioBuffer, FrameConfig};

/// Peaks within this fraction of the global maximum compete; the shortest lag wins.
const PEAK_FRACTION: f64 = 0.9;
const ENERGY_FLOOR: f64 = 1e-10;
/// Correlation runs on a lowpassed copy so high resonances sampled at
/// integer lags do not favour multiples of a fractional period.
const LOWPASS_HZ: f64 = 2000.0;
const LOWPASS_TAPS: usize = 49;

/// Zero-phase Hann-windowed sinc lowpass.
fn lowpass(x: &[f64], sr: f64) -> Vec<f64> {
    let fc = (LOWPASS_HZ / sr).min(0.5);
    let half = (LOWPASS_TAPS / 2) as isize;
    let win = super::hann(LOWPASS_TAPS + 1);
    let mut taps: Vec<f64> = (-half..=half)
        .map(|i| {
            let t = i as f64;
            let sinc = if i == 0 { 2.0 * fc } else { (2.0 * std::f64::consts::PI * fc * t).sin() / (std::f64::consts::PI * t) };
            sinc * win[(i + half + 1) as usize]
        })
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    (0..x.len() as isize)
        .map(|n| taps.iter().enumerate().map(|(j, h)| h * sample_at(x, n + j as isize - half)).sum())
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PitchFrame {
    /// Hz; 0 when unvoiced.
    pub f0: f64,
    pub voiced: bool,
    /// Normalized correlation at the chosen lag.
    pub strength: f64,
}

impl PitchFrame {
    const UNVOICED: PitchFrame = PitchFrame {
        f0: 0.0,
        voiced: false,
        strength: 0.0,
    };
}

fn sample_at(x: &[f64], i: isize) -> f64 {
    if i < 0 {
        0.0
    } else {
        x.get(i as usize).copied().unwrap_or(0.0)
    }
}

/// One pitch estimate per `frame_shift` hop, centred like [`super::frame_signal`].
pub fn estimate_f0(audio: &AudioBuffer, cfg: &FrameConfig) -> Vec<PitchFrame> {
    let hop = cfg.frame_shift.max(1);
    let frames = audio.len() / hop;
    let sr = audio.sample_rate as f64;
    let lag_min = ((sr / cfg.f0_max).floor() as usize).max(2);
    let lag_max = (sr / cfg.f0_min).ceil() as usize;
    let w = cfg.analysis_window;
    let x = lowpass(&audio.samples, sr);

    let mut out = Vec::with_capacity(frames);
    let mut seg = vec![0.0; w + lag_max + 1];
    for t in 0..frames {
        let start = (t * hop + hop / 2) as isize - (w / 2) as isize;
        for (i, s) in seg.iter_mut().enumerate() {
            *s = sample_at(&x, start + i as isize);
        }
        out.push(frame_pitch(&seg, w, lag_min, lag_max, sr, cfg.voicing_threshold));
    }
    out
}

fn frame_pitch(seg: &[f64], w: usize, lag_min: usize, lag_max: usize, sr: f64, threshold: f64) -> PitchFrame {
    let head = &seg[..w];
    let e0: f64 = head.iter().map(|v| v * v).sum();
    if e0 < ENERGY_FLOOR {
        return PitchFrame::UNVOICED;
    }
    // Running energy of the lagged window.
    let mut ek: f64 = seg[lag_min - 1..lag_min - 1 + w].iter().map(|v| v * v).sum();
    let mut nccf = vec![0.0; lag_max + 2];
    for k in lag_min - 1..=lag_max + 1 {
        if k > lag_min - 1 {
            ek += seg[k + w - 1].powi(2) - seg[k - 1].powi(2);
        }
        let cross: f64 = head.iter().zip(&seg[k..k + w]).map(|(a, b)| a * b).sum();
        let denom = (e0 * ek.max(0.0)).sqrt();
        nccf[k] = if denom > ENERGY_FLOOR { cross / denom } else { 0.0 };
    }

    let best = (lag_min..=lag_max).map(|k| nccf[k]).fold(f64::NEG_INFINITY, f64::max);
    if !(best > 0.0) {
        return PitchFrame::UNVOICED;
    }
    let lag = (lag_min..=lag_max)
        .find(|&k| nccf[k] >= PEAK_FRACTION * best && nccf[k] >= nccf[k - 1] && nccf[k] >= nccf[k + 1])
        .unwrap_or_else(|| (lag_min..=lag_max).find(|&k| nccf[k] == best).unwrap_or(lag_min));
    let strength = nccf[lag];
    if strength <= threshold {
        return PitchFrame {
            f0: 0.0,
            voiced: false,
            strength,
        };
    }
    let (ym, y0, yp) = (nccf[lag - 1], nccf[lag], nccf[lag + 1]);
    let curv = ym - 2.0 * y0 + yp;
    let delta = if curv < 0.0 { (0.5 * (ym - yp) / curv).clamp(-0.5, 0.5) } else { 0.0 };
    PitchFrame {
        f0: sr / (lag as f64 + delta),
        voiced: true,
        strength,
    }
}
