use std::f64::consts::PI;

use super::{autocorrelate, estimate_f0, hann, levinson_durbin, lpc_to_lsf, lsf_to_lpc, AudioBuffer, DspError, FrameConfig};

/// Below this frame energy the predictor is left flat.
const SILENT_R0: f64 = 1e-12;
const ENERGY_OFFSET: f64 = 1e-10;
/// Gaussian lag-window bandwidth in Hz.
const LAG_WINDOW_HZ: f64 = 60.0;
/// White-noise correction: `r0` is raised by this fraction (−30 dB floor).
const NOISE_FLOOR: f64 = 1e-3;

/// Lag window and white-noise correction, so the predictor follows the
/// spectral envelope rather than individual harmonics and its synthesis
/// filter keeps a bounded noise gain.
fn condition_autocorrelation(r: &[f64], sample_rate: f64) -> Vec<f64> {
    r.iter()
        .enumerate()
        .map(|(k, &v)| {
            if k == 0 {
                v * (1.0 + NOISE_FLOOR)
            } else {
                let a = 2.0 * PI * LAG_WINDOW_HZ * k as f64 / sample_rate;
                v * (-0.5 * a * a).exp()
            }
        })
        .collect()
}

/// Hann-windowed analysis frames, one per hop, each centred on its hop.
/// Samples beyond the signal edges repeat the edge sample.
pub fn frame_signal(audio: &AudioBuffer, cfg: &FrameConfig) -> Result<Vec<Vec<f64>>, DspError> {
    cfg.validate()?;
    let w = cfg.analysis_window;
    let x = &audio.samples;
    if x.len() < w {
        return Err(DspError::InputTooShort { needed: w, got: x.len() });
    }
    let hop = cfg.frame_shift;
    let window = hann(w);
    let last = x.len() as isize - 1;
    let frames = x.len() / hop;
    Ok((0..frames)
        .map(|t| {
            let start = (t * hop + hop / 2) as isize - (w / 2) as isize;
            window
                .iter()
                .enumerate()
                .map(|(i, wv)| wv * x[(start + i as isize).clamp(0, last) as usize])
                .collect()
        })
        .collect())
}

/// Frame-rate conditioning: `[log_f0, voicing, log_energy, lsf_1..lsf_M]` per
/// frame, plus the predictor coefficients implied by each frame's LSFs.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTrack {
    lp_order: usize,
    frame_shift: usize,
    sample_rate: u32,
    rows: Vec<f64>,
    lpc: Vec<f64>,
}

impl FeatureTrack {
    pub const LOG_F0: usize = 0;
    pub const VOICING: usize = 1;
    pub const LOG_ENERGY: usize = 2;
    pub const LSF_START: usize = 3;

    pub fn width_for(lp_order: usize) -> usize {
        lp_order + 3
    }

    /// Validates rows and derives the per-frame predictor from the LSFs.
    pub fn from_rows(lp_order: usize, frame_shift: usize, sample_rate: u32, rows: Vec<f64>) -> Result<Self, DspError> {
        let width = Self::width_for(lp_order);
        if rows.len() % width != 0 {
            return Err(DspError::Track(format!("row data length {} is not a multiple of width {width}", rows.len())));
        }
        let mut lpc = Vec::with_capacity(rows.len() / width * lp_order);
        for (t, row) in rows.chunks(width).enumerate() {
            let v = row[Self::VOICING];
            if v != 0.0 && v != 1.0 {
                return Err(DspError::Track(format!("frame {t}: voicing flag {v} is not binary")));
            }
            if row.iter().any(|x| !x.is_finite()) {
                return Err(DspError::Track(format!("frame {t}: non-finite value")));
            }
            let coeffs = lsf_to_lpc(&row[Self::LSF_START..])
                .map_err(|e| DspError::Track(format!("frame {t}: {e}")))?;
            lpc.extend(coeffs);
        }
        Ok(Self {
            lp_order,
            frame_shift,
            sample_rate,
            rows,
            lpc,
        })
    }

    pub fn empty(lp_order: usize, frame_shift: usize, sample_rate: u32) -> Self {
        Self {
            lp_order,
            frame_shift,
            sample_rate,
            rows: Vec::new(),
            lpc: Vec::new(),
        }
    }

    pub fn frames(&self) -> usize {
        self.rows.len() / self.width()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn width(&self) -> usize {
        Self::width_for(self.lp_order)
    }

    pub fn lp_order(&self) -> usize {
        self.lp_order
    }

    pub fn frame_shift(&self) -> usize {
        self.frame_shift
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn rows(&self) -> &[f64] {
        &self.rows
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let w = self.width();
        &self.rows[t * w..(t + 1) * w]
    }

    pub fn log_f0(&self, t: usize) -> f64 {
        self.row(t)[Self::LOG_F0]
    }

    /// F0 in Hz, 0 when unvoiced.
    pub fn f0(&self, t: usize) -> f64 {
        if self.voiced(t) {
            self.log_f0(t).exp()
        } else {
            0.0
        }
    }

    pub fn voiced(&self, t: usize) -> bool {
        self.row(t)[Self::VOICING] == 1.0
    }

    pub fn log_energy(&self, t: usize) -> f64 {
        self.row(t)[Self::LOG_ENERGY]
    }

    pub fn lsf(&self, t: usize) -> &[f64] {
        &self.row(t)[Self::LSF_START..]
    }

    pub fn lpc(&self, t: usize) -> &[f64] {
        &self.lpc[t * self.lp_order..(t + 1) * self.lp_order]
    }

    /// Audio length this track conditions.
    pub fn samples(&self) -> usize {
        self.frames() * self.frame_shift
    }

    /// Frames `[start, end)` as a new track.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        let w = self.width();
        Self {
            lp_order: self.lp_order,
            frame_shift: self.frame_shift,
            sample_rate: self.sample_rate,
            rows: self.rows[start * w..end * w].to_vec(),
            lpc: self.lpc[start * self.lp_order..end * self.lp_order].to_vec(),
        }
    }
}

/// Per-frame pitch, energy and LSFs of `audio`.
pub fn extract_features(audio: &AudioBuffer, cfg: &FrameConfig) -> Result<FeatureTrack, DspError> {
    let frames = frame_signal(audio, cfg)?;
    let pitch = estimate_f0(audio, cfg);
    let m = cfg.lp_order;
    let width = FeatureTrack::width_for(m);
    let mut rows = Vec::with_capacity(frames.len() * width);
    for (frame, p) in frames.iter().zip(&pitch) {
        let r = autocorrelate(frame, m)?;
        let coeffs = if r[0] > SILENT_R0 {
            levinson_durbin(&condition_autocorrelation(&r, audio.sample_rate as f64), m)?.coeffs
        } else {
            vec![0.0; m]
        };
        let lsf = lpc_to_lsf(&coeffs).or_else(|_| flat_lsf(m))?;
        rows.push(if p.voiced { p.f0.ln() } else { 0.0 });
        rows.push(if p.voiced { 1.0 } else { 0.0 });
        rows.push((r[0] + ENERGY_OFFSET).ln());
        rows.extend(lsf);
    }
    FeatureTrack::from_rows(m, cfg.frame_shift, audio.sample_rate, rows)
}

/// LSFs of the zero predictor: `kπ/(M+1)`.
fn flat_lsf(m: usize) -> Result<Vec<f64>, DspError> {
    Ok((1..=m).map(|k| k as f64 * PI / (m + 1) as f64).collect())
}
