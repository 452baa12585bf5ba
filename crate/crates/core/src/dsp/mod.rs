//! Classical speech analysis: framing, linear prediction, line spectral
//! frequencies, pitch tracking and short-time spectra.

mod features;
mod lpc;
mod lsf;
mod pitch;
mod stft;

use thiserror::Error;

pub use features::{extract_features, frame_signal, FeatureTrack};
pub use lpc::{autocorrelate, is_stable, levinson_durbin, reflection_coefficients, LpAnalysis, LpFilter};
pub use lsf::{lpc_to_lsf, lsf_to_lpc};
pub use pitch::{estimate_f0, PitchFrame};
pub use stft::{stft, Spectrogram};

pub const DEFAULT_SAMPLE_RATE: u32 = 24_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DspError {
    #[error("input too short: need {needed} samples, got {got}")]
    InputTooShort { needed: usize, got: usize },
    #[error("empty frame")]
    EmptyFrame,
    #[error("max lag {max_lag} must be below frame length {len}")]
    LagTooLarge { max_lag: usize, len: usize },
    #[error("degenerate frame: r0 = {r0}")]
    DegenerateFrame { r0: f64 },
    #[error("autocorrelation has {got} lags, order {order} needs {needed}")]
    TooFewLags { order: usize, needed: usize, got: usize },
    #[error("unstable LP filter (reflection coefficient {index} = {value})")]
    UnstableFilter { index: usize, value: f64 },
    #[error("line spectral frequencies must be strictly increasing inside (0, pi); violated at index {index}")]
    NonMonotoneLsf { index: usize },
    #[error("found {found} line spectral frequencies, expected {expected}")]
    RootCount { found: usize, expected: usize },
    #[error("non-finite sample at index {index}")]
    NonFiniteSample { index: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("feature track: {0}")]
    Track(String),
}

/// Mono audio in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self, DspError> {
        if let Some(index) = samples.iter().position(|s| !s.is_finite()) {
            return Err(DspError::NonFiniteSample { index });
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, s| m.max(s.abs()))
    }

    /// Scales so the absolute peak equals `target` (no-op on silence).
    pub fn normalize_peak(&mut self, target: f64) {
        let p = self.peak();
        if p > 0.0 {
            let g = target / p;
            self.samples.iter_mut().for_each(|s| *s *= g);
        }
    }
}

/// Framing and analysis settings shared by feature extraction and the model.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameConfig {
    /// Samples per frame hop (120 = 5 ms at 24 kHz).
    pub frame_shift: usize,
    pub analysis_window: usize,
    pub lp_order: usize,
    pub f0_min: f64,
    pub f0_max: f64,
    /// Normalized autocorrelation peak above which a frame counts as voiced.
    pub voicing_threshold: f64,
    pub sample_rate: u32,
}

impl Default for FrameConfig {
    fn default() -> Self {
        Self {
            frame_shift: 120,
            analysis_window: 480,
            lp_order: 16,
            f0_min: 60.0,
            f0_max: 400.0,
            voicing_threshold: 0.5,
            sample_rate: DEFAULT_SAMPLE_RATE,
        }
    }
}

impl FrameConfig {
    pub fn validate(&self) -> Result<(), DspError> {
        if self.frame_shift == 0 {
            return Err(DspError::InvalidConfig("frame_shift must be >= 1".into()));
        }
        if self.analysis_window < self.frame_shift {
            return Err(DspError::InvalidConfig("analysis_window must be >= frame_shift".into()));
        }
        if self.lp_order == 0 {
            return Err(DspError::InvalidConfig("lp_order must be >= 1".into()));
        }
        if !(self.f0_min > 0.0 && self.f0_max > self.f0_min) {
            return Err(DspError::InvalidConfig("need 0 < f0_min < f0_max".into()));
        }
        Ok(())
    }
}

/// Periodic Hann window of length `n`.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}
