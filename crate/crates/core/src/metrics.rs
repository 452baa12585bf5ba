//! Objective comparison of a synthesized waveform against its reference.

use thiserror::Error;

use crate::dsp::{estimate_f0, stft, AudioBuffer, DspError, FrameConfig};

/// Magnitudes below this are clamped before taking logs.
pub const MAGNITUDE_FLOOR: f64 = 1e-10;
pub const LSD_FFT_SIZE: usize = 512;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("sample rates differ: reference {reference} Hz, synthesized {synthesized} Hz")]
    SampleRate { reference: u32, synthesized: u32 },
    #[error("lengths differ by more than one frame: reference {reference} samples, synthesized {synthesized}")]
    Length { reference: usize, synthesized: usize },
    #[error(transparent)]
    Dsp(#[from] DspError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    /// Mean per-frame RMS difference of log magnitudes, dB.
    pub lsd_db: f64,
    /// RMS F0 error over frames both signals call voiced; `None` if there are none.
    pub f0_rmse_hz: Option<f64>,
    /// Fraction of frames with matching voicing decisions.
    pub voicing_agreement: f64,
    pub frames: usize,
    pub voiced_frames: usize,
}

impl Metrics {
    pub fn report(&self) -> String {
        let f0 = match self.f0_rmse_hz {
            Some(v) => format!("{v:.3}"),
            None => "n/a".to_string(),
        };
        format!(
            "lsd_db {:.3}\nf0_rmse_hz {f0}\nvoicing_agreement_pct {:.2}\nframes {}\nvoiced_frames {}\n",
            self.lsd_db,
            100.0 * self.voicing_agreement,
            self.frames,
            self.voiced_frames
        )
    }
}

/// Log-spectral distance in dB between equal-length signals, Hann frames of
/// `fft_size` every `hop` samples.
pub fn log_spectral_distance(reference: &[f64], synthesized: &[f64], fft_size: usize, hop: usize) -> Result<f64, DspError> {
    let a = stft(reference, fft_size, hop)?;
    let b = stft(synthesized, fft_size, hop)?;
    let db = |m: f64| 20.0 * m.max(MAGNITUDE_FLOOR).log10();
    let total: f64 = (0..a.frames.min(b.frames))
        .map(|t| {
            let sq: f64 = a.frame(t).iter().zip(b.frame(t)).map(|(x, y)| (db(*x) - db(*y)).powi(2)).sum();
            (sq / a.bins as f64).sqrt()
        })
        .sum();
    Ok(total / a.frames.min(b.frames) as f64)
}

/// LSD, pitch and voicing agreement. Lengths may differ by up to one frame
/// hop; the longer signal is truncated.
pub fn evaluate(reference: &AudioBuffer, synthesized: &AudioBuffer, cfg: &FrameConfig) -> Result<Metrics, MetricsError> {
    if reference.sample_rate != synthesized.sample_rate {
        return Err(MetricsError::SampleRate {
            reference: reference.sample_rate,
            synthesized: synthesized.sample_rate,
        });
    }
    if reference.len().abs_diff(synthesized.len()) > cfg.frame_shift {
        return Err(MetricsError::Length {
            reference: reference.len(),
            synthesized: synthesized.len(),
        });
    }
    let len = reference.len().min(synthesized.len());
    let r = AudioBuffer::new(reference.samples[..len].to_vec(), reference.sample_rate)?;
    let s = AudioBuffer::new(synthesized.samples[..len].to_vec(), synthesized.sample_rate)?;

    let lsd_db = log_spectral_distance(&r.samples, &s.samples, LSD_FFT_SIZE, cfg.frame_shift)?;
    let pr = estimate_f0(&r, cfg);
    let ps = estimate_f0(&s, cfg);
    let frames = pr.len();
    let agree = pr.iter().zip(&ps).filter(|(a, b)| a.voiced == b.voiced).count();
    let both: Vec<f64> = pr.iter().zip(&ps).filter(|(a, b)| a.voiced && b.voiced).map(|(a, b)| a.f0 - b.f0).collect();
    let f0_rmse_hz = (!both.is_empty()).then(|| (both.iter().map(|d| d * d).sum::<f64>() / both.len() as f64).sqrt());
    Ok(Metrics {
        lsd_db,
        f0_rmse_hz,
        voicing_agreement: if frames > 0 { agree as f64 / frames as f64 } else { 1.0 },
        frames,
        voiced_frames: both.len(),
    })
}
