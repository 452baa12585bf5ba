use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{hann, DspError};

/// Magnitude spectrogram, `frames × (fft_size/2 + 1)` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub frames: usize,
    pub bins: usize,
    pub magnitudes: Vec<f64>,
}

impl Spectrogram {
    pub fn frame(&self, t: usize) -> &[f64] {
        &self.magnitudes[t * self.bins..(t + 1) * self.bins]
    }
}

/// Hann-windowed short-time magnitude spectra; frames start at multiples of
/// `hop` and never run past the end of the signal.
pub fn stft(samples: &[f64], fft_size: usize, hop: usize) -> Result<Spectrogram, DspError> {
    if fft_size == 0 || hop == 0 {
        return Err(DspError::InvalidConfig("fft_size and hop must be >= 1".into()));
    }
    if samples.len() < fft_size {
        return Err(DspError::InputTooShort {
            needed: fft_size,
            got: samples.len(),
        });
    }
    let frames = 1 + (samples.len() - fft_size) / hop;
    let bins = fft_size / 2 + 1;
    let window = hann(fft_size);
    let fft = FftPlanner::new().plan_fft_forward(fft_size);
    let mut buf = vec![Complex::new(0.0, 0.0); fft_size];
    let mut magnitudes = Vec::with_capacity(frames * bins);
    for t in 0..frames {
        let seg = &samples[t * hop..t * hop + fft_size];
        for ((b, x), w) in buf.iter_mut().zip(seg).zip(&window) {
            *b = Complex::new(x * w, 0.0);
        }
        fft.process(&mut buf);
        magnitudes.extend(buf[..bins].iter().map(|c| c.norm()));
    }
    Ok(Spectrogram {
        frames,
        bins,
        magnitudes,
    })
}
