//! 16-bit PCM mono RIFF/WAVE files.

use std::path::Path;

use super::{read_file, write_atomic, IoError, Reader};
use crate::dsp::AudioBuffer;

const PCM_SCALE: f64 = 32767.0;
const FORMAT_PCM: u16 = 1;

pub fn f64_to_pcm16(x: f64) -> i16 {
    (x * PCM_SCALE).round().clamp(-32768.0, 32767.0) as i16
}

pub fn pcm16_to_f64(v: i16) -> f64 {
    (v as f64 / PCM_SCALE).max(-1.0)
}

/// WAV bytes for `audio`, saturating samples outside `[-1, 1]`.
pub fn encode_wav(audio: &AudioBuffer) -> Vec<u8> {
    let data_len = (audio.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + audio.len() * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&FORMAT_PCM.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&audio.sample_rate.to_le_bytes());
    out.extend_from_slice(&(audio.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in &audio.samples {
        out.extend_from_slice(&f64_to_pcm16(s).to_le_bytes());
    }
    out
}

pub fn decode_wav(bytes: &[u8]) -> Result<AudioBuffer, IoError> {
    let mut r = Reader::new(bytes);
    if r.take(4, "RIFF tag")? != b"RIFF" {
        return Err(IoError::format("RIFF tag", "not a RIFF file"));
    }
    let riff_len = r.u32("RIFF size")? as usize;
    if riff_len + 8 != bytes.len() {
        return Err(IoError::format(
            "RIFF size",
            format!("header declares {} bytes, file has {}", riff_len + 8, bytes.len()),
        ));
    }
    if r.take(4, "WAVE tag")? != b"WAVE" {
        return Err(IoError::format("WAVE tag", "not a WAVE file"));
    }
    let mut format: Option<u32> = None;
    loop {
        if r.remaining() == 0 {
            return Err(IoError::format("data chunk", "missing"));
        }
        let id: [u8; 4] = r.take(4, "chunk id")?.try_into().expect("four bytes");
        let len = r.u32("chunk size")? as usize;
        match &id {
            b"fmt " => {
                let body = r.take(len, "fmt chunk")?;
                let mut f = Reader::new(body);
                let tag = f.u16("audio format")?;
                if tag != FORMAT_PCM {
                    return Err(IoError::format("audio format", format!("unsupported codec {tag} (only PCM)")));
                }
                let channels = f.u16("channel count")?;
                if channels != 1 {
                    return Err(IoError::format("channel count", format!("{channels} channels, only mono is supported")));
                }
                let rate = f.u32("sample rate")?;
                f.u32("byte rate")?;
                f.u16("block align")?;
                let bits = f.u16("bits per sample")?;
                if bits != 16 {
                    return Err(IoError::format("bits per sample", format!("{bits}-bit samples, only 16-bit is supported")));
                }
                format = Some(rate);
            }
            b"data" => {
                let rate = format.ok_or_else(|| IoError::format("fmt chunk", "data chunk before fmt chunk"))?;
                if len > r.remaining() {
                    return Err(IoError::format(
                        "data chunk",
                        format!("truncated: declares {len} bytes, {} present", r.remaining()),
                    ));
                }
                if len % 2 != 0 {
                    return Err(IoError::format("data chunk", format!("odd length {len} for 16-bit samples")));
                }
                let body = r.take(len, "data chunk")?;
                let samples = body
                    .chunks_exact(2)
                    .map(|c| pcm16_to_f64(i16::from_le_bytes([c[0], c[1]])))
                    .collect();
                return Ok(AudioBuffer::new(samples, rate)?);
            }
            _ => {
                r.take(len, "chunk body")?;
            }
        }
        if len % 2 == 1 {
            r.take(1, "chunk padding")?;
        }
    }
}

pub fn wav_read(path: &Path) -> Result<AudioBuffer, IoError> {
    decode_wav(&read_file(path)?).map_err(|e| e.in_file(path))
}

pub fn wav_write(path: &Path, audio: &AudioBuffer) -> Result<(), IoError> {
    write_atomic(path, &encode_wav(audio))
}
