//! Feature files: a fixed header and 32-bit float rows.

use std::path::Path;

use super::{read_file, write_atomic, IoError, Reader};
use crate::dsp::FeatureTrack;

pub const FEATURE_MAGIC: &[u8; 4] = b"ILPC";
pub const FEATURE_VERSION: u32 = 1;
const HEADER_LEN: usize = 28;

pub fn encode_features(track: &FeatureTrack) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + track.rows().len() * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    for v in [
        FEATURE_VERSION,
        track.sample_rate(),
        track.frame_shift() as u32,
        track.lp_order() as u32,
        track.width() as u32,
        track.frames() as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &v in track.rows() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureTrack, IoError> {
    let mut r = Reader::new(bytes);
    if r.take(4, "magic")? != FEATURE_MAGIC {
        return Err(IoError::format("magic", "not a feature file"));
    }
    let version = r.u32("version")?;
    if version != FEATURE_VERSION {
        return Err(IoError::format("version", format!("unsupported version {version}")));
    }
    let sample_rate = r.u32("sample_rate")?;
    let frame_shift = r.u32("frame_shift")? as usize;
    let lp_order = r.u32("lp_order")? as usize;
    let feature_dim = r.u32("feature_dim")? as usize;
    let frames = r.u32("frame_count")? as usize;
    if feature_dim != FeatureTrack::width_for(lp_order) {
        return Err(IoError::format(
            "feature_dim",
            format!("{feature_dim} does not match lp_order {lp_order} (expected {})", FeatureTrack::width_for(lp_order)),
        ));
    }
    if frame_shift == 0 {
        return Err(IoError::format("frame_shift", "must be >= 1"));
    }
    let payload = frames * feature_dim * 4;
    if r.remaining() != payload {
        return Err(IoError::format(
            "payload",
            format!("{frames} frames × {feature_dim} need {payload} bytes, file has {}", r.remaining()),
        ));
    }
    let rows = r
        .take(payload, "payload")?
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    FeatureTrack::from_rows(lp_order, frame_shift, sample_rate, rows).map_err(|e| IoError::format("payload", e.to_string()))
}

pub fn feature_read(path: &Path) -> Result<FeatureTrack, IoError> {
    decode_features(&read_file(path)?).map_err(|e| e.in_file(path))
}

pub fn feature_write(path: &Path, track: &FeatureTrack) -> Result<(), IoError> {
    write_atomic(path, &encode_features(track))
}
