//! File formats (WAV, feature files, checkpoints) and synthetic corpora.

mod checkpoint;
mod corpus;
mod featfile;
mod wav;

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::dsp::DspError;
use crate::trainer::Utterance;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use corpus::{ar1_corpus, quantize_audio, quantize_track, synth_corpus, synth_utterance, SynthUtterance, CORPUS_PEAK, F0_RANGE};
pub use featfile::{decode_features, encode_features, feature_read, feature_write, FEATURE_MAGIC, FEATURE_VERSION};
pub use wav::{decode_wav, encode_wav, f64_to_pcm16, pcm16_to_f64, wav_read, wav_write};

pub const WAV_EXT: &str = "wav";
pub const FEATURE_EXT: &str = "feat";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}{field}: {detail}", file.as_ref().map(|p| format!("{}: ", p.display())).unwrap_or_default())]
    Format {
        field: &'static str,
        detail: String,
        file: Option<PathBuf>,
    },
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error("corpus: {0}")]
    Corpus(String),
}

impl IoError {
    pub fn format(field: &'static str, detail: impl Into<String>) -> Self {
        Self::Format {
            field,
            detail: detail.into(),
            file: None,
        }
    }

    /// Attaches the file a format error came from.
    pub fn in_file(self, path: &Path) -> Self {
        match self {
            Self::Format { field, detail, .. } => Self::Format {
                field,
                detail,
                file: Some(path.to_path_buf()),
            },
            other => other,
        }
    }
}

/// Bounds-checked little-endian cursor; every read names the field it reads.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8], IoError> {
        if n > self.remaining() {
            return Err(IoError::format(
                field,
                format!("truncated: need {n} bytes, {} left", self.remaining()),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u16(&mut self, field: &'static str) -> Result<u16, IoError> {
        Ok(u16::from_le_bytes(self.take(2, field)?.try_into().expect("two bytes")))
    }

    pub fn u32(&mut self, field: &'static str) -> Result<u32, IoError> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().expect("four bytes")))
    }

    pub fn u64(&mut self, field: &'static str) -> Result<u64, IoError> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().expect("eight bytes")))
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>, IoError> {
    fs::read(path).map_err(|source| IoError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes through a temporary sibling and renames, so readers never see a
/// partial file.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let io = |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    };
    fs::write(&tmp, bytes).map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

/// Writes `<name>.wav` and `<name>.feat` for every utterance.
pub fn write_corpus(dir: &Path, utterances: &[Utterance]) -> Result<(), IoError> {
    fs::create_dir_all(dir).map_err(|source| IoError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    for u in utterances {
        wav_write(&dir.join(format!("{}.{WAV_EXT}", u.name)), &u.audio)?;
        feature_write(&dir.join(format!("{}.{FEATURE_EXT}", u.name)), &u.features)?;
    }
    Ok(())
}

/// Every `<name>.wav` in `dir` with its `<name>.feat`, sorted by name.
pub fn read_corpus(dir: &Path) -> Result<Vec<Utterance>, IoError> {
    let entries = fs::read_dir(dir).map_err(|source| IoError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut names = Vec::new();
    for e in entries {
        let p = e
            .map_err(|source| IoError::Io {
                path: dir.to_path_buf(),
                source,
            })?
            .path();
        if p.extension().is_some_and(|x| x == WAV_EXT) {
            if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
                names.push(stem.to_string());
            }
        }
    }
    names.sort();
    if names.is_empty() {
        return Err(IoError::Corpus(format!("no .{WAV_EXT} files in {}", dir.display())));
    }
    names
        .into_iter()
        .map(|name| {
            let audio = wav_read(&dir.join(format!("{name}.{WAV_EXT}")))?;
            let fpath = dir.join(format!("{name}.{FEATURE_EXT}"));
            if !fpath.exists() {
                return Err(IoError::Corpus(format!("{} has no feature file {}", name, fpath.display())));
            }
            let features = feature_read(&fpath)?;
            if features.sample_rate() != audio.sample_rate {
                return Err(IoError::Corpus(format!(
                    "{name}: features at {} Hz, audio at {} Hz",
                    features.sample_rate(),
                    audio.sample_rate
                )));
            }
            Ok(Utterance { name, audio, features })
        })
        .collect()
}
