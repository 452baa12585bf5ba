//! Checkpoints: configuration, every named tensor with its optimizer
//! moments, the step counter and the noise generator position.

use std::path::Path;

use super::{read_file, write_atomic, IoError, Reader};
use crate::config::RunConfig;
use crate::grad::{OptimizerState, ParamId};
use crate::model::Model;
use crate::trainer::{rng_from_state, Trainer};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ILPS";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

/// Serialized trainer state. Tensors are written sorted by name.
pub fn encode_checkpoint(trainer: &Trainer) -> Vec<u8> {
    let store = &trainer.model.store;
    let opt = &trainer.optimizer;
    let cfg = RunConfig {
        model: trainer.model.cfg.clone(),
        train: trainer.cfg.clone(),
    }
    .to_text();

    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    out.extend_from_slice(&trainer.step.to_le_bytes());
    out.extend_from_slice(&opt.step.to_le_bytes());
    put_f64s(&mut out, &[opt.beta1, opt.beta2, opt.eps]);
    let rng = &trainer.noise_rng;
    out.extend_from_slice(&rng.get_seed());
    out.extend_from_slice(&rng.get_stream().to_le_bytes());
    out.extend_from_slice(&rng.get_word_pos().to_le_bytes());

    let mut ids: Vec<ParamId> = store.ids().collect();
    ids.sort_by(|a, b| store.name(*a).cmp(store.name(*b)));
    out.extend_from_slice(&(ids.len() as u32).to_le_bytes());
    for id in ids {
        let name = store.name(id).as_bytes();
        let t = store.get(id);
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        out.push(store.is_trainable(id) as u8);
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        put_f64s(&mut out, t.data());
        put_f64s(&mut out, &opt.first_moment[id.index()]);
        put_f64s(&mut out, &opt.second_moment[id.index()]);
    }
    out
}

fn f64s(r: &mut Reader, n: usize, field: &'static str) -> Result<Vec<f64>, IoError> {
    let len = n.checked_mul(8).ok_or_else(|| IoError::format(field, "length overflow"))?;
    Ok(r.take(len, field)?
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
        .collect())
}

/// Rebuilds a trainer; nothing is returned unless the whole file parses.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Trainer, IoError> {
    let mut r = Reader::new(bytes);
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(IoError::format("magic", "not a checkpoint"));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(IoError::format("version", format!("unsupported version {version}")));
    }
    let cfg_len = r.u32("config length")? as usize;
    let cfg_text = std::str::from_utf8(r.take(cfg_len, "config block")?)
        .map_err(|_| IoError::format("config block", "not UTF-8"))?;
    let cfg = RunConfig::parse(cfg_text).map_err(|e| IoError::format("config block", e.to_string()))?;
    let step = r.u64("step")?;
    let opt_step = r.u64("optimizer step")?;
    let betas = f64s(&mut r, 3, "optimizer constants")?;
    let seed: [u8; 32] = r.take(32, "rng seed")?.try_into().expect("32 bytes");
    let stream = r.u64("rng stream")?;
    let word_pos = u128::from_le_bytes(r.take(16, "rng position")?.try_into().expect("16 bytes"));

    let mut model = Model::new(cfg.model.clone(), 0).map_err(|e| IoError::format("config block", e.to_string()))?;
    let mut opt = OptimizerState::new(&model.store);
    opt.step = opt_step;
    opt.beta1 = betas[0];
    opt.beta2 = betas[1];
    opt.eps = betas[2];

    let count = r.u32("tensor count")? as usize;
    if count != model.store.len() {
        return Err(IoError::format(
            "tensor count",
            format!("{count} tensors, model has {}", model.store.len()),
        ));
    }
    let mut seen = vec![false; count];
    for _ in 0..count {
        let name_len = r.u32("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| IoError::format("tensor name", "not UTF-8"))?
            .to_string();
        let id = model
            .store
            .find(&name)
            .ok_or_else(|| IoError::format("tensor name", format!("unknown tensor `{name}`")))?;
        if std::mem::replace(&mut seen[id.index()], true) {
            return Err(IoError::format("tensor name", format!("duplicate tensor `{name}`")));
        }
        let trainable = r.take(1, "trainable flag")?[0] != 0;
        let rank = r.u32("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u64("tensor shape")? as usize);
        }
        if shape != model.store.get(id).shape() || trainable != model.store.is_trainable(id) {
            return Err(IoError::format(
                "tensor shape",
                format!("`{name}` is {shape:?}, model expects {:?}", model.store.get(id).shape()),
            ));
        }
        let n = model.store.get(id).len();
        let data = f64s(&mut r, n, "tensor data")?;
        opt.first_moment[id.index()] = f64s(&mut r, n, "optimizer moments")?;
        opt.second_moment[id.index()] = f64s(&mut r, n, "optimizer moments")?;
        model.store.set_data(id, data).map_err(|e| IoError::format("tensor data", e.to_string()))?;
    }
    if r.remaining() != 0 {
        return Err(IoError::format("file length", format!("{} trailing bytes", r.remaining())));
    }
    let rng = rng_from_state(seed, stream, word_pos);
    Trainer::resume(model, cfg.train, opt, step, rng).map_err(|e| IoError::format("config block", e.to_string()))
}

pub fn save_checkpoint(path: &Path, trainer: &Trainer) -> Result<(), IoError> {
    write_atomic(path, &encode_checkpoint(trainer))
}

pub fn load_checkpoint(path: &Path) -> Result<Trainer, IoError> {
    decode_checkpoint(&read_file(path)?).map_err(|e| e.in_file(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::FrameConfig;
    use crate::io::synth_corpus;
    use crate::model::ModelConfig;
    use crate::trainer::{TrainConfig, TrainingData};

    fn setup() -> (Trainer, TrainingData) {
        let mc = ModelConfig {
            lp_order: 4,
            context_dim: 4,
            gru1_dim: 4,
            gru2_dim: 2,
            mixtures: 2,
            frame_shift: 120,
        };
        let tc = TrainConfig {
            chunk_len: 240,
            batch_size: 2,
            fft_size: 128,
            stft_hop: 60,
            ..TrainConfig::default()
        };
        let frame = FrameConfig {
            lp_order: 4,
            ..FrameConfig::default()
        };
        let data = TrainingData::new(synth_corpus(2, 0.1, 3, &frame).unwrap(), 2).unwrap();
        let mut model = Model::new(mc, 3).unwrap();
        model.fit_normalization(&data.utterances.iter().map(|u| &u.features).collect::<Vec<_>>()).unwrap();
        (Trainer::new(model, tc).unwrap(), data)
    }

    #[test]
    fn save_load_save_is_identical() {
        let (mut t, data) = setup();
        t.train_step(&data).unwrap();
        let a = encode_checkpoint(&t);
        let back = decode_checkpoint(&a).unwrap();
        assert_eq!(encode_checkpoint(&back), a);
        assert_eq!(back.step, 1);
        assert_eq!(back.model.store, t.model.store);
    }

    #[test]
    fn resume_continues_the_trace() {
        let (mut straight, data) = setup();
        let trace: Vec<_> = (0..4).map(|_| straight.train_step(&data).unwrap()).collect();
        let (mut first, _) = setup();
        for _ in 0..2 {
            first.train_step(&data).unwrap();
        }
        let mut resumed = decode_checkpoint(&encode_checkpoint(&first)).unwrap();
        let rest: Vec<_> = (0..2).map(|_| resumed.train_step(&data).unwrap()).collect();
        assert_eq!(&trace[2..], &rest[..]);
        assert_eq!(encode_checkpoint(&resumed), encode_checkpoint(&straight));
    }

    #[test]
    fn corrupt_files_rejected() {
        let (t, _) = setup();
        let good = encode_checkpoint(&t);
        for cut in [0, 3, 10, good.len() / 2, good.len() - 1] {
            assert!(decode_checkpoint(&good[..cut]).is_err(), "cut at {cut}");
        }
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).unwrap_err().to_string().contains("magic"));
        let mut bad = good.clone();
        bad[4] = 9;
        assert!(decode_checkpoint(&bad).unwrap_err().to_string().contains("version"));
        let mut long = good;
        long.push(0);
        assert!(decode_checkpoint(&long).is_err());
    }
}
