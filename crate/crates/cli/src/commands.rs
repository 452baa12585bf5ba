use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ilpcnet::config::RunConfig;
use ilpcnet::dsp::{extract_features, FeatureTrack};
use ilpcnet::gradsuite::{format_table, run_suite, Component};
use ilpcnet::io::{
    ar1_corpus, feature_read, feature_write, load_checkpoint, read_corpus, save_checkpoint, synth_corpus, wav_read, wav_write, write_corpus,
};
use ilpcnet::metrics::evaluate;
use ilpcnet::model::Model;
use ilpcnet::trainer::{evaluate_nll, LossLog, Trainer, TrainingData};

use crate::error::CliError;

pub fn load_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(p) = path {
        apply_config(&mut cfg, p)?;
    }
    Ok(cfg)
}

fn apply_config(cfg: &mut RunConfig, path: &Path) -> Result<(), CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    cfg.apply(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

pub fn features(wav: &Path, feat: &Path, config: Option<&Path>) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    let frame = cfg.model.frame_config();
    let audio = wav_read(wav)?;
    if audio.sample_rate != frame.sample_rate {
        return Err(CliError::Data(format!(
            "{}: sample rate {} Hz, expected {} Hz",
            wav.display(),
            audio.sample_rate,
            frame.sample_rate
        )));
    }
    let track = extract_features(&audio, &frame).map_err(|e| CliError::Data(format!("{}: {e}", wav.display())))?;
    feature_write(feat, &track)?;
    log::info!("{}: {} frames -> {}", wav.display(), track.frames(), feat.display());
    Ok(())
}

pub struct TrainOptions {
    pub corpus: PathBuf,
    pub checkpoint: PathBuf,
    pub config: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub seed: Option<u64>,
    pub loss_log: Option<PathBuf>,
    pub valid: Option<PathBuf>,
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn build_trainer(opts: &TrainOptions, data_tracks: &[&FeatureTrack]) -> Result<Trainer, CliError> {
    match &opts.resume {
        Some(path) => {
            let saved = load_checkpoint(path)?;
            let mut cfg = RunConfig {
                model: saved.model.cfg.clone(),
                train: saved.cfg.clone(),
            };
            if let Some(c) = &opts.config {
                apply_config(&mut cfg, c)?;
            }
            if let Some(s) = opts.seed {
                cfg.train.seed = s;
            }
            if cfg.model != saved.model.cfg {
                return Err(CliError::Usage(format!(
                    "{}: model settings cannot change on resume",
                    path.display()
                )));
            }
            log::info!("resuming from {} at step {}", path.display(), saved.step);
            Ok(Trainer::resume(saved.model, cfg.train, saved.optimizer, saved.step, saved.noise_rng)?)
        }
        None => {
            let mut cfg = load_config(opts.config.as_deref())?;
            if let Some(s) = opts.seed {
                cfg.train.seed = s;
            }
            let mut model = Model::new(cfg.model, cfg.train.seed)?;
            model.fit_normalization(data_tracks)?;
            Ok(Trainer::new(model, cfg.train)?)
        }
    }
}

fn corpus_data(dir: &Path, chunk_frames: usize) -> Result<TrainingData, CliError> {
    let utts = read_corpus(dir)?;
    TrainingData::new(utts, chunk_frames).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))
}

pub fn train(opts: &TrainOptions) -> Result<(), CliError> {
    let utts = read_corpus(&opts.corpus)?;
    let tracks: Vec<_> = utts.iter().map(|u| &u.features).collect();
    let mut trainer = build_trainer(opts, &tracks)?;
    let chunk_frames = trainer.chunk_frames();
    for u in &utts {
        if u.features.width() != trainer.model.cfg.feature_dim() {
            return Err(CliError::Data(format!(
                "{}: feature width {}, model expects {}",
                u.name,
                u.features.width(),
                trainer.model.cfg.feature_dim()
            )));
        }
    }
    let data = TrainingData::new(utts, chunk_frames).map_err(|e| CliError::Data(format!("{}: {e}", opts.corpus.display())))?;
    let valid = opts.valid.as_deref().map(|d| corpus_data(d, chunk_frames)).transpose()?;

    let log_path = opts.loss_log.clone().unwrap_or_else(|| sibling(&opts.checkpoint, ".loss.csv"));
    let valid_path = sibling(&opts.checkpoint, ".valid.csv");
    let appending = opts.resume.is_some() && log_path.exists();
    let mut log = if appending {
        let f = OpenOptions::new().append(true).open(&log_path).map_err(|e| io_err(&log_path, e))?;
        LossLog::append(BufWriter::new(f))
    } else {
        LossLog::new(BufWriter::new(File::create(&log_path).map_err(|e| io_err(&log_path, e))?))?
    };
    let mut valid_log = match &valid {
        Some(_) if opts.resume.is_some() && valid_path.exists() => {
            Some(BufWriter::new(OpenOptions::new().append(true).open(&valid_path).map_err(|e| io_err(&valid_path, e))?))
        }
        Some(_) => {
            let mut w = BufWriter::new(File::create(&valid_path).map_err(|e| io_err(&valid_path, e))?);
            writeln!(w, "step,valid_nll").map_err(|e| io_err(&valid_path, e))?;
            Some(w)
        }
        None => None,
    };

    let total = trainer.cfg.total_steps;
    let every = trainer.cfg.eval_every;
    log::info!(
        "training {} chunks of {} frames, steps {}..{total}",
        data.chunks.len(),
        chunk_frames,
        trainer.step + 1
    );
    while trainer.step < total {
        let l = trainer.train_step(&data)?;
        log.record(&l)?;
        if every > 0 && l.step % every == 0 {
            log.flush()?;
            let msg = format!("step {} nll {:.4} power {:.5} total {:.4} lr {:.3e}", l.step, l.nll, l.power, l.total, l.lr);
            match (&valid, valid_log.as_mut()) {
                (Some(v), Some(w)) => {
                    let nll = evaluate_nll(&trainer.model, v, trainer.cfg.batch_size)?;
                    writeln!(w, "{},{nll:?}", l.step).and_then(|_| w.flush()).map_err(|e| io_err(&valid_path, e))?;
                    log::info!("{msg} valid_nll {nll:.4}");
                }
                _ => log::info!("{msg}"),
            }
            save_checkpoint(&opts.checkpoint, &trainer)?;
        }
    }
    log.flush()?;
    save_checkpoint(&opts.checkpoint, &trainer)?;
    log::info!("saved {} at step {}", opts.checkpoint.display(), trainer.step);
    Ok(())
}

pub fn synth(checkpoint: &Path, feat: &Path, wav: &Path, sharpen: f64, seed: u64) -> Result<(), CliError> {
    if !(sharpen > 0.0 && sharpen.is_finite()) {
        return Err(CliError::Usage(format!("--sharpen must be positive, got {sharpen}")));
    }
    let trainer = load_checkpoint(checkpoint)?;
    let track = feature_read(feat)?;
    let syn = trainer.model.synthesizer()?;
    let out = syn
        .synthesize(&track, seed, Some(sharpen))
        .map_err(|e| CliError::from(e).with_context(feat))?;
    wav_write(wav, &out.audio)?;
    log::info!(
        "{} frames -> {} samples ({:.3} s) in {}",
        track.frames(),
        out.audio.len(),
        out.audio.len() as f64 / out.audio.sample_rate as f64,
        wav.display()
    );
    Ok(())
}

pub fn eval(reference: &Path, synthesized: &Path, config: Option<&Path>) -> Result<(), CliError> {
    let frame = load_config(config)?.model.frame_config();
    let r = wav_read(reference)?;
    let s = wav_read(synthesized)?;
    let m = evaluate(&r, &s, &frame)?;
    print!("{}", m.report());
    Ok(())
}

pub fn gradcheck(trials: usize, seed: u64, corrupt: Option<&str>) -> Result<(), CliError> {
    if trials == 0 {
        return Err(CliError::Usage("--trials must be >= 1".into()));
    }
    let corrupt = match corrupt {
        Some(name) => Some(Component::from_name(name).ok_or_else(|| {
            let names: Vec<_> = Component::ALL.iter().map(|c| c.name()).collect();
            CliError::Usage(format!("unknown component `{name}`; expected one of {}", names.join(", ")))
        })?),
        None => None,
    };
    let results = run_suite(trials, seed, corrupt)?;
    print!("{}", format_table(&results));
    let failed: Vec<_> = results.iter().filter(|r| !r.passed()).map(|r| r.component.name()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numeric(format!("gradient check failed: {}", failed.join(", "))))
    }
}

pub fn corpus(out: &Path, n: usize, duration: f64, seed: u64, ar1: Option<f64>, config: Option<&Path>) -> Result<(), CliError> {
    if n == 0 || !(duration > 0.0 && duration.is_finite()) {
        return Err(CliError::Usage("--utterances and --duration must be positive".into()));
    }
    let frame = load_config(config)?.model.frame_config();
    let utts = match ar1 {
        Some(a) if !(a.abs() < 1.0) => return Err(CliError::Usage(format!("--ar1 coefficient must lie in (-1, 1), got {a}"))),
        Some(a) => ar1_corpus(n, duration, a, seed, &frame),
        None => synth_corpus(n, duration, seed, &frame),
    }
    .map_err(|e| CliError::Data(e.to_string()))?;
    write_corpus(out, &utts)?;
    log::info!("wrote {n} utterances to {}", out.display());
    Ok(())
}
