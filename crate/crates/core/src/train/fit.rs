use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{TrainConfig, Trainer};
use crate::data::Dataset;
use crate::detcore::checkpoint::{Checkpoint, CheckpointMeta, NamedTensor};
use crate::detcore::{Detector, ImageBatch};
use crate::eval::{corrupt, CorruptionKind, CorruptionSpec};
use crate::{Error, Result};

const VELOCITY_PREFIX: &str = "optim.velocity.";

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub out_dir: PathBuf,
    /// Checkpoint to continue from.
    pub resume: Option<PathBuf>,
    /// Stop after this epoch even if the schedule is longer.
    pub stop_after: Option<usize>,
    pub verbose: bool,
}

impl FitOptions {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        FitOptions {
            out_dir: out_dir.into(),
            resume: None,
            stop_after: None,
            verbose: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub student: Detector<f32>,
    pub iterations: u64,
}

pub(crate) fn mix(parts: &[u64]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.to_le_bytes());
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// Sample order of one epoch: every image `repeat_factor` times, shuffled
/// with a generator seeded from `(seed, epoch)`.
pub fn epoch_order(cfg: &TrainConfig, num_images: usize, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..cfg.repeat_factor).flat_map(|_| 0..num_images).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix(&[cfg.seed, 0x6f72_6465, epoch as u64]));
    order.shuffle(&mut rng);
    order
}

/// Iterations per epoch.
pub fn iterations_per_epoch(cfg: &TrainConfig, num_images: usize) -> usize {
    (num_images * cfg.repeat_factor).div_ceil(cfg.batch_size)
}

/// Hash of the configuration, stored in checkpoints and checked on resume.
pub fn config_hash(cfg: &TrainConfig) -> String {
    hex::encode(Sha256::digest(cfg.to_toml().as_bytes()))
}

fn augment(batch: &ImageBatch<f32>, cfg: &TrainConfig, epoch: usize, iteration: u64) -> Result<ImageBatch<f32>> {
    let seed = mix(&[cfg.seed, 0x6175_676d, epoch as u64, iteration]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kind = CorruptionKind::ALL[rng.random_range(0..CorruptionKind::ALL.len())];
    let spec = CorruptionSpec::new(kind, 1)?;
    let mut pixels = batch.pixels.clone();
    for (n, mut img) in pixels.axis_iter_mut(Axis(0)).enumerate() {
        let out = corrupt(img.view(), &spec, mix(&[seed, n as u64]))?;
        img.assign(&out);
    }
    Ok(batch.with_pixels(pixels))
}

fn save(trainer: &Trainer<'_, f32>, path: &Path, epoch: usize, cfg_hash: &str, dataset_hash: &str) -> Result<()> {
    let names = trainer.student.params().names();
    let velocity: Vec<NamedTensor<f32>> = names
        .iter()
        .zip(&trainer.optim.velocity)
        .map(|(n, v)| (format!("{VELOCITY_PREFIX}{n}"), vec![v.len()], v.to_vec()))
        .collect();
    let meta = CheckpointMeta {
        epoch,
        iteration: trainer.iteration,
        mode: trainer.cfg.mode.name().to_string(),
        extra: BTreeMap::from([
            ("train_config_hash".to_string(), cfg_hash.to_string()),
            ("dataset_hash".to_string(), dataset_hash.to_string()),
        ]),
    };
    Checkpoint::from_detector(&trainer.student, meta, velocity).save(path)
}

/// Trains `student` on `train` following the configured schedule. Writes a
/// checkpoint after every decay epoch and after the last epoch, and appends
/// one JSON record per iteration to `train_log.jsonl` in `out_dir`.
pub fn fit(
    train: &Dataset,
    cfg: &TrainConfig,
    student: Detector<f32>,
    teacher: Option<&Detector<f32>>,
    opts: &FitOptions,
) -> Result<FitOutcome> {
    if train.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    let out = &opts.out_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let cfg_hash = config_hash(cfg);
    let mut trainer = Trainer::new(cfg.clone(), student, teacher)?;
    let mut first_epoch = 1;
    if let Some(path) = &opts.resume {
        let ck = Checkpoint::<f32>::load(path)?;
        if ck.manifest.extra.get("train_config_hash") != Some(&cfg_hash) {
            return Err(Error::Config(format!("{} was written with a different training config", path.display())));
        }
        if ck.manifest.extra.get("dataset_hash") != Some(&train.content_hash) {
            return Err(Error::Config(format!("{} was trained on a different dataset", path.display())));
        }
        trainer.student = ck.detector()?;
        let names = trainer.student.params().names().to_vec();
        for (i, name) in names.iter().enumerate() {
            let (_, _, v) = ck
                .tensor(&format!("{VELOCITY_PREFIX}{name}"))
                .ok_or_else(|| Error::format(path, format!("missing optimizer state for {name}")))?;
            trainer.optim.velocity[i] = Array1::from_vec(v.clone());
        }
        trainer.iteration = ck.manifest.iteration;
        first_epoch = ck.manifest.epoch + 1;
    }

    let log_path = out.join("train_log.jsonl");
    let file = if opts.resume.is_some() {
        OpenOptions::new().append(true).create(true).open(&log_path)
    } else {
        File::create(&log_path)
    }
    .map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);

    let last_epoch = opts.stop_after.map_or(cfg.epochs, |s| s.min(cfg.epochs));
    let mut checkpoint = opts.resume.clone().unwrap_or_else(|| out.join("final.ckpt"));
    for epoch in first_epoch..=last_epoch {
        let lr = cfg.lr_at(epoch);
        let order = epoch_order(cfg, train.len(), epoch);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut batch = train.batch(chunk);
            if cfg.corrupt_augment {
                batch = augment(&batch, cfg, epoch, trainer.iteration)?;
            }
            let record = trainer.step(&batch, epoch, lr)?;
            epoch_loss += record.terms.total;
            serde_json::to_writer(&mut log, &record).map_err(|e| Error::format(&log_path, e.to_string()))?;
            log.write_all(b"\n").map_err(|e| Error::io(&log_path, e))?;
        }
        log.flush().map_err(|e| Error::io(&log_path, e))?;
        if opts.verbose {
            eprintln!(
                "[{}] epoch {epoch}/{} lr {lr:.0e} mean loss {:.4}",
                cfg.mode,
                cfg.epochs,
                epoch_loss / order.len().div_ceil(cfg.batch_size) as f64
            );
        }
        if cfg.decay_epochs.contains(&epoch) || epoch == cfg.epochs || epoch == last_epoch {
            checkpoint = out.join(format!("epoch_{epoch:03}.ckpt"));
            save(&trainer, &checkpoint, epoch, &cfg_hash, &train.content_hash)?;
        }
    }
    if last_epoch == cfg.epochs && first_epoch <= last_epoch {
        let final_path = out.join("final.ckpt");
        std::fs::copy(&checkpoint, &final_path).map_err(|e| Error::io(&final_path, e))?;
        checkpoint = final_path;
    }
    Ok(FitOutcome {
        checkpoint,
        log: log_path,
        iterations: trainer.iteration,
        student: trainer.student,
    })
}
