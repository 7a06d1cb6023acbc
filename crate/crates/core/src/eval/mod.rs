//! Clean, adversarial and corruption metrics.

mod ap;
mod corrupt;
mod report;

use std::collections::BTreeMap;

use ndarray::{Array4, Axis};
use serde::{Deserialize, Serialize};

pub use ap::{ap_per_threshold, average_precision, coco_thresholds, ApSummary, MAX_DETECTIONS, MIN_SCORE};
pub use corrupt::{corrupt, corrupt_with, CorruptionKind, CorruptionSpec};
pub use report::{format_table, read_reports, write_reports, MetricReport};

use crate::attack::{generate_adversarial, AttackConfig};
use crate::data::Dataset;
use crate::detcore::{decode, DecodeConfig, DetectionSet, Detector, ImageBatch, NormMode, Phase};
use crate::train::mix;
use crate::{par, Error, Result};

/// Mean over corruptions of the mean over severities. Rows are corruption
/// kinds, columns severities.
pub fn mpc(perf: &[Vec<f64>]) -> Result<f64> {
    if perf.is_empty() || perf.iter().any(|r| r.is_empty()) {
        return Err(Error::Argument("mPC of an empty matrix".into()));
    }
    Ok(perf.iter().map(|r| r.iter().sum::<f64>() / r.len() as f64).sum::<f64>() / perf.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// PGD step counts for the adversarial metric; empty disables it.
    pub adv_steps: Vec<usize>,
    /// Budget as a numerator over 255.
    pub epsilon_255: f32,
    pub corruptions: Vec<CorruptionKind>,
    pub severities: Vec<u8>,
    pub batch_size: usize,
    pub decode: DecodeConfig,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            adv_steps: vec![1, 2, 4],
            epsilon_255: 8.0,
            corruptions: Vec::new(),
            severities: vec![1, 2, 3, 4, 5],
            batch_size: 50,
            decode: DecodeConfig::default(),
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn epsilon(&self) -> f32 {
        self.epsilon_255 / 255.0
    }

    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.adv_steps.contains(&0) || !(self.epsilon_255 >= 0.0) {
            return Err(Error::Config("invalid evaluation settings".into()));
        }
        for &s in &self.severities {
            CorruptionSpec::new(CorruptionKind::Brightness, s).map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }
}

/// Evaluation-phase detections on the main normalization.
pub fn predict(det: &Detector<f32>, pixels: &Array4<f32>, cfg: &EvalConfig) -> Result<Vec<DetectionSet>> {
    let n = pixels.len_of(Axis(0));
    let mut out = Vec::with_capacity(n);
    for r in par::chunks(n, cfg.batch_size) {
        let pass = det.forward(pixels.slice(ndarray::s![r, .., .., ..]), NormMode::Main, Phase::Eval)?;
        out.extend(decode(pass.head(), &cfg.decode));
    }
    Ok(out)
}

pub fn clean_ap(det: &Detector<f32>, data: &Dataset, cfg: &EvalConfig) -> Result<ApSummary> {
    average_precision(&predict(det, &data.images, cfg)?, &data.annotations)
}

/// PGD-k images of the whole set with step `epsilon / k`, on the main
/// normalization in the evaluation phase.
pub fn attack_dataset(det: &Detector<f32>, data: &Dataset, steps: usize, epsilon: f32, batch_size: usize) -> Result<Array4<f32>> {
    let cfg = AttackConfig {
        epsilon,
        steps,
        step_size: None,
        norm_mode: NormMode::Main,
    };
    let mut adv = data.images.clone();
    for r in par::chunks(data.len(), batch_size) {
        let idx: Vec<usize> = r.clone().collect();
        let batch: ImageBatch<f32> = data.batch(&idx);
        let (x, _) = generate_adversarial(det, &batch, &cfg, Phase::Eval).map_err(|e| match e {
            Error::Numeric(m) => Error::Numeric(format!("images {}..{}: {m}", r.start, r.end)),
            other => other,
        })?;
        adv.slice_mut(ndarray::s![r, .., .., ..]).assign(&x.pixels);
    }
    Ok(adv)
}

/// AP under PGD-k for each `k`, and their mean.
pub fn adversarial_ap(
    det: &Detector<f32>,
    data: &Dataset,
    steps: &[usize],
    epsilon: f32,
    cfg: &EvalConfig,
) -> Result<(BTreeMap<usize, ApSummary>, ApSummary)> {
    let mut per = BTreeMap::new();
    for &k in steps {
        let adv = attack_dataset(det, data, k, epsilon, cfg.batch_size)?;
        per.insert(k, average_precision(&predict(det, &adv, cfg)?, &data.annotations)?);
    }
    let avg = ApSummary::mean(&per.values().copied().collect::<Vec<_>>())
        .ok_or_else(|| Error::Argument("no attack steps requested".into()))?;
    Ok((per, avg))
}

/// Corrupted copy of every image, seeded per `(seed, image, kind, severity)`.
pub fn corrupt_dataset(data: &Dataset, spec: &CorruptionSpec, seed: u64) -> Result<Array4<f32>> {
    let kind_idx = CorruptionKind::ALL.iter().position(|k| *k == spec.kind).expect("known kind") as u64;
    let images = par::try_map_range(data.len(), |i| {
        corrupt(
            data.images.index_axis(Axis(0), i),
            spec,
            mix(&[seed, i as u64, kind_idx, u64::from(spec.severity)]),
        )
    })?;
    let mut out = data.images.clone();
    for (i, img) in images.into_iter().enumerate() {
        out.index_axis_mut(Axis(0), i).assign(&img);
    }
    Ok(out)
}

/// AP for every `(kind, severity)` pair and the resulting mPC per metric.
pub fn corruption_ap(det: &Detector<f32>, data: &Dataset, cfg: &EvalConfig) -> Result<(Vec<Vec<ApSummary>>, ApSummary)> {
    let mut grid = Vec::new();
    for &kind in &cfg.corruptions {
        let mut row = Vec::new();
        for &s in &cfg.severities {
            let x = corrupt_dataset(data, &CorruptionSpec::new(kind, s)?, cfg.seed)?;
            row.push(average_precision(&predict(det, &x, cfg)?, &data.annotations)?);
        }
        grid.push(row);
    }
    let pick = |f: fn(&ApSummary) -> f64| -> Result<f64> {
        mpc(&grid.iter().map(|r| r.iter().map(f).collect()).collect::<Vec<_>>())
    };
    let summary = ApSummary {
        ap: pick(|a| a.ap)?,
        ap50: pick(|a| a.ap50)?,
        ap75: pick(|a| a.ap75)?,
    };
    Ok((grid, summary))
}

/// Full report of one detector.
pub fn evaluate(det: &Detector<f32>, data: &Dataset, cfg: &EvalConfig, label: &str) -> Result<MetricReport> {
    cfg.validate()?;
    let clean = clean_ap(det, data, cfg)?;
    let (adv_per_step, adv_avg) = if cfg.adv_steps.is_empty() {
        (BTreeMap::new(), None)
    } else {
        let (per, avg) = adversarial_ap(det, data, &cfg.adv_steps, cfg.epsilon(), cfg)?;
        (per, Some(avg))
    };
    let mpc = if cfg.corruptions.is_empty() {
        None
    } else {
        Some(corruption_ap(det, data, cfg)?.1)
    };
    Ok(MetricReport::new(label, data, det, clean, adv_per_step, adv_avg, mpc, cfg))
}
