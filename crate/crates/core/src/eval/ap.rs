use serde::{Deserialize, Serialize};

use crate::boxes::iou;
use crate::detcore::{BoxSet, DetectionSet};
use crate::{par, Error, Result};

/// Detections scoring below this are ignored by the metric.
pub const MIN_SCORE: f32 = 0.01;
/// At most this many detections per image are scored.
pub const MAX_DETECTIONS: usize = 100;

/// `0.50, 0.55, ..., 0.95`.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// AP averaged over `0.50:0.05:0.95`, AP at 0.50 and at 0.75, in percent.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ApSummary {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
}

impl ApSummary {
    /// Rounded to two decimals.
    pub fn rounded(self) -> Self {
        let r = |v: f64| (v * 100.0).round() / 100.0;
        ApSummary {
            ap: r(self.ap),
            ap50: r(self.ap50),
            ap75: r(self.ap75),
        }
    }

    pub fn mean(items: &[ApSummary]) -> Option<ApSummary> {
        if items.is_empty() {
            return None;
        }
        let n = items.len() as f64;
        Some(ApSummary {
            ap: items.iter().map(|a| a.ap).sum::<f64>() / n,
            ap50: items.iter().map(|a| a.ap50).sum::<f64>() / n,
            ap75: items.iter().map(|a| a.ap75).sum::<f64>() / n,
        })
    }
}

/// Scored detections of one image after the score floor and the cap,
/// in descending score order (stable).
fn kept(d: &DetectionSet) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..d.len()).filter(|&i| d.scores[i] >= MIN_SCORE).collect();
    idx.sort_by(|&a, &b| d.scores[b].total_cmp(&d.scores[a]));
    idx.truncate(MAX_DETECTIONS);
    idx
}

/// Per-threshold match outcome of one detection: `(score, image, rank, tp per threshold)`.
type Matched = (f32, usize, usize, Vec<bool>);

fn match_image(img: usize, d: &DetectionSet, g: &BoxSet, class: usize, thresholds: &[f64]) -> Vec<Matched> {
    let gts: Vec<&[f32; 4]> = g.boxes.iter().zip(&g.labels).filter(|(_, &l)| l == class).map(|(b, _)| b).collect();
    let dets: Vec<usize> = kept(d).into_iter().filter(|&i| d.labels[i] == class).collect();
    let mut taken = vec![vec![false; gts.len()]; thresholds.len()];
    dets.iter()
        .enumerate()
        .map(|(rank, &i)| {
            let tps = thresholds
                .iter()
                .enumerate()
                .map(|(t, &thr)| {
                    let mut best: Option<(f64, usize)> = None;
                    for (j, gb) in gts.iter().enumerate() {
                        if taken[t][j] {
                            continue;
                        }
                        let v = iou(&d.boxes[i], gb);
                        if v >= thr && best.is_none_or(|(bv, _)| v > bv) {
                            best = Some((v, j));
                        }
                    }
                    match best {
                        Some((_, j)) => {
                            taken[t][j] = true;
                            true
                        }
                        None => false,
                    }
                })
                .collect();
            (d.scores[i], img, rank, tps)
        })
        .collect()
}

/// All-points interpolated area under the precision/recall curve of a
/// score-ordered TP/FP sequence.
fn interpolated_ap(tp: &[bool], num_gt: usize) -> f64 {
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        hits += usize::from(t);
        precision.push(hits as f64 / (k + 1) as f64);
        recall.push(hits as f64 / num_gt as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        if *r > prev {
            ap += (r - prev) * p;
            prev = *r;
        }
    }
    ap
}

/// Macro-averaged (over classes present in `gts`) AP at each threshold, as
/// fractions in [0,1].
pub fn ap_per_threshold(dets: &[DetectionSet], gts: &[BoxSet], thresholds: &[f64]) -> Result<Vec<f64>> {
    if dets.len() != gts.len() {
        return Err(Error::Argument(format!("{} detection sets for {} images", dets.len(), gts.len())));
    }
    let mut classes: Vec<usize> = gts.iter().flat_map(|g| g.labels.iter().copied()).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return Err(Error::Argument("AP is undefined without ground-truth boxes".into()));
    }
    let mut sums = vec![0.0; thresholds.len()];
    for &c in &classes {
        let num_gt = gts.iter().map(|g| g.labels.iter().filter(|&&l| l == c).count()).sum::<usize>();
        let mut all: Vec<Matched> = par::map_range(dets.len(), |i| match_image(i, &dets[i], &gts[i], c, thresholds))
            .into_iter()
            .flatten()
            .collect();
        all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        for (t, sum) in sums.iter_mut().enumerate() {
            let tp: Vec<bool> = all.iter().map(|m| m.3[t]).collect();
            *sum += interpolated_ap(&tp, num_gt);
        }
    }
    Ok(sums.into_iter().map(|s| s / classes.len() as f64).collect())
}

pub fn average_precision(dets: &[DetectionSet], gts: &[BoxSet]) -> Result<ApSummary> {
    let per = ap_per_threshold(dets, gts, &coco_thresholds())?;
    Ok(ApSummary {
        ap: 100.0 * per.iter().sum::<f64>() / per.len() as f64,
        ap50: 100.0 * per[0],
        ap75: 100.0 * per[5],
    })
}
