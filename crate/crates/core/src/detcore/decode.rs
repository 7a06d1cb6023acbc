use serde::{Deserialize, Serialize};

use super::loss::decode_box;
use super::{DetectionSet, HeadOutput};
use crate::boxes::iou;
use crate::{par, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    /// Candidates scoring below this are discarded before NMS.
    pub score_threshold: f32,
    pub nms_iou: f32,
    pub max_detections: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            score_threshold: 0.01,
            nms_iou: 0.6,
            max_detections: 100,
        }
    }
}

/// Per-class greedy NMS over `(box, score, label)` candidates. Candidates are
/// ranked by score with a stable sort, so equal scores keep input order.
pub fn nms(mut candidates: Vec<([f32; 4], f32, usize)>, iou_threshold: f32, max_detections: usize) -> DetectionSet {
    candidates.sort_by(|a, b| b.1.total_cmp(&a.1));
    let mut out = DetectionSet::default();
    for (b, s, label) in candidates {
        if out.len() >= max_detections {
            break;
        }
        let suppressed = out
            .boxes
            .iter()
            .zip(&out.labels)
            .any(|(kb, &kl)| kl == label && iou(kb, &b) > iou_threshold as f64);
        if !suppressed {
            out.boxes.push(b);
            out.scores.push(s);
            out.labels.push(label);
        }
    }
    out
}

/// Turns head outputs into per-image detections.
pub fn decode<F: Real>(head: &HeadOutput<F>, cfg: &DecodeConfig) -> Vec<DetectionSet> {
    let (img_h, img_w) = (head.image_hw.0 as f32, head.image_hw.1 as f32);
    par::map_range(head.batch_size(), |n| {
        let mut candidates = Vec::new();
        for level in &head.levels {
            let (h, w) = (level.cls.h, level.cls.w);
            let plane = h * w;
            let cells = level.cls.data.ncols();
            let logits = level.cls.data.as_slice().expect("standard layout");
            let reg = level.reg.data.as_slice().expect("standard layout");
            for p in 0..plane {
                let j = n * plane + p;
                let mut decoded: Option<[f32; 4]> = None;
                for c in 0..level.cls.channels() {
                    let z = logits[c * cells + j].as_f64();
                    let score = (1.0 / (1.0 + (-z).exp())) as f32;
                    #[allow(clippy::neg_cmp_op_on_partial_ord)]
                    if !(score >= cfg.score_threshold) {
                        continue;
                    }
                    let b = *decoded.get_or_insert_with(|| {
                        let (y, x) = (p / w, p % w);
                        let s = level.stride as f64;
                        let raw = [reg[j], reg[cells + j], reg[2 * cells + j], reg[3 * cells + j]].map(|v| v.as_f64());
                        let b = decode_box(raw, (x as f64 + 0.5) * s, (y as f64 + 0.5) * s, s);
                        [
                            (b[0] as f32).clamp(0.0, img_w),
                            (b[1] as f32).clamp(0.0, img_h),
                            (b[2] as f32).clamp(0.0, img_w),
                            (b[3] as f32).clamp(0.0, img_h),
                        ]
                    });
                    if b[2] > b[0] && b[3] > b[1] {
                        candidates.push((b, score, c));
                    }
                }
            }
        }
        nms(candidates, cfg.nms_iou, cfg.max_detections)
    })
}
