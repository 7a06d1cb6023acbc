//! Focal classification loss, GIoU box loss, and center-sampling assignment.

use super::{BoxSet, HeadGrads, HeadOutput};
use crate::boxes::giou_loss_grad;
use crate::{Error, Real, Result};

/// Positive target of one feature cell: `(label, gt box)`.
pub type Assignment = Option<(usize, [f32; 4])>;

#[derive(Debug, Clone)]
pub struct DetLosses<F> {
    pub cls: F,
    pub loc: F,
    pub num_pos: usize,
    /// Gradient of `cls + loc` with respect to the head outputs.
    pub grads: HeadGrads<F>,
}

impl<F: Real> DetLosses<F> {
    pub fn total(&self) -> F {
        self.cls + self.loc
    }
}

/// Assigns cells of one level: a cell is positive for a box when its center
/// lies in the box's central half (in each axis); overlaps go to the smaller
/// box, then to the lower index. Output is indexed `n * h * w + y * w + x`.
pub fn assign_level(targets: &[BoxSet], h: usize, w: usize, stride: usize) -> Vec<Assignment> {
    let plane = h * w;
    let mut out = vec![None; targets.len() * plane];
    for (n, t) in targets.iter().enumerate() {
        for y in 0..h {
            let cy = (y as f32 + 0.5) * stride as f32;
            for x in 0..w {
                let cx = (x as f32 + 0.5) * stride as f32;
                let mut best: Option<(f32, usize)> = None;
                for (k, b) in t.boxes.iter().enumerate() {
                    let (bw, bh) = (b[2] - b[0], b[3] - b[1]);
                    let (mx, my) = ((b[0] + b[2]) * 0.5, (b[1] + b[3]) * 0.5);
                    let inside = (cx - mx).abs() <= bw * 0.25 && (cy - my).abs() <= bh * 0.25;
                    if inside {
                        let a = bw * bh;
                        if best.is_none_or(|(ba, _)| a < ba) {
                            best = Some((a, k));
                        }
                    }
                }
                out[n * plane + y * w + x] = best.map(|(_, k)| (t.labels[k], t.boxes[k]));
            }
        }
    }
    out
}

#[inline]
fn softplus<F: Real>(z: F) -> F {
    z.max(F::zero()) + (-z.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid<F: Real>(z: F) -> F {
    F::one() / (F::one() + (-z).exp())
}

/// Focal loss of one logit and its derivative with respect to the logit.
pub fn focal_element<F: Real>(z: F, positive: bool, gamma: F) -> (F, F) {
    let p = sigmoid(z);
    let q = F::one() - p;
    if positive {
        let log_p = -softplus(-z);
        let qg = q.powf(gamma);
        (-qg * log_p, gamma * p * qg * log_p - qg * q)
    } else {
        let log_q = -softplus(z);
        let pg = p.powf(gamma);
        (-pg * log_q, -gamma * pg * q * log_q + pg * p)
    }
}

/// Predicted box of a cell from its four regression pre-activations.
pub(crate) fn decode_box<F: Real>(reg: [F; 4], cx: F, cy: F, stride: F) -> [F; 4] {
    [
        cx - stride * softplus(reg[0]),
        cy - stride * softplus(reg[1]),
        cx + stride * softplus(reg[2]),
        cy + stride * softplus(reg[3]),
    ]
}

/// Focal loss summed over all cells and classes, normalized by the number of
/// positives (at least one), and GIoU loss averaged over positives (zero when
/// there are none). Gradients are those of the sum of both terms.
pub fn detection_losses<F: Real>(head: &HeadOutput<F>, targets: &[BoxSet], focal_gamma: f64) -> Result<DetLosses<F>> {
    let n = head.batch_size();
    if n == 0 || targets.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    if targets.len() != n {
        return Err(Error::Argument(format!("{n} images but {} target sets", targets.len())));
    }
    if head.has_non_finite() {
        return Err(Error::Numeric("non-finite head output".into()));
    }
    let gamma = F::lit(focal_gamma);
    let assignments: Vec<Vec<Assignment>> = head
        .levels
        .iter()
        .map(|l| assign_level(targets, l.cls.h, l.cls.w, l.stride))
        .collect();
    let num_pos: usize = assignments.iter().map(|a| a.iter().filter(|c| c.is_some()).count()).sum();
    let cls_norm = F::lit(num_pos.max(1) as f64);
    let loc_norm = F::lit(num_pos.max(1) as f64);

    let mut grads = HeadGrads::zeros_like(head);
    let mut cls_sum = F::zero();
    let mut loc_sum = F::zero();
    for (l, level) in head.levels.iter().enumerate() {
        let assign = &assignments[l];
        let logits = level.cls.data.as_slice().expect("standard layout");
        let cells = level.cls.data.ncols();
        let dcls = grads.cls[l].data.as_slice_mut().expect("standard layout");
        for c in 0..level.cls.channels() {
            for j in 0..cells {
                let positive = matches!(assign[j], Some((label, _)) if label == c);
                let (loss, g) = focal_element(logits[c * cells + j], positive, gamma);
                cls_sum += loss;
                dcls[c * cells + j] = g / cls_norm;
            }
        }

        let reg = level.reg.data.as_slice().expect("standard layout");
        let dreg = grads.reg[l].data.as_slice_mut().expect("standard layout");
        let (h, w) = (level.reg.h, level.reg.w);
        let stride = F::lit(level.stride as f64);
        for (j, a) in assign.iter().enumerate() {
            let Some((_, gt)) = a else { continue };
            let p = j % (h * w);
            let (y, x) = (p / w, p % w);
            let cx = F::lit((x as f64 + 0.5) * level.stride as f64);
            let cy = F::lit((y as f64 + 0.5) * level.stride as f64);
            let raw = [reg[j], reg[cells + j], reg[2 * cells + j], reg[3 * cells + j]];
            let pred = decode_box(raw, cx, cy, stride);
            let gt = gt.map(|v| F::lit(v as f64));
            let (loss, gbox) = giou_loss_grad(pred, gt);
            loc_sum += loss;
            // box = (cx - d0, cy - d1, cx + d2, cy + d3), d = stride * softplus(raw)
            let sign = [-F::one(), -F::one(), F::one(), F::one()];
            for k in 0..4 {
                dreg[k * cells + j] = gbox[k] * sign[k] * stride * sigmoid(raw[k]) / loc_norm;
            }
        }
    }
    let loc = if num_pos == 0 { F::zero() } else { loc_sum / loc_norm };
    Ok(DetLosses {
        cls: cls_sum / cls_norm,
        loc,
        num_pos,
        grads,
    })
}
