//! Foreground masks and the decoupled feature-alignment losses between
//! student and teacher pyramids.

use ndarray::{Array3, Array4, ArrayView3, ArrayView4, Axis};
use serde::{Deserialize, Serialize};

use crate::detcore::{BoxSet, FeaturePyramid};
use crate::{Error, Real, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum PNorm {
    L1,
    L2,
}

/// How the per-channel distances of one feature cell are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelReduce {
    Sum,
    /// Sum divided by the channel count, which keeps the loss scale (and
    /// its curvature) independent of the pyramid width.
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignConfig {
    /// Weight of the student-clean vs teacher-clean branch.
    pub lambda: f64,
    pub gamma_fg: f64,
    pub gamma_bg: f64,
    pub p_norm: PNorm,
    #[serde(default = "default_reduce")]
    pub channel_reduce: ChannelReduce,
}

fn default_reduce() -> ChannelReduce {
    ChannelReduce::Mean
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            lambda: 1.0,
            gamma_fg: 1.0,
            gamma_bg: 6.0,
            p_norm: PNorm::L2,
            channel_reduce: ChannelReduce::Mean,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.lambda) || !ok(self.gamma_fg) || !ok(self.gamma_bg) {
            return Err(Error::Config("alignment weights must be finite and non-negative".into()));
        }
        if self.gamma_fg == 0.0 && self.gamma_bg == 0.0 {
            return Err(Error::Config("gamma_fg and gamma_bg cannot both be zero".into()));
        }
        Ok(())
    }
}

/// Binary foreground masks, one `[N, h, w]` array per pyramid level.
#[derive(Debug, Clone, PartialEq)]
pub struct ForegroundMaskSet {
    pub masks: Vec<Array3<u8>>,
}

impl ForegroundMaskSet {
    /// `(N_fg, N_bg)` of image `n` on level `l`.
    pub fn counts(&self, level: usize, n: usize) -> (usize, usize) {
        let m = self.masks[level].index_axis(Axis(0), n);
        let fg = m.iter().filter(|&&v| v == 1).count();
        (fg, m.len() - fg)
    }
}

/// Marks a cell as foreground when its center `((i + 0.5) * stride)` lies in
/// some box, using half-open `[min, max)` intervals.
pub fn make_masks(targets: &[BoxSet], shapes: &[(usize, usize)], strides: &[usize]) -> Result<ForegroundMaskSet> {
    if shapes.len() != strides.len() || shapes.is_empty() {
        return Err(Error::Argument(format!("{} level shapes for {} strides", shapes.len(), strides.len())));
    }
    let (img_h, img_w) = (shapes[0].0 * strides[0], shapes[0].1 * strides[0]);
    if shapes.iter().zip(strides).any(|(&(h, w), &s)| h * s != img_h || w * s != img_w) {
        return Err(Error::Argument("pyramid shapes inconsistent with strides".into()));
    }
    for (n, t) in targets.iter().enumerate() {
        for b in &t.boxes {
            let inside = b[0] >= 0.0 && b[1] >= 0.0 && b[2] <= img_w as f32 && b[3] <= img_h as f32;
            if !inside || b[0] >= b[2] || b[1] >= b[3] {
                return Err(Error::Argument(format!("box {b:?} of image {n} outside the {img_h}x{img_w} image")));
            }
        }
    }
    let masks = shapes
        .iter()
        .zip(strides)
        .map(|(&(h, w), &s)| {
            Array3::from_shape_fn((targets.len(), h, w), |(n, y, x)| {
                let cy = (y as f32 + 0.5) * s as f32;
                let cx = (x as f32 + 0.5) * s as f32;
                let hit = targets[n]
                    .boxes
                    .iter()
                    .any(|b| cx >= b[0] && cx < b[2] && cy >= b[1] && cy < b[3]);
                u8::from(hit)
            })
        })
        .collect();
    Ok(ForegroundMaskSet { masks })
}

fn check_pair<F: Real>(s: &ArrayView4<F>, t: &ArrayView4<F>, m: &ArrayView3<u8>) -> Result<()> {
    let (n, _, h, w) = s.dim();
    if s.dim() != t.dim() || m.dim() != (n, h, w) {
        return Err(Error::Argument(format!(
            "feature shapes {:?} / {:?} do not match mask {:?}",
            s.dim(),
            t.dim(),
            m.dim()
        )));
    }
    if s.iter().chain(t.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite feature value".into()));
    }
    Ok(())
}

/// Per-level decoupled loss and its gradient with respect to `s`
/// (the gradient with respect to `t` is its negation).
///
/// For each image, the channel-reduced distance of every cell is weighted by
/// `gamma_fg / N_fg` on foreground and `gamma_bg / N_bg` on background; a
/// term whose count is zero contributes nothing. Images are averaged.
pub fn decoupled_level_loss_grad<F: Real>(
    s: ArrayView4<F>,
    t: ArrayView4<F>,
    m: ArrayView3<u8>,
    cfg: &AlignConfig,
) -> Result<(F, Array4<F>)> {
    check_pair(&s, &t, &m)?;
    let (n, d, h, w) = s.dim();
    let inv_n = F::one() / F::lit(n as f64);
    let per_channel = match cfg.channel_reduce {
        ChannelReduce::Sum => F::one(),
        ChannelReduce::Mean => F::one() / F::lit(d as f64),
    };
    let mut grad = Array4::zeros(s.raw_dim());
    let mut total = F::zero();
    for i in 0..n {
        let mi = m.index_axis(Axis(0), i);
        let fg = mi.iter().filter(|&&v| v == 1).count();
        let bg = h * w - fg;
        let weight = |is_fg: bool| -> F {
            let (gamma, count) = if is_fg { (cfg.gamma_fg, fg) } else { (cfg.gamma_bg, bg) };
            if count == 0 {
                F::zero()
            } else {
                F::lit(gamma / count as f64) * per_channel
            }
        };
        let (w_fg, w_bg) = (weight(true), weight(false));
        let (mut sum_fg, mut sum_bg) = (F::zero(), F::zero());
        for y in 0..h {
            for x in 0..w {
                let is_fg = mi[[y, x]] == 1;
                let wt = if is_fg { w_fg } else { w_bg };
                let mut cell = F::zero();
                for c in 0..d {
                    let diff = s[[i, c, y, x]] - t[[i, c, y, x]];
                    let (v, g) = match cfg.p_norm {
                        PNorm::L2 => (diff * diff, F::lit(2.0) * diff),
                        PNorm::L1 => (diff.abs(), if diff > F::zero() { F::one() } else if diff < F::zero() { -F::one() } else { F::zero() }),
                    };
                    cell += v;
                    grad[[i, c, y, x]] = wt * g * inv_n;
                }
                if is_fg {
                    sum_fg += cell;
                } else {
                    sum_bg += cell;
                }
            }
        }
        total += w_fg * sum_fg + w_bg * sum_bg;
    }
    Ok((total * inv_n, grad))
}

pub fn decoupled_level_loss<F: Real>(s: ArrayView4<F>, t: ArrayView4<F>, m: ArrayView3<u8>, cfg: &AlignConfig) -> Result<F> {
    Ok(decoupled_level_loss_grad(s, t, m, cfg)?.0)
}

/// Branch values and pyramid gradients of the composed alignment loss.
#[derive(Debug, Clone)]
pub struct AlignOutput<F> {
    /// `lambda * fea3 + fea1 + fea2`.
    pub total: F,
    /// Student adversarial vs teacher clean.
    pub fea1: F,
    /// Student adversarial vs (detached) student clean.
    pub fea2: F,
    /// Student clean vs teacher clean, before the `lambda` weight.
    pub fea3: F,
    /// Gradient on the adversarial student pyramid (from fea1 and fea2).
    pub grad_adv: Vec<Array4<F>>,
    /// Gradient on the clean student pyramid (from `lambda * fea3` only).
    pub grad_clean: Vec<Array4<F>>,
}

fn branch<F: Real>(
    s: &FeaturePyramid<F>,
    t: &FeaturePyramid<F>,
    masks: &ForegroundMaskSet,
    cfg: &AlignConfig,
) -> Result<(F, Vec<Array4<F>>)> {
    let mut total = F::zero();
    let mut grads = Vec::with_capacity(s.levels.len());
    for ((sl, tl), ml) in s.levels.iter().zip(&t.levels).zip(&masks.masks) {
        let (v, g) = decoupled_level_loss_grad(sl.view(), tl.view(), ml.view(), cfg)?;
        total += v;
        grads.push(g);
    }
    Ok((total, grads))
}

/// `lambda * D(S_clean, T_clean) + D(S_adv, T_clean) + D(S_adv, sg(S_clean))`
/// with each `D` summed over levels. The teacher receives no gradient and the
/// clean student pyramid receives gradient only through the `lambda` branch.
pub fn alignment_loss<F: Real>(
    s_adv: &FeaturePyramid<F>,
    s_clean: &FeaturePyramid<F>,
    t_clean: &FeaturePyramid<F>,
    masks: &ForegroundMaskSet,
    cfg: &AlignConfig,
) -> Result<AlignOutput<F>> {
    let nl = s_adv.num_levels();
    if s_clean.num_levels() != nl || t_clean.num_levels() != nl || masks.masks.len() != nl {
        return Err(Error::Argument(format!(
            "level counts differ: adv {nl}, clean {}, teacher {}, masks {}",
            s_clean.num_levels(),
            t_clean.num_levels(),
            masks.masks.len()
        )));
    }
    let (fea1, g1) = branch(s_adv, t_clean, masks, cfg)?;
    let (fea2, g2) = branch(s_adv, s_clean, masks, cfg)?;
    let (fea3, g3) = branch(s_clean, t_clean, masks, cfg)?;
    let lambda = F::lit(cfg.lambda);
    let grad_adv = g1.into_iter().zip(g2).map(|(a, b)| a + b).collect();
    let grad_clean = g3.into_iter().map(|g| g * lambda).collect();
    Ok(AlignOutput {
        total: lambda * fea3 + fea1 + fea2,
        fea1,
        fea2,
        fea3,
        grad_adv,
        grad_clean,
    })
}

/// Unweighted `l_p` distance of two flat vectors.
pub fn lp_distance(a: &[f64], b: &[f64], p: PNorm) -> f64 {
    let diffs = a.iter().zip(b).map(|(x, y)| (x - y).abs());
    match p {
        PNorm::L1 => diffs.sum(),
        PNorm::L2 => diffs.map(|d| d * d).sum::<f64>().sqrt(),
    }
}
