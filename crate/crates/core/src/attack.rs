//! Projected-gradient (PGD-k) attacks on the detection loss under an
//! l-infinity budget.

use ndarray::{Array4, ArrayView4, Zip};
use serde::{Deserialize, Serialize};

use crate::detcore::{detection_losses, BatchStatsSeq, Detector, ImageBatch, NormMode, Phase, Want};
use crate::{Error, Real, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    /// Budget on the [0,1] pixel scale.
    pub epsilon: f32,
    pub steps: usize,
    /// Explicit step; `None` means `epsilon / steps`.
    #[serde(default)]
    pub step_size: Option<f32>,
    #[serde(default = "main_mode")]
    pub norm_mode: NormMode,
}

fn main_mode() -> NormMode {
    NormMode::Main
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self::training()
    }
}

impl AttackConfig {
    /// PGD-1 with a 2/255 step inside an 8/255 ball.
    pub fn training() -> Self {
        AttackConfig {
            epsilon: 8.0 / 255.0,
            steps: 1,
            step_size: Some(2.0 / 255.0),
            norm_mode: NormMode::Main,
        }
    }

    /// PGD-k at 8/255 with step `epsilon / k`, on the main statistics.
    pub fn evaluation(steps: usize) -> Self {
        AttackConfig {
            epsilon: 8.0 / 255.0,
            steps,
            step_size: None,
            norm_mode: NormMode::Main,
        }
    }

    pub fn step(&self) -> f32 {
        self.step_size.unwrap_or(self.epsilon / self.steps.max(1) as f32)
    }

    /// A zero budget is accepted: it turns the attack into the identity.
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("attack epsilon must be >= 0, got {}", self.epsilon)));
        }
        if self.steps == 0 {
            return Err(Error::Config("attack steps must be >= 1".into()));
        }
        if let Some(s) = self.step_size {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("attack step size must be > 0, got {s}")));
            }
        }
        Ok(())
    }
}

/// `sign` with `sign(0) = 0`.
#[inline]
fn sign<F: Real>(v: F) -> F {
    if v > F::zero() {
        F::one()
    } else if v < F::zero() {
        -F::one()
    } else {
        F::zero()
    }
}

/// One ascent step followed by projection onto the epsilon ball around
/// `x_clean` and then onto [0,1].
pub fn pgd_step<F: Real>(
    x_t: ArrayView4<F>,
    grad: ArrayView4<F>,
    x_clean: ArrayView4<F>,
    cfg: &AttackConfig,
) -> Result<Array4<F>> {
    if x_t.dim() != grad.dim() || x_t.dim() != x_clean.dim() {
        return Err(Error::Argument(format!(
            "pgd_step shapes differ: x_t {:?}, grad {:?}, x_clean {:?}",
            x_t.dim(),
            grad.dim(),
            x_clean.dim()
        )));
    }
    let step = F::lit(cfg.step() as f64);
    let eps = F::lit(cfg.epsilon as f64);
    let mut out = Array4::zeros(x_t.raw_dim());
    Zip::from(&mut out)
        .and(&x_t)
        .and(&grad)
        .and(&x_clean)
        .for_each(|o, &x, &g, &c| {
            let moved = x + step * sign(g);
            let ball = moved.max(c - eps).min(c + eps);
            *o = ball.max(F::zero()).min(F::one());
        });
    Ok(out)
}

/// Input gradient of `L_cls + L_loc` at `pixels`.
pub fn loss_input_gradient<F: Real>(
    det: &Detector<F>,
    pixels: ArrayView4<F>,
    targets: &[crate::detcore::BoxSet],
    mode: NormMode,
    phase: Phase,
) -> Result<(F, Array4<F>, BatchStatsSeq<F>)> {
    let pass = det.forward(pixels, mode, phase)?;
    let losses = detection_losses(pass.head(), targets, det.config().focal_gamma)?;
    let g = det.backward(&pass, Some(&losses.grads), None, Want::INPUT)?;
    Ok((losses.total(), g.input.expect("input gradient requested"), pass.batch_stats().to_vec()))
}

/// Adversarial copy of `images` plus the batch statistics observed at each
/// attack step (empty in the evaluation phase). The detector is not touched;
/// callers decide whether the statistics reach a running state.
pub fn generate_adversarial<F: Real>(
    det: &Detector<F>,
    images: &ImageBatch<F>,
    cfg: &AttackConfig,
    phase: Phase,
) -> Result<(ImageBatch<F>, Vec<BatchStatsSeq<F>>)> {
    cfg.validate()?;
    let clean = images.pixels.view();
    let mut x = images.pixels.clone();
    let mut observed = Vec::new();
    for t in 0..cfg.steps {
        let (loss, grad, stats) = loss_input_gradient(det, x.view(), &images.annotations, cfg.norm_mode, phase)
            .map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(format!("attack step {t}: {msg}")),
                other => other,
            })?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("attack step {t}: non-finite detection loss")));
        }
        x = pgd_step(x.view(), grad.view(), clean, cfg)?;
        if phase == Phase::Train {
            observed.push(stats);
        }
    }
    Ok((images.with_pixels(x), observed))
}

/// Like [`generate_adversarial`], folding training-phase statistics into the
/// auxiliary running state when the attack runs on auxiliary normalization.
/// Main statistics are never updated by an attack.
pub fn generate_adversarial_mut<F: Real>(
    det: &mut Detector<F>,
    images: &ImageBatch<F>,
    cfg: &AttackConfig,
    phase: Phase,
) -> Result<ImageBatch<F>> {
    let (adv, observed) = generate_adversarial(det, images, cfg, phase)?;
    if cfg.norm_mode == NormMode::Auxiliary {
        for stats in &observed {
            det.absorb_batch_stats(NormMode::Auxiliary, stats)?;
        }
    }
    Ok(adv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detcore::{BoxSet, DetectorConfig};
    use ndarray::Array4;

    fn cfg(eps: f32, steps: usize) -> AttackConfig {
        AttackConfig {
            epsilon: eps,
            steps,
            step_size: None,
            norm_mode: NormMode::Main,
        }
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let x = Array4::from_elem((1, 1, 2, 2), 0.3f32);
        let g = Array4::zeros((1, 1, 2, 2));
        let out = pgd_step(x.view(), g.view(), x.view(), &cfg(8.0 / 255.0, 1)).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn single_step_moves_by_epsilon() {
        let x = Array4::from_elem((1, 1, 1, 1), 0.5f64);
        let g = Array4::from_elem((1, 1, 1, 1), 3.0);
        let out = pgd_step(x.view(), g.view(), x.view(), &cfg(8.0 / 255.0, 1)).unwrap();
        assert!((out[[0, 0, 0, 0]] - (0.5 + 8.0 / 255.0)).abs() < 1e-7);
        assert!((out[[0, 0, 0, 0]] - 0.53137).abs() < 1e-5);
    }

    #[test]
    fn drift_is_projected_back() {
        let c = Array4::from_elem((1, 1, 1, 1), 0.4f64);
        let x = c.mapv(|v| v + 0.1);
        let g = Array4::zeros((1, 1, 1, 1));
        let out = pgd_step(x.view(), g.view(), c.view(), &cfg(8.0 / 255.0, 1)).unwrap();
        assert!((out[[0, 0, 0, 0]] - (0.4 + 8.0 / 255.0)).abs() < 1e-7);
    }

    #[test]
    fn shape_mismatch_is_an_argument_error() {
        let a = Array4::<f32>::zeros((1, 1, 2, 2));
        let b = Array4::<f32>::zeros((1, 1, 2, 3));
        assert!(matches!(pgd_step(a.view(), b.view(), a.view(), &cfg(0.1, 1)), Err(Error::Argument(_))));
    }

    fn batch() -> ImageBatch<f32> {
        let px = Array4::from_shape_fn((2, 3, 16, 16), |(n, c, y, x)| ((n * 7 + c * 3 + y * 5 + x * 11) % 17) as f32 / 16.0);
        let ann = vec![
            BoxSet::new(vec![[2.0, 2.0, 12.0, 10.0]], vec![1]).unwrap(),
            BoxSet::new(vec![[4.0, 0.0, 16.0, 16.0]], vec![0]).unwrap(),
        ];
        ImageBatch::new(px, ann).unwrap()
    }

    #[test]
    fn attack_stays_in_ball_and_leaves_model_alone() {
        let det = Detector::<f32>::new(DetectorConfig::default(), 0).unwrap();
        let before = det.clone();
        let b = batch();
        for steps in [1, 2, 4] {
            let c = cfg(4.0 / 255.0, steps);
            let (adv, stats) = generate_adversarial(&det, &b, &c, Phase::Eval).unwrap();
            assert!(stats.is_empty());
            assert_eq!(adv.annotations, b.annotations);
            for (a, x) in adv.pixels.iter().zip(b.pixels.iter()) {
                assert!((a - x).abs() <= c.epsilon + 1e-7 && (0.0..=1.0).contains(a));
            }
            assert_ne!(adv.pixels, b.pixels);
            let (again, _) = generate_adversarial(&det, &b, &c, Phase::Eval).unwrap();
            assert_eq!(again, adv);
        }
        assert_eq!(det, before);
    }

    #[test]
    fn zero_budget_is_identity() {
        let det = Detector::<f32>::new(DetectorConfig::default(), 0).unwrap();
        let b = batch();
        let (adv, _) = generate_adversarial(&det, &b, &cfg(0.0, 2), Phase::Eval).unwrap();
        assert_eq!(adv.pixels, b.pixels);
    }

    #[test]
    fn auxiliary_attack_updates_only_auxiliary_statistics() {
        let cfgd = DetectorConfig {
            dual_norm: true,
            ..Default::default()
        };
        let mut det = Detector::<f32>::new(cfgd, 0).unwrap();
        let main = det.running_stats(NormMode::Main).unwrap().to_vec();
        let params = det.params().clone();
        let c = AttackConfig {
            norm_mode: NormMode::Auxiliary,
            ..AttackConfig::training()
        };
        generate_adversarial_mut(&mut det, &batch(), &c, Phase::Train).unwrap();
        assert_eq!(det.running_stats(NormMode::Main).unwrap(), &main[..]);
        assert_ne!(det.running_stats(NormMode::Auxiliary).unwrap(), &main[..]);
        assert_eq!(det.params(), &params);
    }
}
