use std::time::Instant;

use ndarray::{Array1, Array4};
use serde::{Deserialize, Serialize};

use super::{Mode, Sgd, TrainConfig};
use crate::align::{alignment_loss, make_masks};
use crate::attack::generate_adversarial;
use crate::detcore::{detection_losses, DetLosses, Detector, ImageBatch, NormMode, Phase, Want};
use crate::{Error, Real, Result};

/// Loss terms of one iteration. Terms a mode does not compute are absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub clean_cls: f64,
    pub clean_loc: f64,
    pub adv_cls: Option<f64>,
    pub adv_loc: Option<f64>,
    pub fea1: Option<f64>,
    pub fea2: Option<f64>,
    pub fea3: Option<f64>,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub epoch: usize,
    pub iteration: u64,
    #[serde(flatten)]
    pub terms: LossTerms,
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub lr: f64,
    pub wall_time_ms: f64,
}

impl TrainLogRecord {
    /// Recomputes the total from its parts.
    pub fn recomposed_total(&self) -> f64 {
        let t = &self.terms;
        let adv = t.adv_cls.zip(t.adv_loc);
        let fea = t.fea1.unwrap_or(0.0) + t.fea2.unwrap_or(0.0) + self.lambda * t.fea3.unwrap_or(0.0);
        total_loss((t.clean_cls, t.clean_loc), adv, fea, self.alpha, self.beta)
    }
}

/// `alpha * (cls + loc)(clean) + (1 - alpha) * (cls + loc)(adv) + beta * L_fea`.
/// Without adversarial losses only the clean term and the alignment term remain.
pub fn total_loss(clean: (f64, f64), adv: Option<(f64, f64)>, fea: f64, alpha: f64, beta: f64) -> f64 {
    let mut total = alpha * (clean.0 + clean.1);
    if let Some((c, l)) = adv {
        total += (1.0 - alpha) * (c + l);
    }
    total + beta * fea
}

/// Student, optimizer and frozen teacher for one training run.
#[derive(Debug, Clone)]
pub struct Trainer<'t, F> {
    pub cfg: TrainConfig,
    pub student: Detector<F>,
    pub teacher: Option<&'t Detector<F>>,
    pub optim: Sgd<F>,
    pub iteration: u64,
}

fn add_into<F: Real>(acc: &mut [Array1<F>], g: &[Array1<F>]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

impl<'t, F: Real> Trainer<'t, F> {
    /// The configuration is used as given; see [`TrainConfig::resolved`].
    pub fn new(cfg: TrainConfig, student: Detector<F>, teacher: Option<&'t Detector<F>>) -> Result<Self> {
        cfg.validate()?;
        if cfg.mode.needs_teacher() && teacher.is_none() {
            return Err(Error::Config(format!("{} requires a teacher detector", cfg.mode)));
        }
        if cfg.mode == Mode::UdfaAdvprop && !student.config().dual_norm {
            return Err(Error::Config("UDFA_ADVPROP requires a dual-normalization student".into()));
        }
        if let Some(t) = teacher {
            if t.config().architecture_hash() != student.config().architecture_hash() {
                return Err(Error::Config("teacher and student architectures differ".into()));
            }
        }
        let optim = Sgd::new(student.params(), cfg.momentum, cfg.weight_decay);
        Ok(Trainer {
            cfg,
            student,
            teacher,
            optim,
            iteration: 0,
        })
    }

    /// One update of the student on `batch`.
    ///
    /// Routing: the attack and every pass on `x_adv` use the mode's
    /// adversarial normalization, the clean pass uses the main one. Each
    /// student pass folds its batch statistics into the state it ran on;
    /// attack passes only do so on the auxiliary state. The teacher runs on
    /// batch statistics of its main normalization and is never updated.
    pub fn step(&mut self, batch: &ImageBatch<F>, epoch: usize, lr: f64) -> Result<TrainLogRecord> {
        let started = Instant::now();
        let cfg = &self.cfg;
        let mode = cfg.mode;
        let gamma = self.student.config().focal_gamma;
        let adv_norm = mode.adversarial_norm();

        // with alpha = 1 and beta = 0 nothing adversarial reaches the loss
        let attacks = mode.attacks() && !(cfg.alpha == 1.0 && cfg.beta == 0.0);
        let x_adv = if attacks {
            let (adv, observed) = generate_adversarial(&self.student, batch, &cfg.attack, Phase::Train)?;
            if cfg.attack.norm_mode == NormMode::Auxiliary {
                for s in &observed {
                    self.student.absorb_batch_stats(NormMode::Auxiliary, s)?;
                }
            }
            Some(adv)
        } else {
            None
        };

        let clean_pass = self.student.forward(batch.pixels.view(), NormMode::Main, Phase::Train)?;
        let clean = detection_losses(clean_pass.head(), &batch.annotations, gamma)?;
        let adv = match &x_adv {
            Some(x) => {
                let pass = self.student.forward(x.pixels.view(), adv_norm, Phase::Train)?;
                let losses = detection_losses(pass.head(), &x.annotations, gamma)?;
                Some((pass, losses))
            }
            None => None,
        };

        let align = match (&adv, mode.aligns()) {
            (Some((adv_pass, _)), true) => {
                let teacher = self.teacher.expect("checked in new");
                let t_clean = teacher.forward(batch.pixels.view(), NormMode::Main, Phase::Train)?.pyramid();
                let s_clean = clean_pass.pyramid();
                let s_adv = adv_pass.pyramid();
                let masks = make_masks(&batch.annotations, &s_clean.shapes(), &s_clean.strides)?;
                Some(alignment_loss(&s_adv, &s_clean, &t_clean, &masks, &cfg.align)?)
            }
            _ => None,
        };

        let as_f64 = |l: &DetLosses<F>| (l.cls.as_f64(), l.loc.as_f64());
        let clean_terms = as_f64(&clean);
        let adv_terms = adv.as_ref().map(|(_, l)| as_f64(l));
        // same expression as `recomposed_total`, so logged records add up exactly
        let fea_total = align
            .as_ref()
            .map_or(0.0, |a| a.fea1.as_f64() + a.fea2.as_f64() + cfg.align.lambda * a.fea3.as_f64());
        let terms = LossTerms {
            clean_cls: clean_terms.0,
            clean_loc: clean_terms.1,
            adv_cls: adv_terms.map(|t| t.0),
            adv_loc: adv_terms.map(|t| t.1),
            fea1: align.as_ref().map(|a| a.fea1.as_f64()),
            fea2: align.as_ref().map(|a| a.fea2.as_f64()),
            fea3: align.as_ref().map(|a| a.fea3.as_f64()),
            total: total_loss(clean_terms, adv_terms, fea_total, cfg.alpha, cfg.beta),
        };
        let record = TrainLogRecord {
            epoch,
            iteration: self.iteration,
            terms,
            alpha: cfg.alpha,
            beta: cfg.beta,
            lambda: cfg.align.lambda,
            lr,
            wall_time_ms: 0.0,
        };
        if !record.terms.total.is_finite() {
            let diag = serde_json::to_string(&record).unwrap_or_default();
            return Err(Error::Numeric(format!("non-finite total loss at iteration {}: {diag}", self.iteration)));
        }

        // Terms with an exactly zero weight are skipped rather than
        // multiplied by zero.
        let (alpha, beta) = (F::lit(cfg.alpha), F::lit(cfg.beta));
        let scale = |s: F, v: &[Array4<F>]| -> Vec<Array4<F>> { v.iter().map(|g| g * s).collect() };
        let mut grads = self.student.params().zeros_like();
        {
            let mut hg = clean.grads.clone();
            if cfg.alpha != 1.0 {
                hg.scale(alpha);
            }
            let feat = align.as_ref().filter(|_| cfg.beta != 0.0).map(|a| scale(beta, &a.grad_clean));
            let head = (cfg.alpha != 0.0).then_some(&hg);
            if head.is_some() || feat.is_some() {
                let g = self.student.backward(&clean_pass, head, feat.as_deref(), Want::PARAMS)?;
                add_into(&mut grads, &g.params);
            }
        }
        if let Some((adv_pass, adv_losses)) = &adv {
            let mut hg = adv_losses.grads.clone();
            hg.scale(F::one() - alpha);
            let feat = align.as_ref().filter(|_| cfg.beta != 0.0).map(|a| scale(beta, &a.grad_adv));
            let head = (cfg.alpha != 1.0).then_some(&hg);
            if head.is_some() || feat.is_some() {
                let g = self.student.backward(adv_pass, head, feat.as_deref(), Want::PARAMS)?;
                add_into(&mut grads, &g.params);
            }
        }
        if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::Numeric(format!("non-finite gradient at iteration {}", self.iteration)));
        }

        let clean_stats = clean_pass.batch_stats().to_vec();
        let adv_stats = adv.as_ref().map(|(p, _)| p.batch_stats().to_vec());
        drop(adv);
        drop(clean_pass);
        self.student.absorb_batch_stats(NormMode::Main, &clean_stats)?;
        if let Some(s) = adv_stats {
            self.student.absorb_batch_stats(adv_norm, &s)?;
        }
        self.optim.step(self.student.params_mut(), &grads, lr);
        self.iteration += 1;
        Ok(TrainLogRecord {
            wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
            ..record
        })
    }
}
