use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::align::AlignConfig;
use crate::attack::AttackConfig;
use crate::detcore::NormMode;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Mode {
    Std,
    VanillaAt,
    VanillaFa,
    Udfa,
    UdfaAdvprop,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::Std, Mode::VanillaAt, Mode::VanillaFa, Mode::Udfa, Mode::UdfaAdvprop];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Std => "STD",
            Mode::VanillaAt => "VANILLA_AT",
            Mode::VanillaFa => "VANILLA_FA",
            Mode::Udfa => "UDFA",
            Mode::UdfaAdvprop => "UDFA_ADVPROP",
        }
    }

    pub fn attacks(self) -> bool {
        self != Mode::Std
    }

    pub fn aligns(self) -> bool {
        matches!(self, Mode::VanillaFa | Mode::Udfa | Mode::UdfaAdvprop)
    }

    pub fn needs_teacher(self) -> bool {
        self.aligns()
    }

    /// Normalization state of every adversarial pass.
    pub fn adversarial_norm(self) -> NormMode {
        if self == Mode::UdfaAdvprop {
            NormMode::Auxiliary
        } else {
            NormMode::Main
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown training mode {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    /// Weight of the clean detection loss; the adversarial one gets `1 - alpha`.
    pub alpha: f64,
    /// Weight of the feature-alignment loss.
    pub beta: f64,
    pub align: AlignConfig,
    pub attack: AttackConfig,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// 1-based epochs from which the learning rate is multiplied by 0.1.
    pub decay_epochs: Vec<usize>,
    pub seed: u64,
    pub repeat_factor: usize,
    pub corrupt_augment: bool,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Udfa,
            alpha: 0.5,
            beta: 1.0,
            align: AlignConfig::default(),
            attack: AttackConfig::training(),
            epochs: 12,
            lr: 1e-2,
            momentum: 0.9,
            weight_decay: 1e-4,
            decay_epochs: vec![9, 12],
            seed: 0,
            repeat_factor: 3,
            corrupt_augment: false,
            batch_size: 16,
        }
    }
}

impl TrainConfig {
    /// Defaults for `mode` with the mode's forced values applied.
    pub fn for_mode(mode: Mode) -> Self {
        TrainConfig { mode, ..Default::default() }.resolved()
    }

    /// Applies the values each mode pins: STD trains on clean data only
    /// (`alpha = 1`, `beta = 0`), VANILLA_AT has no alignment term,
    /// VANILLA_FA drops the clean-teacher branch, UDFA keeps it, and the
    /// AdvProp variant attacks through the auxiliary normalization.
    pub fn resolved(mut self) -> Self {
        match self.mode {
            Mode::Std => {
                self.alpha = 1.0;
                self.beta = 0.0;
            }
            Mode::VanillaAt => self.beta = 0.0,
            Mode::VanillaFa => self.align.lambda = 0.0,
            Mode::Udfa | Mode::UdfaAdvprop => self.align.lambda = 1.0,
        }
        self.attack.norm_mode = self.mode.adversarial_norm();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0,1], got {}", self.alpha)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be >= 0, got {}", self.beta)));
        }
        if self.epochs == 0 || self.repeat_factor == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs, repeat_factor and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config("invalid optimizer settings".into()));
        }
        if self.mode.attacks() {
            self.attack.validate()?;
            if self.attack.norm_mode != self.mode.adversarial_norm() {
                return Err(Error::Config(format!(
                    "{} attacks with {:?} normalization, got {:?}",
                    self.mode,
                    self.mode.adversarial_norm(),
                    self.attack.norm_mode
                )));
            }
        }
        if self.mode.aligns() {
            self.align.validate()?;
        }
        Ok(())
    }

    /// Parses a TOML document; missing keys take defaults, then the mode's
    /// forced values are applied.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(format!("train config: {e}")))?;
        let cfg = cfg.resolved();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("train config serializes")
    }

    /// Learning rate of 1-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.decay_epochs.iter().filter(|&&d| d <= epoch).count();
        self.lr * 0.1f64.powi(decays as i32)
    }
}
