//! A compact anchor-free detector with a two-level feature pyramid, its
//! detection losses, prediction decoding, and checkpoint format.

pub mod checkpoint;
mod decode;
mod detector;
mod loss;
mod params;

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::{Error, Real, Result};

pub use decode::{decode, nms, DecodeConfig};
pub use detector::{Detector, DetectorConfig, ForwardPass, Gradients, HeadGrads, HeadOutput, LevelHead, Want};
pub use loss::{assign_level, detection_losses, focal_element, Assignment, DetLosses};
pub use params::ParamSet;
pub use crate::nn::norm::{BatchStats, RunningStats};

/// Batch statistics of every norm layer from one training-phase pass.
pub type BatchStatsSeq<F> = Vec<BatchStats<F>>;

/// Which normalization state a forward pass reads and updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum NormMode {
    Main,
    Auxiliary,
}

impl NormMode {
    pub fn key(self) -> &'static str {
        match self {
            NormMode::Main => "main",
            NormMode::Auxiliary => "aux",
        }
    }
}

/// Training phase normalizes with batch statistics, evaluation phase with the
/// running statistics of the selected [`NormMode`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Train,
    Eval,
}

/// Ground-truth boxes of one image, `[x_min, y_min, x_max, y_max]` in pixels.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BoxSet {
    pub boxes: Vec<[f32; 4]>,
    pub labels: Vec<usize>,
}

impl BoxSet {
    pub fn new(boxes: Vec<[f32; 4]>, labels: Vec<usize>) -> Result<Self> {
        if boxes.len() != labels.len() {
            return Err(Error::Argument(format!(
                "{} boxes but {} labels",
                boxes.len(),
                labels.len()
            )));
        }
        Ok(BoxSet { boxes, labels })
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Checks ordering, image bounds, and label range.
    pub fn validate(&self, height: usize, width: usize, num_classes: usize) -> Result<()> {
        if self.boxes.len() != self.labels.len() {
            return Err(Error::Argument("box/label count mismatch".into()));
        }
        for (b, &label) in self.boxes.iter().zip(&self.labels) {
            if !(b[0] < b[2] && b[1] < b[3]) {
                return Err(Error::Argument(format!("degenerate box {b:?}")));
            }
            if b[0] < 0.0 || b[1] < 0.0 || b[2] > width as f32 || b[3] > height as f32 {
                return Err(Error::Argument(format!(
                    "box {b:?} outside {width}x{height} image"
                )));
            }
            if label >= num_classes {
                return Err(Error::Argument(format!(
                    "label {label} outside [0, {num_classes})"
                )));
            }
        }
        Ok(())
    }
}

/// Images `[N, C, H, W]` with values in `[0, 1]` and one [`BoxSet`] per image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch<F = f32> {
    pub pixels: Array4<F>,
    pub annotations: Vec<BoxSet>,
}

impl<F: Real> ImageBatch<F> {
    pub fn new(pixels: Array4<F>, annotations: Vec<BoxSet>) -> Result<Self> {
        let n = pixels.dim().0;
        if n == 0 {
            return Err(Error::Argument("empty image batch".into()));
        }
        if annotations.len() != n {
            return Err(Error::Argument(format!(
                "{n} images but {} annotation sets",
                annotations.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(**v >= F::zero() && **v <= F::one())) {
            return Err(Error::Argument(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(ImageBatch {
            pixels,
            annotations,
        })
    }

    pub fn len(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().2
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().3
    }

    pub fn with_pixels(&self, pixels: Array4<F>) -> Self {
        ImageBatch {
            pixels,
            annotations: self.annotations.clone(),
        }
    }

    pub fn cast<G: Real>(&self) -> ImageBatch<G> {
        ImageBatch {
            pixels: self.pixels.mapv(|v| G::lit(v.as_f64())),
            annotations: self.annotations.clone(),
        }
    }
}

/// Per-level features `[N, D, H/stride, W/stride]`, strides strictly increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid<F> {
    pub levels: Vec<Array4<F>>,
    pub strides: Vec<usize>,
}

impl<F: Real> FeaturePyramid<F> {
    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    /// Spatial `(h, w)` of every level.
    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.levels.iter().map(|l| (l.dim().2, l.dim().3)).collect()
    }

    pub fn has_non_finite(&self) -> bool {
        self.levels.iter().any(|l| l.iter().any(|v| !v.is_finite()))
    }
}

/// Decoded detections of one image, scores sorted descending.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionSet {
    pub boxes: Vec<[f32; 4]>,
    pub scores: Vec<f32>,
    pub labels: Vec<usize>,
}

impl DetectionSet {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}
