//! A desk-scale subset of common image corruptions, eight kinds at five
//! severities each.

use ndarray::{Array3, ArrayView3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoise,
    DefocusBlur,
    MotionBlur,
    Brightness,
    Contrast,
    Pixelate,
    Quantize,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 8] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ShotNoise,
        CorruptionKind::DefocusBlur,
        CorruptionKind::MotionBlur,
        CorruptionKind::Brightness,
        CorruptionKind::Contrast,
        CorruptionKind::Pixelate,
        CorruptionKind::Quantize,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ShotNoise => "shot_noise",
            CorruptionKind::DefocusBlur => "defocus_blur",
            CorruptionKind::MotionBlur => "motion_blur",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Pixelate => "pixelate",
            CorruptionKind::Quantize => "quantize",
        }
    }

    /// Distortion parameter for severities 1..=5:
    ///
    /// | kind | parameter |
    /// |---|---|
    /// | gaussian_noise | noise std |
    /// | shot_noise | photons per unit intensity (lower is noisier) |
    /// | defocus_blur | gaussian std in pixels |
    /// | motion_blur | horizontal kernel length in pixels |
    /// | brightness | additive shift |
    /// | contrast | contrast factor (lower is flatter) |
    /// | pixelate | block size in pixels |
    /// | quantize | intensity levels per channel |
    pub fn table(self) -> [f64; 5] {
        match self {
            CorruptionKind::GaussianNoise => [0.08, 0.12, 0.18, 0.26, 0.38],
            CorruptionKind::ShotNoise => [60.0, 25.0, 12.0, 5.0, 3.0],
            CorruptionKind::DefocusBlur => [0.6, 0.9, 1.2, 1.6, 2.0],
            CorruptionKind::MotionBlur => [3.0, 5.0, 7.0, 9.0, 11.0],
            CorruptionKind::Brightness => [0.1, 0.2, 0.3, 0.4, 0.5],
            CorruptionKind::Contrast => [0.4, 0.3, 0.2, 0.1, 0.05],
            CorruptionKind::Pixelate => [2.0, 4.0, 8.0, 16.0, 32.0],
            CorruptionKind::Quantize => [48.0, 32.0, 16.0, 8.0, 4.0],
        }
    }
}

impl std::str::FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CorruptionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown corruption {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8) -> Result<Self> {
        if !(1..=5).contains(&severity) {
            return Err(Error::Argument(format!("severity must be in 1..=5, got {severity}")));
        }
        Ok(CorruptionSpec { kind, severity })
    }

    pub fn parameter(&self) -> f64 {
        self.kind.table()[usize::from(self.severity) - 1]
    }
}

/// Corrupts one `[C, H, W]` image at a severity from the table.
pub fn corrupt(img: ArrayView3<f32>, spec: &CorruptionSpec, seed: u64) -> Result<Array3<f32>> {
    if !(1..=5).contains(&spec.severity) {
        return Err(Error::Argument(format!("severity must be in 1..=5, got {}", spec.severity)));
    }
    corrupt_with(img, spec.kind, spec.parameter(), seed)
}

/// Corrupts with an explicit distortion parameter; the result is clamped to
/// [0,1] and depends only on the inputs.
pub fn corrupt_with(img: ArrayView3<f32>, kind: CorruptionKind, param: f64, seed: u64) -> Result<Array3<f32>> {
    if !param.is_finite() || param < 0.0 {
        return Err(Error::Argument(format!("invalid corruption parameter {param}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = match kind {
        CorruptionKind::GaussianNoise => {
            let s = param as f32;
            img.mapv(|x| {
                let z: f32 = StandardNormal.sample(&mut rng);
                x + s * z
            })
        }
        CorruptionKind::ShotNoise => {
            if param <= 0.0 {
                return Err(Error::Argument("shot noise needs a positive photon count".into()));
            }
            img.mapv(|x| {
                let rate = x.clamp(0.0, 1.0) as f64 * param;
                let k = if rate > 0.0 {
                    Poisson::new(rate).expect("positive rate").sample(&mut rng)
                } else {
                    0.0
                };
                (k / param) as f32
            })
        }
        CorruptionKind::DefocusBlur => {
            if param == 0.0 {
                img.to_owned()
            } else {
                let radius = (3.0 * param).ceil() as i64;
                let mut k: Vec<f32> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * param * param)).exp() as f32).collect();
                let s: f32 = k.iter().sum();
                k.iter_mut().for_each(|v| *v /= s);
                let tmp = convolve_axis(img, &k, 2);
                convolve_axis(tmp.view(), &k, 1)
            }
        }
        CorruptionKind::MotionBlur => {
            let len = (param.round() as usize).max(1);
            let k = vec![1.0 / len as f32; len];
            if len % 2 == 1 {
                convolve_axis(img, &k, 2)
            } else {
                let mut k = k;
                k.push(0.0);
                convolve_axis(img, &k, 2)
            }
        }
        CorruptionKind::Brightness => img.mapv(|x| x + param as f32),
        CorruptionKind::Contrast => {
            let c = param as f32;
            let mut out = img.to_owned();
            for mut ch in out.axis_iter_mut(Axis(0)) {
                let mean = ch.iter().map(|&v| v as f64).sum::<f64>() as f32 / ch.len() as f32;
                ch.mapv_inplace(|x| mean + (x - mean) * c);
            }
            out
        }
        CorruptionKind::Pixelate => {
            let b = (param.round() as usize).max(1);
            let (c, h, w) = img.dim();
            let mut out = Array3::zeros((c, h, w));
            for ch in 0..c {
                for by in (0..h).step_by(b) {
                    for bx in (0..w).step_by(b) {
                        let (ye, xe) = ((by + b).min(h), (bx + b).min(w));
                        let mut sum = 0.0f32;
                        for y in by..ye {
                            for x in bx..xe {
                                sum += img[[ch, y, x]];
                            }
                        }
                        let mean = sum / ((ye - by) * (xe - bx)) as f32;
                        for y in by..ye {
                            for x in bx..xe {
                                out[[ch, y, x]] = mean;
                            }
                        }
                    }
                }
            }
            out
        }
        CorruptionKind::Quantize => {
            if param < 2.0 {
                return Err(Error::Argument("quantization needs at least two levels".into()));
            }
            let q = (param - 1.0) as f32;
            img.mapv(|x| (x.clamp(0.0, 1.0) * q).round() / q)
        }
    };
    out.mapv_inplace(|v| v.clamp(0.0, 1.0));
    Ok(out)
}

/// Centered 1-D convolution along `axis` (1 = rows, 2 = columns) with
/// clamped borders. `k` has odd length.
fn convolve_axis(img: ArrayView3<f32>, k: &[f32], axis: usize) -> Array3<f32> {
    let (c, h, w) = img.dim();
    let r = (k.len() / 2) as i64;
    Array3::from_shape_fn((c, h, w), |(ch, y, x)| {
        let mut acc = 0.0f32;
        for (i, &kv) in k.iter().enumerate() {
            let off = i as i64 - r;
            let (yy, xx) = if axis == 1 {
                ((y as i64 + off).clamp(0, h as i64 - 1) as usize, x)
            } else {
                (y, (x as i64 + off).clamp(0, w as i64 - 1) as usize)
            };
            acc += kv * img[[ch, yy, xx]];
        }
        acc
    })
}
