//! Procedural shapes on textured backgrounds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::iou;
use crate::train::mix;
use crate::{Error, Result};

pub const SHAPES: [&str; 6] = ["rectangle", "disc", "triangle", "ring", "cross", "bar"];

/// Base color of each class.
const PALETTE: [[f32; 3]; 6] = [
    [0.90, 0.22, 0.20],
    [0.22, 0.80, 0.30],
    [0.25, 0.35, 0.95],
    [0.92, 0.85, 0.20],
    [0.85, 0.30, 0.85],
    [0.20, 0.85, 0.85],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub num_images: usize,
    /// Index of the first image; image `i` is drawn from `(seed, first_index + i)`.
    pub first_index: usize,
    pub image_size: (usize, usize),
    pub num_classes: usize,
    /// Inclusive range of objects per image.
    pub objects_per_image: (usize, usize),
    /// Range of an object's base side in pixels, inclusive. Bars are a third
    /// as thick; other shapes get a random aspect in `[0.8, 1.25]`.
    pub object_size: (usize, usize),
    /// Amount of distractor strokes and noise in `[0, 1]`.
    pub clutter_level: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            seed: 0,
            num_images: 100,
            first_index: 0,
            image_size: (32, 32),
            num_classes: 6,
            objects_per_image: (1, 3),
            object_size: (8, 18),
            clutter_level: 0.3,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        let (lo, hi) = self.object_size;
        if self.num_images == 0 {
            return Err(Error::Config("num_images must be positive".into()));
        }
        if self.num_classes == 0 || self.num_classes > SHAPES.len() {
            return Err(Error::Config(format!("num_classes must be in 1..=6, got {}", self.num_classes)));
        }
        if self.objects_per_image.0 > self.objects_per_image.1 {
            return Err(Error::Config("objects_per_image range is reversed".into()));
        }
        if lo < 4 || lo > hi || hi > h.min(w) {
            return Err(Error::Config(format!("object sizes {lo}..={hi} do not fit a {h}x{w} image")));
        }
        if !(0.0..=1.0).contains(&self.clutter_level) {
            return Err(Error::Config("clutter_level must lie in [0,1]".into()));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("spec serializes")))
    }
}

/// One rendered image: interleaved RGB bytes and its objects.
pub(crate) struct Rendered {
    pub rgb: Vec<u8>,
    pub boxes: Vec<[f32; 4]>,
    pub labels: Vec<usize>,
}

fn inside(shape: usize, u: f32, v: f32) -> bool {
    // (u, v) in [0,1]^2 relative to the box
    let (du, dv) = (u - 0.5, v - 0.5);
    match shape {
        0 | 5 => true,
        1 => du * du + dv * dv <= 0.25,
        2 => du.abs() <= 0.5 * v,
        3 => {
            let r2 = du * du + dv * dv;
            (0.09..=0.25).contains(&r2)
        }
        4 => du.abs() <= 1.0 / 6.0 || dv.abs() <= 1.0 / 6.0,
        _ => false,
    }
}

/// Class texture modulation at pixel `(x, y)`.
fn texture(class: usize, x: usize, y: usize) -> f32 {
    match class {
        0 => 0.0,
        1 => if (x + y) % 4 < 2 { 0.08 } else { -0.08 },
        2 => if y.is_multiple_of(3) { -0.12 } else { 0.04 },
        3 => 0.0,
        4 => if (x / 2 + y / 2).is_multiple_of(2) { 0.1 } else { -0.1 },
        _ => if x.is_multiple_of(3) { -0.1 } else { 0.05 },
    }
}

pub(crate) fn render(spec: &SyntheticSpec, index: usize) -> Rendered {
    let (h, w) = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(&[spec.seed, index as u64]));
    let mut px = vec![0f32; 3 * h * w];

    // background: a gentle gradient in a random gray-blue tone plus noise
    let base = rng.random_range(0.25..0.5f32);
    let tint = [rng.random_range(-0.05..0.05f32), rng.random_range(-0.05..0.05f32), rng.random_range(-0.05..0.05f32)];
    let (gx, gy) = (rng.random_range(-0.15..0.15f32), rng.random_range(-0.15..0.15f32));
    let noise = 0.02 + 0.04 * spec.clutter_level as f32;
    for y in 0..h {
        for x in 0..w {
            let g = base + gx * (x as f32 / w as f32 - 0.5) + gy * (y as f32 / h as f32 - 0.5);
            for c in 0..3 {
                let n: f32 = rng.random_range(-1.0..1.0);
                px[(y * w + x) * 3 + c] = g + tint[c] + noise * n;
            }
        }
    }
    // clutter: short gray strokes
    let strokes = (spec.clutter_level * 6.0).round() as usize;
    for _ in 0..strokes {
        let len = rng.random_range(3..8usize);
        let (mut x, mut y) = (rng.random_range(0..w) as i64, rng.random_range(0..h) as i64);
        let (dx, dy) = [(1, 0), (0, 1), (1, 1), (1, -1)][rng.random_range(0..4usize)];
        let shade = rng.random_range(0.1..0.75f32);
        for _ in 0..len {
            if (0..w as i64).contains(&x) && (0..h as i64).contains(&y) {
                for c in 0..3 {
                    px[(y as usize * w + x as usize) * 3 + c] = shade;
                }
            }
            x += dx;
            y += dy;
        }
    }

    let count = rng.random_range(spec.objects_per_image.0..=spec.objects_per_image.1);
    let mut boxes: Vec<[f32; 4]> = Vec::new();
    let mut labels = Vec::new();
    let mut attempts = 0;
    while boxes.len() < count && attempts < 50 {
        attempts += 1;
        let class = rng.random_range(0..spec.num_classes);
        let s = rng.random_range(spec.object_size.0..=spec.object_size.1);
        let vertical = rng.random_bool(0.5);
        let (bw, bh) = match class {
            5 if vertical => ((s / 3).max(3), s),
            5 => (s, (s / 3).max(3)),
            _ => {
                let aspect = rng.random_range(0.8..1.25f32);
                (s, ((s as f32 * aspect).round() as usize).clamp(spec.object_size.0, h))
            }
        };
        if bw > w || bh > h {
            continue;
        }
        let x0 = rng.random_range(0..=w - bw);
        let y0 = rng.random_range(0..=h - bh);
        let b = [x0 as f32, y0 as f32, (x0 + bw) as f32, (y0 + bh) as f32];
        if boxes.iter().any(|o| iou(o, &b) > 0.2) {
            continue;
        }
        let jitter = rng.random_range(-0.08..0.08f32);
        let color = PALETTE[class].map(|v| v + jitter);
        for y in y0..y0 + bh {
            for x in x0..x0 + bw {
                let u = (x - x0) as f32 / bw as f32 + 0.5 / bw as f32;
                let v = (y - y0) as f32 / bh as f32 + 0.5 / bh as f32;
                if inside(class, u, v) {
                    let t = texture(class, x, y);
                    for c in 0..3 {
                        px[(y * w + x) * 3 + c] = color[c] + t;
                    }
                }
            }
        }
        boxes.push(b);
        labels.push(class);
    }
    let rgb = px.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    Rendered { rgb, boxes, labels }
}
