//! Synthetic detection datasets and their on-disk format.
//!
//! A dataset directory holds `images/<id>.png` (8-bit RGB), `annotations.txt`
//! with one `image_id class x_min y_min x_max y_max` record per object, and
//! `manifest.json` with counts, the class histogram, the generator spec and
//! its hash, and a content hash over pixels and annotations.

mod synth;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{s, Array4, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use synth::{SyntheticSpec, SHAPES};

use crate::detcore::{BoxSet, ImageBatch};
use crate::{par, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[N, 3, H, W]`, every value a multiple of 1/255.
    pub images: Array4<f32>,
    pub annotations: Vec<BoxSet>,
    pub ids: Vec<usize>,
    pub num_classes: usize,
    pub spec_hash: String,
    pub content_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub num_images: usize,
    pub num_objects: usize,
    pub image_size: (usize, usize),
    pub num_classes: usize,
    pub class_histogram: Vec<usize>,
    pub image_ids: Vec<usize>,
    pub spec: Option<SyntheticSpec>,
    pub spec_hash: String,
    pub content_hash: String,
}

fn to_bytes(images: &Array4<f32>, n: usize) -> Vec<u8> {
    let (_, _, h, w) = images.dim();
    let mut out = Vec::with_capacity(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push((images[[n, c, y, x]] * 255.0).round() as u8);
            }
        }
    }
    out
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.annotations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.annotations.is_empty()
    }

    pub fn image_size(&self) -> (usize, usize) {
        let (_, _, h, w) = self.images.dim();
        (h, w)
    }

    /// Copies the listed images into a batch.
    pub fn batch(&self, idx: &[usize]) -> ImageBatch<f32> {
        let (_, c, h, w) = self.images.dim();
        let mut px = Array4::zeros((idx.len(), c, h, w));
        for (k, &i) in idx.iter().enumerate() {
            px.index_axis_mut(Axis(0), k).assign(&self.images.index_axis(Axis(0), i));
        }
        ImageBatch {
            pixels: px,
            annotations: idx.iter().map(|&i| self.annotations[i].clone()).collect(),
        }
    }

    /// Leading `n` images.
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Self::assemble(
            self.images.slice(s![..n, .., .., ..]).to_owned(),
            self.annotations[..n].to_vec(),
            self.ids[..n].to_vec(),
            self.num_classes,
            self.spec_hash.clone(),
        )
    }

    fn assemble(images: Array4<f32>, annotations: Vec<BoxSet>, ids: Vec<usize>, num_classes: usize, spec_hash: String) -> Self {
        let mut d = Dataset {
            images,
            annotations,
            ids,
            num_classes,
            spec_hash,
            content_hash: String::new(),
        };
        d.content_hash = d.compute_content_hash();
        d
    }

    /// The annotation file exactly as written to disk.
    pub fn annotation_text(&self) -> String {
        let mut out = String::new();
        for (id, a) in self.ids.iter().zip(&self.annotations) {
            for (b, l) in a.boxes.iter().zip(&a.labels) {
                let _ = writeln!(out, "{id:06} {l} {} {} {} {}", b[0], b[1], b[2], b[3]);
            }
        }
        out
    }

    fn compute_content_hash(&self) -> String {
        let mut h = Sha256::new();
        let (_, _, ih, iw) = self.images.dim();
        h.update((ih as u64).to_le_bytes());
        h.update((iw as u64).to_le_bytes());
        for n in 0..self.len() {
            h.update((self.ids[n] as u64).to_le_bytes());
            h.update(to_bytes(&self.images, n));
        }
        h.update(self.annotation_text().as_bytes());
        hex::encode(h.finalize())
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0; self.num_classes];
        for a in &self.annotations {
            for &l in &a.labels {
                hist[l] += 1;
            }
        }
        hist
    }

    pub fn manifest(&self, spec: Option<&SyntheticSpec>) -> Manifest {
        let hist = self.class_histogram();
        Manifest {
            num_images: self.len(),
            num_objects: hist.iter().sum(),
            image_size: self.image_size(),
            num_classes: self.num_classes,
            class_histogram: hist,
            image_ids: self.ids.clone(),
            spec: spec.cloned(),
            spec_hash: self.spec_hash.clone(),
            content_hash: self.content_hash.clone(),
        }
    }

    /// Writes the dataset directory and returns the manifest path.
    pub fn save(&self, dir: impl AsRef<Path>, spec: Option<&SyntheticSpec>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        let img_dir = dir.join("images");
        std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
        let (h, w) = self.image_size();
        par::try_map_range(self.len(), |n| {
            let path = img_dir.join(format!("{:06}.png", self.ids[n]));
            let img = image::RgbImage::from_raw(w as u32, h as u32, to_bytes(&self.images, n)).expect("buffer size");
            img.save(&path).map_err(|e| Error::format(&path, e.to_string()))
        })?;
        let ann = dir.join("annotations.txt");
        std::fs::write(&ann, self.annotation_text()).map_err(|e| Error::io(&ann, e))?;
        let manifest_path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&self.manifest(spec)).expect("manifest serializes");
        std::fs::write(&manifest_path, text + "\n").map_err(|e| Error::io(&manifest_path, e))?;
        Ok(manifest_path)
    }

    /// Reads a dataset directory and verifies its content hash.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest_path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&manifest_path, e.to_string()))?;
        let (h, w) = m.image_size;
        let img_dir = dir.join("images");
        let pixels = par::try_map_range(m.image_ids.len(), |k| {
            let path = img_dir.join(format!("{:06}.png", m.image_ids[k]));
            let img = image::open(&path).map_err(|e| Error::format(&path, e.to_string()))?.to_rgb8();
            if img.dimensions() != (w as u32, h as u32) {
                return Err(Error::format(&path, format!("expected {w}x{h} pixels")));
            }
            Ok(img.into_raw())
        })?;
        let mut images = Array4::zeros((m.image_ids.len(), 3, h, w));
        for (n, raw) in pixels.iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    for c in 0..3 {
                        images[[n, c, y, x]] = raw[(y * w + x) * 3 + c] as f32 / 255.0;
                    }
                }
            }
        }
        let ann_path = dir.join("annotations.txt");
        let text = std::fs::read_to_string(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
        let mut annotations = vec![BoxSet::default(); m.image_ids.len()];
        let position: std::collections::HashMap<usize, usize> = m.image_ids.iter().enumerate().map(|(k, &id)| (id, k)).collect();
        for (ln, line) in text.lines().enumerate() {
            let bad = |msg: &str| Error::format(&ann_path, format!("line {}: {msg}", ln + 1));
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 6 {
                return Err(bad("expected 6 fields"));
            }
            let id: usize = f[0].parse().map_err(|_| bad("bad image id"))?;
            let k = *position.get(&id).ok_or_else(|| bad("unknown image id"))?;
            let label: usize = f[1].parse().map_err(|_| bad("bad class"))?;
            let mut b = [0f32; 4];
            for (j, v) in b.iter_mut().enumerate() {
                *v = f[2 + j].parse().map_err(|_| bad("bad coordinate"))?;
            }
            annotations[k].boxes.push(b);
            annotations[k].labels.push(label);
        }
        for a in &annotations {
            a.validate(h, w, m.num_classes).map_err(|e| Error::format(&ann_path, e.to_string()))?;
        }
        let d = Self::assemble(images, annotations, m.image_ids.clone(), m.num_classes, m.spec_hash.clone());
        if d.content_hash != m.content_hash {
            return Err(Error::format(&manifest_path, "content hash does not match the files"));
        }
        Ok(d)
    }
}

/// Renders the dataset described by `spec` in memory.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let (h, w) = spec.image_size;
    let rendered = par::map_range(spec.num_images, |i| synth::render(spec, spec.first_index + i));
    let mut images = Array4::zeros((spec.num_images, 3, h, w));
    let mut annotations = Vec::with_capacity(spec.num_images);
    for (n, r) in rendered.into_iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    images[[n, c, y, x]] = r.rgb[(y * w + x) * 3 + c] as f32 / 255.0;
                }
            }
        }
        annotations.push(BoxSet::new(r.boxes, r.labels)?);
    }
    let ids = (spec.first_index..spec.first_index + spec.num_images).collect();
    Ok(Dataset::assemble(images, annotations, ids, spec.num_classes, spec.hash()))
}

/// Renders `spec` into `out_dir` and returns the manifest path.
pub fn generate_dataset(spec: &SyntheticSpec, out_dir: impl AsRef<Path>) -> Result<PathBuf> {
    generate(spec)?.save(out_dir, Some(spec))
}
