//! Single-file checkpoint archive.
//!
//! Layout: the 8-byte magic `UDFACKPT`, a little-endian `u32` format version,
//! a little-endian `u64` manifest length, the JSON manifest, then the raw
//! little-endian tensor payloads at the offsets recorded in the manifest.
//! Values are stored in their native precision, so a save/load cycle is
//! bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use super::{Detector, DetectorConfig};
use crate::{Error, Real, Result};

pub const MAGIC: &[u8; 8] = b"UDFACKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub architecture_hash: String,
    pub config: DetectorConfig,
    pub epoch: usize,
    pub iteration: u64,
    pub mode: String,
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
    pub tensors: Vec<TensorEntry>,
}

/// A named tensor: `(name, shape, values)`.
pub type NamedTensor<F> = (String, Vec<usize>, Vec<F>);

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<F> {
    pub manifest: Manifest,
    pub tensors: Vec<NamedTensor<F>>,
}

/// Metadata recorded next to the weights.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub iteration: u64,
    pub mode: String,
    pub extra: BTreeMap<String, String>,
}

impl<F: Real> Checkpoint<F> {
    /// Parameters and running statistics of `det` plus any `extra` tensors
    /// (optimizer state, for example).
    pub fn from_detector(det: &Detector<F>, meta: CheckpointMeta, extra: Vec<NamedTensor<F>>) -> Self {
        let mut tensors: Vec<NamedTensor<F>> = Vec::new();
        let p = det.params();
        for (id, name) in p.names().iter().enumerate() {
            tensors.push((name.clone(), p.shape(id).to_vec(), p.value(id).to_vec()));
        }
        for (name, values) in det.buffers() {
            tensors.push((name, vec![values.len()], values.to_vec()));
        }
        tensors.extend(extra);
        let mut offset = 0u64;
        let entries = tensors
            .iter()
            .map(|(name, shape, values)| {
                let len = (values.len() * std::mem::size_of::<F>()) as u64;
                let e = TensorEntry {
                    name: name.clone(),
                    dtype: F::DTYPE.to_string(),
                    shape: shape.clone(),
                    offset,
                    len,
                };
                offset += len;
                e
            })
            .collect();
        Checkpoint {
            manifest: Manifest {
                format_version: FORMAT_VERSION,
                architecture_hash: det.config().architecture_hash(),
                config: det.config().clone(),
                epoch: meta.epoch,
                iteration: meta.iteration,
                mode: meta.mode,
                extra: meta.extra,
                tensors: entries,
            },
            tensors,
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&NamedTensor<F>> {
        self.tensors.iter().find(|t| t.0 == name)
    }

    /// Rebuilds the detector stored in this checkpoint.
    pub fn detector(&self) -> Result<Detector<F>> {
        let cfg = self.manifest.config.clone();
        if cfg.architecture_hash() != self.manifest.architecture_hash {
            return Err(Error::Config("checkpoint architecture hash does not match its config".into()));
        }
        let mut det = Detector::new(cfg, 0)?;
        for id in 0..det.params().len() {
            let name = det.params().names()[id].clone();
            let (_, shape, values) = self
                .tensor(&name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter {name}")))?;
            if shape.as_slice() != det.params().shape(id) {
                return Err(Error::Config(format!("shape mismatch for {name}")));
            }
            *det.params_mut().value_mut(id) = Array1::from_vec(values.clone());
        }
        for (name, _) in det.buffers() {
            let (_, _, values) = self
                .tensor(&name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks buffer {name}")))?;
            if !det.set_buffer(&name, Array1::from_vec(values.clone())) {
                return Err(Error::Config(format!("bad buffer {name}")));
            }
        }
        Ok(det)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = serde_json::to_vec(&self.manifest).expect("manifest serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for (_, _, values) in &self.tensors {
            out.extend_from_slice(&F::to_le_bytes_vec(values));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: &str| Error::format(path, msg);
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint archive"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported format version {version}")));
        }
        let mlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let data_start = 20 + mlen;
        if bytes.len() < data_start {
            return Err(bad("truncated manifest"));
        }
        let manifest: Manifest =
            serde_json::from_slice(&bytes[20..data_start]).map_err(|e| bad(&format!("manifest: {e}")))?;
        let data = &bytes[data_start..];
        let width = std::mem::size_of::<F>();
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in &manifest.tensors {
            if e.dtype != F::DTYPE {
                return Err(bad(&format!("tensor {} is {}, expected {}", e.name, e.dtype, F::DTYPE)));
            }
            let (start, end) = (e.offset as usize, (e.offset + e.len) as usize);
            if end > data.len() || e.len as usize != e.shape.iter().product::<usize>() * width {
                return Err(bad(&format!("tensor {} out of bounds", e.name)));
            }
            let values = data[start..end].chunks_exact(width).map(F::from_le_chunk).collect();
            tensors.push((e.name.clone(), e.shape.clone(), values));
        }
        Ok(Checkpoint { manifest, tensors })
    }

    /// Writes through a temporary sibling file and renames it into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Shortcut for saving just a detector.
pub fn save_detector<F: Real>(path: impl AsRef<Path>, det: &Detector<F>, meta: CheckpointMeta) -> Result<()> {
    Checkpoint::from_detector(det, meta, Vec::new()).save(path)
}

pub fn load_detector<F: Real>(path: impl AsRef<Path>) -> Result<Detector<F>> {
    Checkpoint::<F>::load(path)?.detector()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detcore::NormMode;

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = DetectorConfig {
            dual_norm: true,
            ..Default::default()
        };
        let mut det = Detector::<f32>::new(cfg, 3).unwrap();
        det.running_stats_mut(NormMode::Auxiliary).unwrap()[1].mean[0] = 0.123_456_79;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let meta = CheckpointMeta {
            epoch: 4,
            iteration: 77,
            mode: "UDFA".into(),
            extra: BTreeMap::from([("seed".to_string(), "9".to_string())]),
        };
        let momentum = vec![("optim.momentum.0".to_string(), vec![3], vec![1.0f32, -0.0, f32::MIN_POSITIVE])];
        let ck = Checkpoint::from_detector(&det, meta.clone(), momentum);
        ck.save(&path).unwrap();
        let back = Checkpoint::<f32>::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), ck.to_bytes());
        let restored = back.detector().unwrap();
        assert_eq!(restored, det);
        assert_eq!(back.manifest.epoch, 4);
        let m = back.tensor("optim.momentum.0").unwrap();
        assert_eq!(m.2[1].to_bits(), (-0.0f32).to_bits());
    }

    #[test]
    fn rejects_garbage_and_wrong_dtype() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(matches!(Checkpoint::<f32>::load(&path), Err(Error::Format { .. })));
        let det = Detector::<f32>::new(DetectorConfig::default(), 1).unwrap();
        save_detector(&path, &det, CheckpointMeta::default()).unwrap();
        assert!(Checkpoint::<f64>::load(&path).is_err());
        assert!(matches!(Checkpoint::<f32>::load(dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
