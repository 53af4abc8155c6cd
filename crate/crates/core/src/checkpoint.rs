//! Checkpoint container.
//!
//! Layout: the 8-byte magic `COSODCK1`, the manifest length as a
//! little-endian `u64`, the JSON manifest, then every tensor's elements in
//! little-endian order, concatenated in manifest order. Tensor names follow
//! `module.submodule.param`; optimizer moments are stored as
//! `adam.m.<name>` and `adam.v.<name>`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::network::CoSodNet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"COSODCK1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Element offset into the blob.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub dtype: String,
    pub config: RunConfig,
    pub n_classes: usize,
    pub epoch: usize,
    pub metrics: BTreeMap<String, f64>,
    /// Opaque trainer state (step, optimizer counters, RNG position).
    pub train_state: Option<serde_json::Value>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub manifest: Manifest,
    pub tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut manifest = self.manifest.clone();
        manifest.dtype = T::DTYPE.to_string();
        manifest.format_version = FORMAT_VERSION;
        let mut offset = 0;
        manifest.tensors = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry { name: name.clone(), shape: t.shape().to_vec(), offset };
                offset += t.len();
                e
            })
            .collect();
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(16 + json.len() + offset * T::BYTES);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        out
    }

    /// Parses a checkpoint, converting stored elements to `T` if needed.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16 + len).ok_or_else(|| bad("truncated manifest"))?;
        let manifest: Manifest = serde_json::from_slice(body)?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {}", manifest.format_version)));
        }
        let blob = &bytes[16 + len..];
        let width = match manifest.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => return Err(Error::Checkpoint(format!("unknown dtype {other}"))),
        };
        let read = |i: usize| -> T {
            let b = &blob[i * width..(i + 1) * width];
            if width == 4 {
                T::from_f64_lossy(f32::from_le_bytes(b.try_into().unwrap()) as f64)
            } else if T::BYTES == 8 {
                T::read_le(b)
            } else {
                T::from_f64_lossy(f64::from_le_bytes(b.try_into().unwrap()))
            }
        };
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in &manifest.tensors {
            let n: usize = e.shape.iter().product();
            if (e.offset + n) * width > blob.len() {
                return Err(Error::Checkpoint(format!("tensor {} runs past the end of the blob", e.name)));
            }
            let data = if width == T::BYTES {
                blob[e.offset * width..(e.offset + n) * width].chunks_exact(width).map(T::read_le).collect()
            } else {
                (e.offset..e.offset + n).map(read).collect()
            };
            tensors.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
        }
        Ok(Self { manifest, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        // Write-then-rename keeps an existing file intact on failure.
        let tmp = path.with_extension("ckpt.tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

impl<T: Scalar> CoSodNet<T> {
    /// Every parameter and running statistic under its module path.
    pub fn to_checkpoint(&self, epoch: usize, metrics: BTreeMap<String, f64>) -> Checkpoint<T> {
        let tensors = self.store.entries().iter().map(|e| (e.name.clone(), e.value.clone())).collect();
        Checkpoint {
            manifest: Manifest {
                format_version: FORMAT_VERSION,
                dtype: T::DTYPE.to_string(),
                config: self.config.clone(),
                n_classes: self.n_classes,
                epoch,
                metrics,
                train_state: None,
                tensors: Vec::new(),
            },
            tensors,
        }
    }

    /// Rebuilds the model described by the manifest and loads its tensors.
    pub fn from_checkpoint(ck: &Checkpoint<T>) -> Result<Self> {
        let mut net = Self::new(&ck.manifest.config, ck.manifest.n_classes)?;
        net.load_tensors(ck)?;
        Ok(net)
    }

    pub fn load_tensors(&mut self, ck: &Checkpoint<T>) -> Result<()> {
        for i in 0..self.store.len() {
            let name = self.store.get(i).name.clone();
            let t = ck.get(&name).ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks {name}")))?;
            if t.shape() != self.store.get(i).value.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: stored {:?}, model expects {:?}",
                    t.shape(),
                    self.store.get(i).value.shape()
                )));
            }
            *self.store.value_mut(i) = t.clone();
        }
        Ok(())
    }
}
