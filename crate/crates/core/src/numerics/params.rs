use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Named, ordered parameter tensors of one model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T: Real = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new(), index: HashMap::new() }
    }

    /// Registers a parameter; re-adding a name replaces its value.
    pub fn add(&mut self, name: &str, t: Tensor<T>) -> usize {
        if let Some(&i) = self.index.get(name) {
            self.tensors[i] = t;
            return i;
        }
        self.names.push(name.to_string());
        self.tensors.push(t);
        self.index.insert(name.to_string(), self.names.len() - 1);
        self.names.len() - 1
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.index_of(name)
            .map(|i| &self.tensors[i])
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name:?}")))
    }

    pub fn tensor(&self, i: usize) -> &Tensor<T> {
        &self.tensors[i]
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        let mut out = ParamSet::new();
        for (n, t) in self.names.iter().zip(&self.tensors) {
            out.add(n, t.cast());
        }
        out
    }
}

impl ParamSet<f32> {
    /// Little-endian f32 blob of all tensors in registration order.
    pub fn to_blob(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.num_values() * 4);
        for t in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// SHA-256 of the parameter blob, hex encoded.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_blob()))
    }
}

/// Uniform initialisation in `[-bound, bound]`.
pub fn uniform<R: Rng>(rng: &mut R, shape: &[usize], bound: f32) -> Tensor<f32> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches")
}

/// Glorot-style bound for a layer with the given fan-in and fan-out.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f32 {
    (6.0 / (fan_in + fan_out) as f32).sqrt()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Sidecar {
    kind: String,
    arch: serde_json::Value,
    arch_hash: String,
    tensors: Vec<TensorEntry>,
    stats: BTreeMap<String, Vec<f32>>,
    blob_sha256: String,
}

/// A trained model: parameters plus the architecture description needed
/// to rebuild it and any fixed statistics (feature normalisation).
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub kind: String,
    pub arch: serde_json::Value,
    pub params: ParamSet<f32>,
    pub stats: BTreeMap<String, Vec<f32>>,
}

pub fn arch_hash(kind: &str, arch: &serde_json::Value) -> String {
    let mut h = Sha256::new();
    h.update(kind.as_bytes());
    h.update([0u8]);
    h.update(arch.to_string().as_bytes());
    hex::encode(h.finalize())
}

impl ModelBundle {
    pub fn arch_hash(&self) -> String {
        arch_hash(&self.kind, &self.arch)
    }

    pub fn stat(&self, name: &str) -> Result<&[f32]> {
        self.stats
            .get(name)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::InvalidArgument(format!("bundle {} has no statistic {name:?}", self.kind)))
    }

    fn paths(prefix: &Path) -> (PathBuf, PathBuf) {
        (prefix.with_extension("bin"), prefix.with_extension("json"))
    }

    /// Writes `<prefix>.bin` (parameter blob) and `<prefix>.json` (sidecar).
    pub fn save(&self, prefix: &Path) -> Result<()> {
        let (bin, json) = Self::paths(prefix);
        if let Some(dir) = bin.parent() {
            fs::create_dir_all(dir)?;
        }
        let blob = self.params.to_blob();
        let mut tensors = Vec::new();
        let mut offset = 0;
        for (name, t) in self.params.names().iter().zip(self.params.tensors()) {
            tensors.push(TensorEntry { name: name.clone(), shape: t.shape().to_vec(), offset });
            offset += t.len() * 4;
        }
        let side = Sidecar {
            kind: self.kind.clone(),
            arch: self.arch.clone(),
            arch_hash: self.arch_hash(),
            tensors,
            stats: self.stats.clone(),
            blob_sha256: hex::encode(Sha256::digest(&blob)),
        };
        fs::write(&bin, blob)?;
        fs::write(&json, serde_json::to_vec_pretty(&side)?)?;
        Ok(())
    }

    pub fn load(prefix: &Path) -> Result<Self> {
        let (bin, json) = Self::paths(prefix);
        if !json.exists() {
            return Err(Error::MissingArtifact(json));
        }
        if !bin.exists() {
            return Err(Error::MissingArtifact(bin));
        }
        let side: Sidecar = serde_json::from_slice(&fs::read(&json)?)?;
        let blob = fs::read(&bin)?;
        let bad = |detail: String| Error::Format { path: bin.clone(), detail };
        if hex::encode(Sha256::digest(&blob)) != side.blob_sha256 {
            return Err(bad("blob checksum mismatch".into()));
        }
        if arch_hash(&side.kind, &side.arch) != side.arch_hash {
            return Err(bad("architecture hash mismatch".into()));
        }
        let mut params = ParamSet::new();
        for e in &side.tensors {
            let n: usize = e.shape.iter().product();
            let end = e.offset + n * 4;
            if end > blob.len() {
                return Err(bad(format!("tensor {} runs past end of blob", e.name)));
            }
            let data = blob[e.offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            params.add(&e.name, Tensor::new(e.shape.clone(), data)?);
        }
        Ok(Self { kind: side.kind, arch: side.arch, params, stats: side.stats })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundle_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut params = ParamSet::new();
        params.add("a", Tensor::new(vec![2, 2], vec![1.5, -0.25, 3.0e-7, f32::MAX]).unwrap());
        params.add("b", Tensor::new(vec![1], vec![0.1]).unwrap());
        let mut stats = BTreeMap::new();
        stats.insert("mean".into(), vec![0.1f32, 1.0 / 3.0]);
        let b = ModelBundle { kind: "test".into(), arch: serde_json::json!({"k": 6}), params, stats };
        let prefix = dir.path().join("m");
        b.save(&prefix).unwrap();
        let back = ModelBundle::load(&prefix).unwrap();
        assert_eq!(back, b);
        assert_eq!(back.arch_hash(), b.arch_hash());
    }

    #[test]
    fn corrupted_blob_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let mut params = ParamSet::new();
        params.add("a", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let b = ModelBundle { kind: "t".into(), arch: serde_json::json!({}), params, stats: BTreeMap::new() };
        let prefix = dir.path().join("m");
        b.save(&prefix).unwrap();
        fs::write(prefix.with_extension("bin"), [0u8; 8]).unwrap();
        assert!(matches!(ModelBundle::load(&prefix), Err(Error::Format { .. })));
    }

    #[test]
    fn missing_bundle_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(ModelBundle::load(&dir.path().join("nope")), Err(Error::MissingArtifact(_))));
    }
}
