//! On-disk layout of one experiment directory and its provenance record.
//!
//! `artifacts.json` maps every artifact to the SHA-256 of its files, the
//! hashes of the artifacts it was built from and the hash of the resolved
//! configuration, so a directory describes how it was produced.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use streamvc::config::ExperimentConfig;
use streamvc::numerics::ModelBundle;
use streamvc::Error;

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Record {
    pub files: BTreeMap<String, String>,
    pub inputs: BTreeMap<String, String>,
    pub config_sha256: String,
}

pub struct Store {
    pub root: PathBuf,
    config_hash: String,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

impl Store {
    /// Opens the directory and writes the resolved configuration into it.
    pub fn open(cfg: &ExperimentConfig) -> Result<Self> {
        let root = cfg.out_dir.clone();
        fs::create_dir_all(&root)?;
        let text = serde_json::to_string_pretty(cfg)?;
        fs::write(root.join("config.json"), &text)?;
        Ok(Self { root, config_hash: hex::encode(Sha256::digest(text.as_bytes())) })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn manifest_path(&self) -> PathBuf {
        self.root.join("artifacts.json")
    }

    pub fn records(&self) -> Result<BTreeMap<String, Record>> {
        let p = self.manifest_path();
        if !p.exists() {
            return Ok(BTreeMap::new());
        }
        Ok(serde_json::from_slice(&fs::read(&p)?)?)
    }

    /// Content hash of an artifact: the hash of its file hashes.
    fn digest(rec: &Record) -> String {
        let mut h = Sha256::new();
        for (f, d) in &rec.files {
            h.update(f.as_bytes());
            h.update(d.as_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Records `name` as produced from `inputs`; `files` are relative paths.
    pub fn record(&self, name: &str, files: &[String], inputs: &[&str]) -> Result<()> {
        let mut all = self.records()?;
        let mut rec = Record { config_sha256: self.config_hash.clone(), ..Default::default() };
        for f in files {
            rec.files.insert(f.clone(), sha256_file(&self.root.join(f))?);
        }
        for i in inputs {
            let d = all.get(*i).map(Self::digest).unwrap_or_else(|| "unrecorded".into());
            rec.inputs.insert(i.to_string(), d);
        }
        all.insert(name.to_string(), rec);
        fs::write(self.manifest_path(), serde_json::to_string_pretty(&all)?)?;
        Ok(())
    }

    pub fn save_bundle(&self, name: &str, bundle: &ModelBundle, inputs: &[&str]) -> Result<()> {
        bundle.save(&self.path(name))?;
        self.record(name, &[format!("{name}.json"), format!("{name}.bin")], inputs)
    }

    pub fn load_bundle(&self, name: &str) -> Result<ModelBundle> {
        ModelBundle::load(&self.path(name)).map_err(|e| match e {
            Error::MissingArtifact(p) => anyhow::Error::new(Error::MissingArtifact(p)).context(format!("artifact {name:?} not found; run the stage that produces it first")),
            other => other.into(),
        })
    }
}

pub mod names {
    pub const CORPUS: &str = "corpus";
    pub const ASR_NS: &str = "asr/non_streaming";
    pub const ASR_ST: &str = "asr/streaming";
    pub const VOCODER: &str = "vocoder";
    pub const JUDGE: &str = "eval/judge";
    pub const SPEAKER: &str = "eval/speaker_encoder";

    pub fn teacher(k: usize) -> String {
        format!("teacher_k{k}")
    }

    pub fn parallel(k: usize) -> String {
        format!("parallel_k{k}")
    }

    pub fn student(method: &str, k: usize) -> String {
        format!("student_{method}_k{k}")
    }
}
