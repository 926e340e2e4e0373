//! Versioned checkpoint container.
//!
//! ```text
//! magic "CCKP" | u32 version | u64 header length | header (JSON)
//! | f32 LE tensor data in header order | SHA-256 of all preceding bytes
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::NormStats;
use crate::expert::ExpertConfig;
use crate::injector::InjectorConfig;
use crate::params::ParamStore;
use crate::seeding::RngState;
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"CCKP";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("not a checkpoint file")]
    Magic,
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("checkpoint checksum mismatch")]
    Checksum,
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("checkpoint was produced by config {found}, expected {expected}")]
    ConfigHash { expected: String, found: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub store: String,
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    /// `expert`, `pc-injected` or `ablation-2d`.
    pub arm: String,
    pub expert_config: ExpertConfig,
    pub injector_config: Option<InjectorConfig>,
    pub norm_stats: NormStats,
    pub rng: RngState,
    pub config_hash: String,
    /// Hash of the pretrained checkpoint a fine-tune started from.
    pub stage_a_hash: Option<String>,
    pub injected_ids: Vec<usize>,
    pub freeze_policy: Option<Vec<String>>,
    pub steps: usize,
    #[serde(default)]
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub expert: ParamStore<f32>,
    pub injector: Option<ParamStore<f32>>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = self.header.clone();
        header.tensors.clear();
        let stores: Vec<(&str, &ParamStore<f32>)> =
            std::iter::once(("expert", &self.expert)).chain(self.injector.as_ref().map(|s| ("injector", s))).collect();
        for (tag, s) in &stores {
            for (name, t) in s.iter() {
                header.tensors.push(TensorEntry { store: tag.to_string(), name: name.to_string(), shape: t.shape.clone() });
            }
        }
        let json = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, s) in &stores {
            for (_, t) in s.iter() {
                for v in &t.data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 16 {
            return Err(if bytes.starts_with(&MAGIC[..bytes.len().min(4)]) { CheckpointError::Truncated } else { CheckpointError::Magic });
        }
        if &bytes[..4] != MAGIC {
            return Err(CheckpointError::Magic);
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version { found: version, expected: CHECKPOINT_VERSION });
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        if bytes.len() < 16 + hlen + 32 {
            return Err(CheckpointError::Truncated);
        }
        let header: CheckpointHeader = serde_json::from_slice(&bytes[16..16 + hlen]).map_err(|e| CheckpointError::Format(e.to_string()))?;
        let needed: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>() * 4).sum();
        let body_end = 16 + hlen + needed;
        if bytes.len() < body_end + 32 {
            return Err(CheckpointError::Truncated);
        }
        if bytes.len() > body_end + 32 {
            return Err(CheckpointError::Format("trailing bytes".into()));
        }
        if Sha256::digest(&bytes[..body_end]).as_slice() != &bytes[body_end..] {
            return Err(CheckpointError::Checksum);
        }
        let mut expert = ParamStore::new();
        let mut injector: Option<ParamStore<f32>> = None;
        let mut pos = 16 + hlen;
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let data = bytes[pos..pos + 4 * n].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            pos += 4 * n;
            let t = Tensor::new(&e.shape, data);
            match e.store.as_str() {
                "expert" => {
                    expert.insert(e.name.clone(), t);
                }
                "injector" => {
                    injector.get_or_insert_with(ParamStore::new).insert(e.name.clone(), t);
                }
                other => return Err(CheckpointError::Format(format!("unknown store {other}"))),
            }
        }
        Ok(Self { header, expert, injector })
    }

    pub fn save(&self, path: &Path) -> Result<String, CheckpointError> {
        let bytes = self.to_bytes();
        fs::write(path, &bytes).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }

    /// Loads and, when `expected_config` is given, rejects checkpoints produced
    /// by a different configuration.
    pub fn load(path: &Path, expected_config: Option<&str>) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })?;
        let ck = Self::from_bytes(&bytes)?;
        if let Some(exp) = expected_config {
            if ck.header.config_hash != exp {
                return Err(CheckpointError::ConfigHash { expected: exp.to_string(), found: ck.header.config_hash.clone() });
            }
        }
        Ok(ck)
    }
}

/// SHA-256 of a file's bytes, hex encoded.
pub fn file_hash(path: &Path) -> Result<String, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expert;
    use crate::injector::{self, InjectorConfig};
    use crate::seeding;

    fn sample() -> Checkpoint {
        let cfg = ExpertConfig { n_blocks: 2, d_model: 8, n_heads: 2, chunk: 4, conv_channels: [2, 2], ..Default::default() };
        let icfg = InjectorConfig { num_points: 64, ..Default::default() };
        let expert = expert::init_expert::<f32>(&cfg, 1).unwrap();
        let inj = injector::init_injector::<f32>(&cfg, &icfg, &[1], 2).unwrap();
        Checkpoint {
            header: CheckpointHeader {
                arm: "pc-injected".into(),
                expert_config: cfg,
                injector_config: Some(icfg),
                norm_stats: NormStats { action_min: [-1.0; 4], action_max: [1.0; 4], state_mean: [0.5; 4], state_std: [0.2; 4] },
                rng: RngState::capture(&seeding::rng(3)),
                config_hash: "abc".into(),
                stage_a_hash: Some("def".into()),
                injected_ids: vec![1],
                freeze_policy: Some(vec!["output_head".into()]),
                steps: 10,
                tensors: Vec::new(),
            },
            expert,
            injector: Some(inj),
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert!(back.expert.bitwise_eq(&ck.expert));
        assert!(back.injector.as_ref().unwrap().bitwise_eq(ck.injector.as_ref().unwrap()));
        let mut h = back.header.clone();
        h.tensors.clear();
        assert_eq!(h, ck.header);
    }

    #[test]
    fn damage_is_detected() {
        let bytes = sample().to_bytes();
        let mut flipped = bytes.clone();
        let n = flipped.len();
        flipped[n - 100] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(CheckpointError::Checksum)));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..n - 10]), Err(CheckpointError::Truncated)));
        let mut v = bytes.clone();
        v[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&v), Err(CheckpointError::Version { found: 9, .. })));
        assert!(matches!(Checkpoint::from_bytes(b"nope, not this"), Err(CheckpointError::Magic)));
    }

    #[test]
    fn config_hash_is_checked_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck.bin");
        let h = sample().save(&p).unwrap();
        assert_eq!(h, file_hash(&p).unwrap());
        assert!(Checkpoint::load(&p, Some("abc")).is_ok());
        assert!(matches!(Checkpoint::load(&p, Some("xyz")), Err(CheckpointError::ConfigHash { .. })));
    }
}
