//! Versioned binary checkpoint container.
//!
//! ```text
//! offset  size  content
//! 0       8     magic b"SSDETCK\0"
//! 8       4     format version, u32 little-endian
//! 12      8     header length L, u64 little-endian
//! 20      L     UTF-8 JSON header (CheckpointMeta)
//! 20+L    ...   f32 little-endian payload, tensors in header order
//! ```
//!
//! Tensor names in the header carry a group prefix (`backbone/`, `heads/`,
//! `projection/`). `payload_sha256` covers the payload bytes only.

use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Architecture, FeatureExtractor};
use crate::error::{Error, Result};
use crate::nn::ParamStore;

pub const MAGIC: &[u8; 8] = b"SSDETCK\0";
pub const FORMAT_VERSION: u32 = 1;
const PREFIX_LEN: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    SslPretrained,
    ImagenetImported,
    Random,
}

impl Provenance {
    pub fn id(self) -> &'static str {
        match self {
            Self::SslPretrained => "ssl-pretrained",
            Self::ImagenetImported => "imagenet-imported",
            Self::Random => "random",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckpointKind {
    Backbone,
    Detector,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub kind: CheckpointKind,
    pub architecture: String,
    pub provenance: Provenance,
    pub config_digest: String,
    pub created_unix: u64,
    pub initialization: String,
    #[serde(default)]
    pub class_names: Vec<String>,
    /// Free-form key/value annotations (seed, epoch of selection, ...).
    #[serde(default)]
    pub notes: std::collections::BTreeMap<String, String>,
    #[serde(default)]
    pub payload_sha256: String,
    #[serde(default)]
    pub tensors: Vec<TensorEntry>,
}

/// Metadata plus named parameter groups.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub groups: Vec<(String, ParamStore)>,
}

pub type BackboneCheckpoint = Checkpoint;

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl Checkpoint {
    pub fn new(kind: CheckpointKind, arch: Architecture, provenance: Provenance, config_digest: &str) -> Self {
        Self {
            meta: CheckpointMeta {
                format_version: FORMAT_VERSION,
                kind,
                architecture: arch.id().to_string(),
                provenance,
                config_digest: config_digest.to_string(),
                created_unix: now_unix(),
                initialization: "he-fan-in-normal".to_string(),
                class_names: Vec::new(),
                notes: Default::default(),
                payload_sha256: String::new(),
                tensors: Vec::new(),
            },
            groups: Vec::new(),
        }
    }

    /// Backbone checkpoint holding the given extractor's parameters.
    pub fn from_backbone(backbone: &FeatureExtractor, provenance: Provenance, config_digest: &str) -> Self {
        let mut ck = Self::new(CheckpointKind::Backbone, backbone.arch(), provenance, config_digest);
        ck.groups.push(("backbone".into(), backbone.params().clone()));
        ck
    }

    pub fn group(&self, name: &str) -> Result<&ParamStore> {
        self.groups
            .iter()
            .find(|(g, _)| g == name)
            .map(|(_, p)| p)
            .ok_or_else(|| Error::CorruptCheckpoint(format!("missing parameter group `{name}`")))
    }

    pub fn architecture(&self) -> Result<Architecture> {
        self.meta.architecture.parse()
    }

    /// Rebuilds the backbone, refusing a checkpoint of another architecture.
    pub fn backbone(&self, requested: Architecture) -> Result<FeatureExtractor> {
        if self.meta.architecture != requested.id() {
            return Err(Error::IncompatibleArchitecture {
                requested: requested.id().to_string(),
                found: self.meta.architecture.clone(),
            });
        }
        FeatureExtractor::from_params(requested, self.group("backbone")?)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut tensors = Vec::new();
        for (group, store) in &self.groups {
            if group.contains('/') {
                return Err(Error::Contract(format!("group name `{group}` contains '/'")));
            }
            for p in store.iter() {
                tensors.push(TensorEntry {
                    name: format!("{group}/{}", p.name),
                    shape: p.shape.clone(),
                    offset: payload.len() as u64,
                });
                payload.reserve(p.data.len() * 4);
                for v in &p.data {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let mut meta = self.meta.clone();
        meta.format_version = FORMAT_VERSION;
        meta.tensors = tensors;
        meta.payload_sha256 = hex::encode(Sha256::digest(&payload));
        let header = serde_json::to_vec(&meta)?;

        let mut out = Vec::with_capacity(PREFIX_LEN + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::CorruptCheckpoint(m.to_string());
        if bytes.len() < PREFIX_LEN {
            return Err(corrupt("file shorter than the fixed prefix"));
        }
        if &bytes[..8] != MAGIC {
            return Err(corrupt("bad magic bytes"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::CheckpointVersion {
                expected: FORMAT_VERSION,
                found: version,
            });
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
        let header_end = (PREFIX_LEN as u64)
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len() as u64)
            .ok_or_else(|| corrupt("header runs past end of file"))? as usize;
        let mut meta: CheckpointMeta = serde_json::from_slice(&bytes[PREFIX_LEN..header_end])
            .map_err(|e| Error::CorruptCheckpoint(format!("unreadable header: {e}")))?;
        if meta.format_version != version {
            return Err(corrupt("header version disagrees with prefix"));
        }
        let payload = &bytes[header_end..];

        let mut expected_len = 0u64;
        for t in &meta.tensors {
            if t.offset != expected_len {
                return Err(corrupt(&format!("tensor `{}` has a non-contiguous offset", t.name)));
            }
            let n = t.shape.iter().try_fold(1u64, |a, &d| a.checked_mul(d as u64));
            expected_len = n
                .and_then(|n| n.checked_mul(4))
                .and_then(|b| b.checked_add(expected_len))
                .ok_or_else(|| corrupt("tensor size overflows"))?;
        }
        if payload.len() as u64 != expected_len {
            return Err(corrupt(&format!(
                "payload holds {} bytes, tensor table needs {expected_len}",
                payload.len()
            )));
        }
        let found = hex::encode(Sha256::digest(payload));
        if found != meta.payload_sha256 {
            return Err(Error::CheckpointDigest {
                expected: meta.payload_sha256.clone(),
                found,
            });
        }

        let mut groups: Vec<(String, ParamStore)> = Vec::new();
        for t in &meta.tensors {
            let (group, name) = t
                .name
                .split_once('/')
                .ok_or_else(|| corrupt(&format!("tensor `{}` lacks a group prefix", t.name)))?;
            let start = t.offset as usize;
            let n: usize = t.shape.iter().product();
            let data = payload[start..start + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let idx = match groups.iter().position(|(g, _)| g == group) {
                Some(i) => i,
                None => {
                    groups.push((group.to_string(), ParamStore::new()));
                    groups.len() - 1
                }
            };
            if groups[idx].1.index_of(name).is_some() {
                return Err(corrupt(&format!("duplicate tensor `{}`", t.name)));
            }
            groups[idx].1.push(name, t.shape.clone(), data);
        }
        meta.tensors.clear();
        meta.payload_sha256.clear();
        Ok(Self { meta, groups })
    }
}

/// Writes `ckpt` to `path`, replacing any existing file atomically.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
