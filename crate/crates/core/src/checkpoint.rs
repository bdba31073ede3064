//! Versioned binary checkpoints.
//!
//! ```text
//! magic     8 bytes   "DDPMTKT\0"
//! length    u64 LE    manifest byte count
//! manifest  JSON      version, hashes, seeds, array and mask index
//! payload   bytes     f32 LE arrays, then packed mask bits
//! ```
//!
//! Mask bits are packed LSB-first; every mask starts on a byte boundary.
//! The manifest records the SHA-256 of the payload.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adam::{AdamConfig, AdamState};
use crate::diffusion::DiffusionConfig;
use crate::error::{CheckpointError, Error, Result};
use crate::params::{Param, ParameterSet, Role};
use crate::pruning::{Mask, MaskSet, RewindSnapshot};
use crate::rng::RngState;
use crate::tensor::Tensor;
use crate::unet::UNetConfig;

pub const MAGIC: &[u8; 8] = b"DDPMTKT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// SHA-256 of the canonical experiment config JSON.
    pub config_hash: String,
    pub round: usize,
    pub step: usize,
    pub seeds: BTreeMap<String, u64>,
    pub model: UNetConfig,
    pub diffusion: DiffusionConfig,
    pub params: ParameterSet,
    pub mask: Option<MaskSet>,
    pub snapshot: Option<RewindSnapshot>,
    pub adam: Option<AdamState>,
    pub rng: Vec<RngState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayEntry {
    section: String,
    name: String,
    module: usize,
    role: Role,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MaskEntry {
    name: String,
    module: usize,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdamEntry {
    config: AdamConfig,
    step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SnapshotEntry {
    round: usize,
    step: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    config_hash: String,
    round: usize,
    step: usize,
    seeds: BTreeMap<String, u64>,
    model: UNetConfig,
    diffusion: DiffusionConfig,
    arrays: Vec<ArrayEntry>,
    masks: Option<Vec<MaskEntry>>,
    snapshot: Option<SnapshotEntry>,
    adam: Option<AdamEntry>,
    rng: Vec<RngState>,
    payload_bytes: usize,
    payload_sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn corrupt(msg: impl Into<String>) -> Error {
    CheckpointError::Manifest(msg.into()).into()
}

fn push_floats(payload: &mut Vec<u8>, values: &[f32]) -> usize {
    let offset = payload.len();
    for v in values {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    offset
}

fn push_section(payload: &mut Vec<u8>, arrays: &mut Vec<ArrayEntry>, section: &str, params: &ParameterSet) {
    for p in params.iter() {
        let offset = push_floats(payload, p.tensor.data());
        arrays.push(ArrayEntry {
            section: section.into(),
            name: p.name.clone(),
            module: p.module,
            role: p.role,
            shape: p.tensor.shape().to_vec(),
            offset,
        });
    }
}

fn read_floats(payload: &[u8], offset: usize, count: usize) -> Result<Vec<f32>> {
    let end = count
        .checked_mul(4)
        .and_then(|n| n.checked_add(offset))
        .filter(|&e| e <= payload.len())
        .ok_or_else(|| CheckpointError::Truncated(format!("array at {offset} needs {count} floats")))?;
    Ok(payload[offset..end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut arrays = Vec::new();
        push_section(&mut payload, &mut arrays, "params", &self.params);
        if let Some(s) = &self.snapshot {
            push_section(&mut payload, &mut arrays, "snapshot", &s.params);
        }
        if let Some(adam) = &self.adam {
            if !adam.is_aligned(&self.params) {
                return Err(Error::Misaligned("optimizer state does not match parameters".into()));
            }
            for (section, moments) in [("adam.m", &adam.first_moment), ("adam.v", &adam.second_moment)] {
                for (p, m) in self.params.iter().zip(moments.iter()) {
                    let offset = push_floats(&mut payload, m);
                    arrays.push(ArrayEntry {
                        section: section.into(),
                        name: p.name.clone(),
                        module: p.module,
                        role: p.role,
                        shape: p.tensor.shape().to_vec(),
                        offset,
                    });
                }
            }
        }
        let masks = self.mask.as_ref().map(|set| {
            set.masks()
                .iter()
                .map(|m| {
                    let offset = payload.len();
                    for chunk in m.bits().chunks(8) {
                        let byte = chunk.iter().enumerate().fold(0u8, |acc, (i, &b)| acc | ((b as u8) << i));
                        payload.push(byte);
                    }
                    MaskEntry {
                        name: m.name.clone(),
                        module: m.module,
                        shape: m.shape().to_vec(),
                        offset,
                    }
                })
                .collect()
        });
        let manifest = Manifest {
            version: FORMAT_VERSION,
            config_hash: self.config_hash.clone(),
            round: self.round,
            step: self.step,
            seeds: self.seeds.clone(),
            model: self.model,
            diffusion: self.diffusion,
            arrays,
            masks,
            snapshot: self.snapshot.as_ref().map(|s| SnapshotEntry {
                round: s.round,
                step: s.step,
            }),
            adam: self.adam.as_ref().map(|a| AdamEntry {
                config: a.config,
                step: a.step,
            }),
            rng: self.rng.clone(),
            payload_bytes: payload.len(),
            payload_sha256: sha256_hex(&payload),
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic.into());
        }
        if bytes.len() < 16 {
            return Err(CheckpointError::Truncated("missing manifest length".into()).into());
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let json_end = 16usize
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| CheckpointError::Truncated(format!("manifest of {len} bytes")))?;
        let value: serde_json::Value =
            serde_json::from_slice(&bytes[16..json_end]).map_err(|e| corrupt(e.to_string()))?;
        let version = value.get("version").and_then(|v| v.as_u64()).ok_or_else(|| corrupt("missing version"))?;
        if version != FORMAT_VERSION as u64 {
            return Err(CheckpointError::VersionMismatch {
                found: version as u32,
                expected: FORMAT_VERSION,
            }
            .into());
        }
        let manifest: Manifest = serde_json::from_value(value).map_err(|e| corrupt(e.to_string()))?;
        let payload = &bytes[json_end..];
        if payload.len() < manifest.payload_bytes {
            return Err(CheckpointError::Truncated(format!(
                "payload has {} of {} bytes",
                payload.len(),
                manifest.payload_bytes
            ))
            .into());
        }
        let actual = sha256_hex(payload);
        if payload.len() != manifest.payload_bytes || actual != manifest.payload_sha256 {
            return Err(CheckpointError::HashMismatch {
                expected: manifest.payload_sha256,
                actual,
            }
            .into());
        }

        let mut sections: BTreeMap<&str, Vec<Param>> = BTreeMap::new();
        for a in &manifest.arrays {
            let count = a.shape.iter().product();
            let tensor = Tensor::new(a.shape.clone(), read_floats(payload, a.offset, count)?)
                .map_err(|e| corrupt(e.to_string()))?;
            sections.entry(a.section.as_str()).or_default().push(Param {
                module: a.module,
                name: a.name.clone(),
                role: a.role,
                tensor,
            });
        }
        let mut take = |s: &str| sections.remove(s).map(ParameterSet::new).transpose();
        let params = take("params")?.ok_or_else(|| corrupt("no parameter arrays"))?;
        let snapshot = match (manifest.snapshot, take("snapshot")?) {
            (Some(s), Some(p)) => Some(RewindSnapshot {
                params: p,
                round: s.round,
                step: s.step,
            }),
            (None, None) => None,
            _ => return Err(corrupt("snapshot arrays and header disagree")),
        };
        let adam = match (manifest.adam, take("adam.m")?, take("adam.v")?) {
            (Some(a), Some(m), Some(v)) => Some(AdamState {
                config: a.config,
                step: a.step,
                first_moment: m.iter().map(|p| p.tensor.data().to_vec()).collect(),
                second_moment: v.iter().map(|p| p.tensor.data().to_vec()).collect(),
            }),
            (None, None, None) => None,
            _ => return Err(corrupt("optimizer arrays and header disagree")),
        };
        if let Some(s) = sections.keys().next() {
            return Err(corrupt(format!("unknown array section `{s}`")));
        }
        let mask = match manifest.masks {
            None => None,
            Some(entries) => {
                let mut masks = Vec::with_capacity(entries.len());
                for e in entries {
                    let n: usize = e.shape.iter().product();
                    let end = e.offset + n.div_ceil(8);
                    if end > payload.len() {
                        return Err(CheckpointError::Truncated(format!("mask `{}`", e.name)).into());
                    }
                    let bytes = &payload[e.offset..end];
                    let bits = (0..n).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect();
                    masks.push(Mask::new(e.name, e.module, e.shape, bits)?);
                }
                let set = MaskSet::from_masks(masks);
                set.check_aligned(&params)?;
                Some(set)
            }
        };
        Ok(Self {
            config_hash: manifest.config_hash,
            round: manifest.round,
            step: manifest.step,
            seeds: manifest.seeds,
            model: manifest.model,
            diffusion: manifest.diffusion,
            params,
            mask,
            snapshot,
            adam,
            rng: manifest.rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// The mask, or a full mask when none is stored.
    pub fn mask_or_full(&self) -> MaskSet {
        self.mask.clone().unwrap_or_else(|| MaskSet::full(&self.params))
    }
}
