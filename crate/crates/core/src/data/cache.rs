//! The generation cache: teacher-sampled images keyed by condition and
//! seed — the image-free distillation substrate.
//!
//! File layout (bit-exact):
//!   magic `RCCACHE1` | u32 LE header length | JSON header | payload
//! where the payload is the concatenation of little-endian f32 image
//! tensors and the header records version, sampler config + digest,
//! teacher checkpoint digest, payload digest, and the entry table
//! (condition, seed, byte offset, shape).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{PairedDataset, Provenance};
use crate::diffusion::{sample, NoiseSchedule, SamplerConfig};
use crate::digest::sha256_hex;
use crate::error::{Error, Result};
use crate::models::{Condition, DenoiserModel};
use crate::numcore::Tensor;

pub const CACHE_MAGIC: &[u8; 8] = b"RCCACHE1";
pub const CACHE_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct CacheEntry {
    pub image: Tensor<f32>,
    pub condition: Condition,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct GenerationCache {
    pub entries: Vec<CacheEntry>,
    pub sampler: SamplerConfig,
    pub sampler_digest: String,
    pub teacher_digest: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    sampler: SamplerConfig,
    sampler_digest: String,
    teacher_digest: String,
    payload_sha256: String,
    entries: Vec<HeaderEntry>,
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    condition: Condition,
    seed: u64,
    offset: u64,
    shape: Vec<usize>,
}

pub fn sampler_digest(sampler: &SamplerConfig) -> String {
    sha256_hex(serde_json::to_string(sampler).expect("sampler json").as_bytes())
}

impl GenerationCache {
    /// Sample one image per (condition, seed) pair from the teacher.
    /// Entries are generated in parallel with per-entry seeds.
    pub fn generate(
        teacher: &DenoiserModel<f32>,
        teacher_digest: &str,
        pairs: &[(Condition, u64)],
        sampler: &SamplerConfig,
        sched: &NoiseSchedule,
    ) -> Result<Self> {
        use rayon::prelude::*;
        if pairs.is_empty() {
            return Err(Error::invalid("cache generation needs at least one entry"));
        }
        let entries: Vec<CacheEntry> = pairs
            .par_iter()
            .map(|&(condition, seed)| {
                sample(teacher, condition, sampler, sched, seed, None).map(|image| CacheEntry {
                    image,
                    condition,
                    seed,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            entries,
            sampler: *sampler,
            sampler_digest: sampler_digest(sampler),
            teacher_digest: teacher_digest.to_string(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::invalid("refusing to write an empty cache"));
        }
        let mut payload: Vec<u8> = Vec::new();
        let mut header_entries = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            header_entries.push(HeaderEntry {
                condition: e.condition,
                seed: e.seed,
                offset: payload.len() as u64,
                shape: e.image.shape().to_vec(),
            });
            for v in e.image.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = Header {
            version: CACHE_VERSION,
            sampler: self.sampler,
            sampler_digest: self.sampler_digest.clone(),
            teacher_digest: self.teacher_digest.clone(),
            payload_sha256: sha256_hex(&payload),
            entries: header_entries,
        };
        let header_json = serde_json::to_vec(&header)
            .map_err(|e| Error::Format(format!("cache header encode: {e}")))?;
        let mut bytes = Vec::with_capacity(12 + header_json.len() + payload.len());
        bytes.extend_from_slice(CACHE_MAGIC);
        bytes.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
        bytes.extend_from_slice(&header_json);
        bytes.extend_from_slice(&payload);
        fs::write(path, bytes)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        if bytes.len() < 12 || &bytes[..8] != CACHE_MAGIC {
            return Err(Error::Format(format!(
                "not a cache file (magic {:?} expected {:?})",
                &bytes.get(..8),
                CACHE_MAGIC
            )));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header_end = 12usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Format("cache header length exceeds file".into()))?;
        let header: Header = serde_json::from_slice(&bytes[12..header_end])
            .map_err(|e| Error::Format(format!("cache header decode: {e}")))?;
        if header.version != CACHE_VERSION {
            return Err(Error::Format(format!(
                "cache version {} unsupported (expected {CACHE_VERSION})",
                header.version
            )));
        }
        let payload = &bytes[header_end..];
        if sha256_hex(payload) != header.payload_sha256 {
            return Err(Error::Corruption(
                "cache payload digest does not match header".into(),
            ));
        }
        let mut entries = Vec::with_capacity(header.entries.len());
        for he in &header.entries {
            let count: usize = he.shape.iter().product();
            let start = he.offset as usize;
            let end = start + count * 4;
            if end > payload.len() {
                return Err(Error::Format(format!(
                    "cache entry at offset {start} runs past payload"
                )));
            }
            let data: Vec<f32> = payload[start..end]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            entries.push(CacheEntry {
                image: Tensor::new(&he.shape, data)?,
                condition: he.condition,
                seed: he.seed,
            });
        }
        Ok(Self {
            entries,
            sampler: header.sampler,
            sampler_digest: header.sampler_digest,
            teacher_digest: header.teacher_digest,
        })
    }

    /// View the cache as a paired dataset with `Generated` provenance.
    pub fn as_dataset(&self) -> PairedDataset {
        PairedDataset {
            examples: self
                .entries
                .iter()
                .map(|e| (e.image.clone(), e.condition))
                .collect(),
            provenance: Provenance::Generated,
        }
    }

    /// Re-generate a deterministic fraction of entries from the recorded
    /// (condition, seed, sampler) and require bit-exact reproduction.
    pub fn spot_check(
        &self,
        teacher: &DenoiserModel<f32>,
        sched: &NoiseSchedule,
        fraction: f64,
    ) -> Result<usize> {
        if sampler_digest(&self.sampler) != self.sampler_digest {
            return Err(Error::Corruption(
                "stored sampler does not match its digest".into(),
            ));
        }
        let n = self.entries.len();
        let checks = ((n as f64 * fraction).ceil() as usize).clamp(1, n);
        let stride = n.div_ceil(checks);
        let mut verified = 0;
        for e in self.entries.iter().step_by(stride.max(1)) {
            let regen = sample(teacher, e.condition, &self.sampler, sched, e.seed, None)?;
            if !regen.bit_eq(&e.image) {
                return Err(Error::Corruption(format!(
                    "cache entry (condition {:?}, seed {}) does not reproduce from the teacher",
                    e.condition, e.seed
                )));
            }
            verified += 1;
        }
        Ok(verified)
    }

    /// Conditions covered by the cache, in entry order, deduplicated.
    pub fn distinct_conditions(&self) -> Vec<Condition> {
        let mut seen = Vec::new();
        for e in &self.entries {
            if !seen.contains(&e.condition) {
                seen.push(e.condition);
            }
        }
        seen
    }
}
