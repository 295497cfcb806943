//! Model checkpoints: magic `RCKD1` | u32 LE header length | JSON header
//! (version, denoiser spec, schedule, tensor table, training metadata) |
//! raw little-endian f32 payload. Round trips are bit-exact and unknown
//! versions are rejected.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use rclab_core::container::{pull_tensor, push_tensor, read_container, write_container};
use rclab_core::models::{DenoiserModel, DenoiserSpec};
use rclab_core::numcore::ParamSet;

pub const CHECKPOINT_MAGIC: &[u8] = b"RCKD1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ScheduleParams {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleParams {
    pub fn build(&self) -> rclab_core::Result<rclab_core::diffusion::NoiseSchedule> {
        rclab_core::diffusion::NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub role: String,
    pub iterations: usize,
    pub manifest_sha256: String,
    /// Digest of the teacher checkpoint a student was distilled from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_sha256: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    spec: DenoiserSpec,
    schedule: ScheduleParams,
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug)]
pub struct Checkpoint {
    pub model: DenoiserModel<f32>,
    pub schedule: ScheduleParams,
    pub meta: CheckpointMeta,
}

pub fn save_checkpoint(
    model: &DenoiserModel<f32>,
    schedule: &ScheduleParams,
    meta: &CheckpointMeta,
    path: &Path,
) -> Result<()> {
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    for (name, entry) in model.params.iter() {
        let offset = push_tensor(&mut payload, &entry.tensor);
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: entry.tensor.shape().to_vec(),
            offset,
        });
    }
    let header = Header {
        version: CHECKPOINT_VERSION,
        spec: model.spec.clone(),
        schedule: schedule.clone(),
        meta: meta.clone(),
        tensors,
    };
    let header_json = serde_json::to_value(&header).context("encode checkpoint header")?;
    write_container(path, CHECKPOINT_MAGIC, &header_json, &payload)
        .with_context(|| format!("write checkpoint {path:?}"))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let (header_value, payload) = read_container(path, CHECKPOINT_MAGIC)
        .with_context(|| format!("read checkpoint {path:?}"))?;
    let header: Header =
        serde_json::from_value(header_value).context("decode checkpoint header")?;
    if header.version != CHECKPOINT_VERSION {
        bail!(
            "checkpoint {path:?} has version {} (supported: {CHECKPOINT_VERSION})",
            header.version
        );
    }
    let mut params = ParamSet::new();
    for t in &header.tensors {
        let tensor = pull_tensor(&payload, t.offset, &t.shape)
            .with_context(|| format!("checkpoint tensor {:?}", t.name))?;
        params
            .add(&t.name, tensor)
            .with_context(|| format!("checkpoint tensor {:?}", t.name))?;
    }
    let model = DenoiserModel::from_params(header.spec, params)
        .context("rebuild model from checkpoint")?;
    Ok(Checkpoint {
        model,
        schedule: header.schedule,
        meta: header.meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rclab_core::models::CondVocab;

    fn tiny_model() -> DenoiserModel<f32> {
        let spec = DenoiserSpec {
            cond_dim: 8,
            time_dim: 8,
            ..DenoiserSpec::mlp(2, 8, 1, CondVocab::labeled(2))
        };
        DenoiserModel::build(spec, 3).unwrap()
    }

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            role: "teacher".into(),
            iterations: 10,
            manifest_sha256: "m".into(),
            teacher_sha256: None,
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.rckd");
        let model = tiny_model();
        save_checkpoint(&model, &ScheduleParams::default(), &meta(), &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert!(back.model.params.bit_eq(&model.params));
        assert_eq!(back.model.spec, model.spec);
        assert_eq!(back.schedule, ScheduleParams::default());
        assert_eq!(back.meta.iterations, 10);
    }

    #[test]
    fn corrupted_header_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.rckd");
        save_checkpoint(&tiny_model(), &ScheduleParams::default(), &meta(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[2] ^= 0xff; // clobber the magic
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.rckd");
        save_checkpoint(&tiny_model(), &ScheduleParams::default(), &meta(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn unknown_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.rckd");
        save_checkpoint(&tiny_model(), &ScheduleParams::default(), &meta(), &path).unwrap();
        // Rewrite the header with a bumped version.
        let bytes = std::fs::read(&path).unwrap();
        let hlen = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let mut header: serde_json::Value = serde_json::from_slice(&bytes[9..9 + hlen]).unwrap();
        header["version"] = serde_json::json!(9);
        let hjson = serde_json::to_vec(&header).unwrap();
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(hjson.len() as u32).to_le_bytes());
        out.extend_from_slice(&hjson);
        out.extend_from_slice(&bytes[9 + hlen..]);
        std::fs::write(&path, &out).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("version"));
    }
}
