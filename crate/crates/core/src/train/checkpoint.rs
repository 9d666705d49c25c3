//! Checkpoint file: `SUNFCKPT`, a little-endian `u32` header length, a JSON
//! header, then every weight section as little-endian `f32`.
//!
//! The header carries the model and encoding configs, a section index
//! (name, shape, offset and length in floats), training metadata, and a
//! CRC-32 of the float blob. Optimizer moments, when saved, follow the weights
//! as `adam.m/<section>` and `adam.v/<section>`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::AdamState;
use crate::encoding::EncodingConfig;
use crate::model::{Model, ModelConfig, ModelWeights};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SUNFCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not a checkpoint: {0}")]
    Format(String),
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint checksum mismatch (header {expected}, data {found})")]
    Checksum { expected: String, found: String },
    #[error("checkpoint/config mismatch in {field}: {detail}")]
    Mismatch { field: &'static str, detail: String },
    #[error("{0} exists (use --force to overwrite)")]
    Exists(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epoch: usize,
    pub val_mean_err_deg: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub optimizer: Option<AdamState<f32>>,
    pub meta: TrainingMeta,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SectionEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    model: ModelConfig,
    encoding: EncodingConfig,
    sections: Vec<SectionEntry>,
    optimizer_step: Option<u64>,
    meta: TrainingMeta,
    blob_floats: usize,
    checksum: String,
}

fn crc_hex(bytes: &[u8]) -> String {
    format!("crc32:{:08x}", crc32fast::hash(bytes))
}

impl Checkpoint {
    /// Rejects an encoding config that differs from the one the model was
    /// trained with, naming the first differing field.
    pub fn check_encoding(&self, enc: &EncodingConfig) -> Result<(), CheckpointError> {
        let own = &self.model.encoding;
        let diff = |field: &'static str, a: String, b: String| CheckpointError::Mismatch {
            field,
            detail: format!("checkpoint has {a}, requested {b}"),
        };
        if own.d_angle != enc.d_angle {
            return Err(diff("d_angle", own.d_angle.to_string(), enc.d_angle.to_string()));
        }
        if own.alpha != enc.alpha {
            return Err(diff("alpha", own.alpha.to_string(), enc.alpha.to_string()));
        }
        if own.base != enc.base {
            return Err(diff("base", own.base.to_string(), enc.base.to_string()));
        }
        Ok(())
    }

    pub fn check_patch_size(&self, patch_size: usize) -> Result<(), CheckpointError> {
        if self.model.config.patch_size != patch_size {
            return Err(CheckpointError::Mismatch {
                field: "patch_size",
                detail: format!(
                    "checkpoint expects {} px patches, dataset has {patch_size} px",
                    self.model.config.patch_size
                ),
            });
        }
        Ok(())
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let w = &ckpt.model.weights;
    let mut tensors: Vec<(String, &Tensor<f32>)> = w.names().iter().cloned().zip(w.tensors()).collect();
    if let Some(opt) = &ckpt.optimizer {
        tensors.extend(w.names().iter().map(|n| format!("adam.m/{n}")).zip(&opt.m));
        tensors.extend(w.names().iter().map(|n| format!("adam.v/{n}")).zip(&opt.v));
    }
    let mut sections = Vec::with_capacity(tensors.len());
    let mut blob = Vec::new();
    let mut offset = 0;
    for (name, t) in &tensors {
        sections.push(SectionEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
            len: t.len(),
        });
        offset += t.len();
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        model: ckpt.model.config.clone(),
        encoding: ckpt.model.encoding,
        sections,
        optimizer_step: ckpt.optimizer.as_ref().map(|o| o.t),
        meta: ckpt.meta.clone(),
        blob_floats: offset,
        checksum: crc_hex(&blob),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let fmt = |m: &str| CheckpointError::Format(m.to_string());
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(fmt("missing magic bytes"));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = &bytes[12..];
    if body.len() < hlen {
        return Err(fmt("truncated header"));
    }
    let raw: serde_json::Value =
        serde_json::from_slice(&body[..hlen]).map_err(|e| CheckpointError::Format(format!("header: {e}")))?;
    let version = raw.get("format_version").and_then(serde_json::Value::as_u64).unwrap_or(0) as u32;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version { found: version, expected: CHECKPOINT_VERSION });
    }
    let header: Header = serde_json::from_value(raw).map_err(|e| CheckpointError::Format(format!("header: {e}")))?;
    let blob = &body[hlen..];
    if blob.len() != header.blob_floats * 4 {
        return Err(CheckpointError::Format(format!(
            "weight blob has {} bytes, header lists {} floats",
            blob.len(),
            header.blob_floats
        )));
    }
    let found = crc_hex(blob);
    if found != header.checksum {
        return Err(CheckpointError::Checksum { expected: header.checksum, found });
    }
    header.model.validate(&header.encoding).map_err(|e| CheckpointError::Mismatch {
        field: "model",
        detail: e.to_string(),
    })?;

    let floats: Vec<f32> = blob
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let mut tensors = Vec::with_capacity(header.sections.len());
    for s in &header.sections {
        if s.shape.iter().product::<usize>() != s.len || s.offset + s.len > floats.len() {
            return Err(CheckpointError::Format(format!("section {} has an inconsistent index entry", s.name)));
        }
        let t = Tensor::new(s.shape.clone(), floats[s.offset..s.offset + s.len].to_vec())
            .map_err(|e| CheckpointError::Format(e.to_string()))?;
        tensors.push((s.name.clone(), t));
    }

    let n = header.model.layout().len();
    let expected = if header.optimizer_step.is_some() { 3 * n } else { n };
    if tensors.len() != expected {
        return Err(CheckpointError::Mismatch {
            field: "sections",
            detail: format!("{} sections, config implies {expected}", tensors.len()),
        });
    }
    let rest = tensors.split_off(n);
    let weights = ModelWeights::from_sections(&header.model, tensors).map_err(|e| CheckpointError::Mismatch {
        field: "sections",
        detail: e.to_string(),
    })?;
    let optimizer = match header.optimizer_step {
        None => None,
        Some(t) => {
            let mut rest = rest.into_iter();
            let mut take = |prefix: &str| -> Result<Vec<Tensor<f32>>, CheckpointError> {
                weights
                    .names()
                    .iter()
                    .zip(weights.tensors())
                    .map(|(name, w)| {
                        let (got, t) = rest.next().expect("count checked above");
                        if got != format!("{prefix}/{name}") || t.shape() != w.shape() {
                            return Err(CheckpointError::Mismatch {
                                field: "sections",
                                detail: format!("unexpected optimizer section {got}"),
                            });
                        }
                        Ok(t)
                    })
                    .collect()
            };
            let m = take("adam.m")?;
            let v = take("adam.v")?;
            Some(AdamState { t, m, v })
        }
    };
    Ok(Checkpoint {
        model: Model {
            config: header.model,
            encoding: header.encoding,
            weights,
        },
        optimizer,
        meta: header.meta,
    })
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint, force: bool) -> Result<(), CheckpointError> {
    if path.exists() && !force {
        return Err(CheckpointError::Exists(path.display().to_string()));
    }
    fs::write(path, encode_checkpoint(ckpt)).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{sample_sequence, SceneSpec};

    fn sample_ckpt(with_opt: bool) -> Checkpoint {
        let model = Model::<f32>::new(ModelConfig::desk(), EncodingConfig::default(), 5).unwrap();
        let optimizer = with_opt.then(|| {
            let mut s = AdamState::new(&model.weights);
            s.t = 17;
            s.m[3].data_mut()[0] = 0.25;
            s.v[39].data_mut()[1] = 1e-7;
            s
        });
        Checkpoint {
            model,
            optimizer,
            meta: TrainingMeta { epoch: 4, val_mean_err_deg: 7.125, seed: 3 },
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for with_opt in [false, true] {
            let c = sample_ckpt(with_opt);
            let bytes = encode_checkpoint(&c);
            let back = decode_checkpoint(&bytes).unwrap();
            assert_eq!(back, c);
            assert_eq!(encode_checkpoint(&back), bytes);
        }
    }

    #[test]
    fn eval_outputs_survive_round_trip() {
        let c = sample_ckpt(false);
        let back = decode_checkpoint(&encode_checkpoint(&c)).unwrap();
        let s = sample_sequence(&SceneSpec::default(), 0, 1).unwrap();
        assert_eq!(c.model.predict(&s).unwrap(), back.model.predict(&s).unwrap());
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = encode_checkpoint(&sample_ckpt(false));
        let n = bytes.len();
        bytes[n - 5] ^= 1;
        assert!(matches!(decode_checkpoint(&bytes), Err(CheckpointError::Checksum { .. })));
        assert!(matches!(decode_checkpoint(&bytes[..n - 4]), Err(CheckpointError::Format(_))));
        assert!(matches!(decode_checkpoint(b"nonsense"), Err(CheckpointError::Format(_))));
    }

    #[test]
    fn version_and_encoding_checks() {
        let c = sample_ckpt(false);
        let bytes = encode_checkpoint(&c);
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header = String::from_utf8(bytes[12..12 + hlen].to_vec()).unwrap();
        let patched = header.replace("\"format_version\":1", "\"format_version\":7");
        let mut out = bytes[..8].to_vec();
        out.extend_from_slice(&(patched.len() as u32).to_le_bytes());
        out.extend_from_slice(patched.as_bytes());
        out.extend_from_slice(&bytes[12 + hlen..]);
        assert!(matches!(decode_checkpoint(&out), Err(CheckpointError::Version { found: 7, .. })));

        let other = EncodingConfig::new(20, std::f64::consts::FRAC_PI_2).unwrap();
        let err = c.check_encoding(&other).unwrap_err();
        assert!(err.to_string().contains("d_angle"), "{err}");
        assert!(c.check_encoding(&EncodingConfig::default()).is_ok());
        assert!(c.check_patch_size(8).unwrap_err().to_string().contains("patch_size"));
    }

    #[test]
    fn refuses_overwrite() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        write_checkpoint(&p, &sample_ckpt(false), false).unwrap();
        assert!(matches!(write_checkpoint(&p, &sample_ckpt(false), false), Err(CheckpointError::Exists(_))));
        write_checkpoint(&p, &sample_ckpt(true), true).unwrap();
        assert!(read_checkpoint(&p).unwrap().optimizer.is_some());
    }
}
