//! On-disk dataset: a directory holding
//!
//! - `manifest.json`: format tag, version, counts, generation spec echo and
//!   CRC-32 checksums of the other two files;
//! - `patches.f32le`: every patch's pixels as little-endian `f32`, sequences in
//!   order, patches in record order;
//! - `meta.jsonl`: one JSON object per sequence (frames, patch metadata,
//!   ground truth). Angles are in degrees.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::render::CHANNELS;
use super::{PatchRecord, SceneSpec, SequenceSample};
use crate::geometry::{CameraFrame, Direction3};

pub const DATASET_FORMAT: &str = "sunformer-dataset";
pub const DATASET_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PATCHES_FILE: &str = "patches.f32le";
pub const META_FILE: &str = "meta.jsonl";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{file}: malformed JSON: {msg}")]
    Json { file: String, msg: String },
    #[error("unsupported dataset version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("{file} is truncated: {detail}")]
    Truncated { file: String, detail: String },
    #[error("{file}: checksum mismatch (manifest {expected}, file {found})")]
    Checksum {
        file: String,
        expected: String,
        found: String,
    },
    #[error("inconsistent dataset structure: {0}")]
    Structure(String),
    #[error("{0} already contains a dataset (use --force to overwrite)")]
    Exists(PathBuf),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Degree-valued echo of the [`SceneSpec`] a dataset was generated from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpecEcho {
    pub sun: Option<[f64; 3]>,
    pub min_altitude_deg: f64,
    pub max_altitude_deg: f64,
    pub frames: usize,
    pub crops: usize,
    pub patch_size: usize,
    pub fov_h_deg: f64,
    pub fov_v_deg: f64,
    pub crop_fov_h_deg: f64,
    pub crop_fov_v_deg: f64,
    pub yaw_step_std_deg: f64,
    pub max_pitch_deg: f64,
    pub outlier_prob: f64,
    pub noise_sigma: f64,
}

impl From<&SceneSpec> for SpecEcho {
    fn from(s: &SceneSpec) -> Self {
        Self {
            sun: s.sun.map(Direction3::to_array),
            min_altitude_deg: s.min_altitude.to_degrees(),
            max_altitude_deg: s.max_altitude.to_degrees(),
            frames: s.frames,
            crops: s.crops,
            patch_size: s.patch_size,
            fov_h_deg: s.fov_h.to_degrees(),
            fov_v_deg: s.fov_v.to_degrees(),
            crop_fov_h_deg: s.crop_fov_h.to_degrees(),
            crop_fov_v_deg: s.crop_fov_v.to_degrees(),
            yaw_step_std_deg: s.yaw_step_std.to_degrees(),
            max_pitch_deg: s.max_pitch.to_degrees(),
            outlier_prob: s.outlier_prob,
            noise_sigma: s.noise_sigma,
        }
    }
}

impl SpecEcho {
    pub fn to_spec(&self) -> SceneSpec {
        SceneSpec {
            sun: self.sun.map(Direction3::from_array),
            min_altitude: self.min_altitude_deg.to_radians(),
            max_altitude: self.max_altitude_deg.to_radians(),
            frames: self.frames,
            crops: self.crops,
            patch_size: self.patch_size,
            fov_h: self.fov_h_deg.to_radians(),
            fov_v: self.fov_v_deg.to_radians(),
            crop_fov_h: self.crop_fov_h_deg.to_radians(),
            crop_fov_v: self.crop_fov_v_deg.to_radians(),
            yaw_step_std: self.yaw_step_std_deg.to_radians(),
            max_pitch: self.max_pitch_deg.to_radians(),
            outlier_prob: self.outlier_prob,
            noise_sigma: self.noise_sigma,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub spec: Option<SpecEcho>,
    pub seed: Option<u64>,
    pub samples: Vec<SequenceSample>,
}

impl Dataset {
    pub fn patch_size(&self) -> Option<usize> {
        self.samples.first().map(|s| s.patch_size)
    }

    pub fn patch_count(&self) -> usize {
        self.samples.iter().map(|s| s.patches.len()).sum()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Checksums {
    #[serde(rename = "patches.f32le")]
    patches: String,
    #[serde(rename = "meta.jsonl")]
    meta: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    sequences: usize,
    patch_count: usize,
    patch_size: usize,
    channels: usize,
    seed: Option<u64>,
    spec: Option<SpecEcho>,
    checksums: Checksums,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FrameLine {
    frame_id: u32,
    yaw_deg: f64,
    pitch_deg: f64,
    fov_h_deg: f64,
    fov_v_deg: f64,
    timestamp: Option<i64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PatchLine {
    patch_id: u32,
    frame_id: u32,
    phi_h_deg: f64,
    phi_v_deg: f64,
    outlier: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SequenceLine {
    scene_id: u64,
    gt: [f64; 3],
    sun_azimuth_deg: f64,
    sun_altitude_deg: f64,
    frames: Vec<FrameLine>,
    patches: Vec<PatchLine>,
}

fn crc_hex(bytes: &[u8]) -> String {
    format!("crc32:{:08x}", crc32fast::hash(bytes))
}

fn meta_line(s: &SequenceSample) -> SequenceLine {
    SequenceLine {
        scene_id: s.scene_id,
        gt: s.gt_world.to_array(),
        sun_azimuth_deg: s.gt_world.azimuth().to_degrees(),
        sun_altitude_deg: s.gt_world.altitude().to_degrees(),
        frames: s
            .frames
            .iter()
            .map(|f| FrameLine {
                frame_id: f.frame_id,
                yaw_deg: f.yaw().to_degrees(),
                pitch_deg: f.pitch.to_degrees(),
                fov_h_deg: f.fov_h.to_degrees(),
                fov_v_deg: f.fov_v.to_degrees(),
                timestamp: f.timestamp,
            })
            .collect(),
        patches: s
            .patches
            .iter()
            .map(|p| PatchLine {
                patch_id: p.patch_id,
                frame_id: p.frame_id,
                phi_h_deg: p.phi_h.to_degrees(),
                phi_v_deg: p.phi_v.to_degrees(),
                outlier: p.outlier,
            })
            .collect(),
    }
}

/// Writes `dataset` into directory `dir`, refusing to replace an existing
/// dataset unless `force` is set.
pub fn write_dataset(dir: &Path, dataset: &Dataset, force: bool) -> Result<(), DatasetError> {
    let patch_size = dataset
        .patch_size()
        .ok_or_else(|| DatasetError::Structure("no sequences to write".into()))?;
    if dataset.samples.iter().any(|s| s.patch_size != patch_size) {
        return Err(DatasetError::Structure("mixed patch sizes".into()));
    }
    let manifest_path = dir.join(MANIFEST_FILE);
    if manifest_path.exists() && !force {
        return Err(DatasetError::Exists(dir.to_path_buf()));
    }
    fs::create_dir_all(dir).map_err(io_err(dir))?;

    let floats = patch_size * patch_size * CHANNELS;
    let mut blob = Vec::with_capacity(dataset.patch_count() * floats * 4);
    let mut meta = Vec::new();
    for s in &dataset.samples {
        for p in &s.patches {
            if p.pixels.len() != floats {
                return Err(DatasetError::Structure(format!(
                    "scene {} patch {} has {} values, expected {floats}",
                    s.scene_id,
                    p.patch_id,
                    p.pixels.len()
                )));
            }
            for v in &p.pixels {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        serde_json::to_writer(&mut meta, &meta_line(s)).map_err(|e| DatasetError::Json {
            file: META_FILE.into(),
            msg: e.to_string(),
        })?;
        meta.push(b'\n');
    }

    let manifest = Manifest {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        sequences: dataset.samples.len(),
        patch_count: dataset.patch_count(),
        patch_size,
        channels: CHANNELS,
        seed: dataset.seed,
        spec: dataset.spec,
        checksums: Checksums {
            patches: crc_hex(&blob),
            meta: crc_hex(&meta),
        },
    };
    let patches_path = dir.join(PATCHES_FILE);
    fs::write(&patches_path, &blob).map_err(io_err(&patches_path))?;
    let meta_path = dir.join(META_FILE);
    fs::write(&meta_path, &meta).map_err(io_err(&meta_path))?;
    let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| DatasetError::Json {
        file: MANIFEST_FILE.into(),
        msg: e.to_string(),
    })?;
    text.push('\n');
    let mut f = fs::File::create(&manifest_path).map_err(io_err(&manifest_path))?;
    f.write_all(text.as_bytes()).map_err(io_err(&manifest_path))?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset, DatasetError> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| DatasetError::Json {
        file: MANIFEST_FILE.into(),
        msg: e.to_string(),
    })?;
    let version = raw.get("version").and_then(serde_json::Value::as_u64).unwrap_or(0) as u32;
    if version != DATASET_VERSION {
        return Err(DatasetError::Version {
            found: version,
            expected: DATASET_VERSION,
        });
    }
    let manifest: Manifest = serde_json::from_value(raw).map_err(|e| DatasetError::Json {
        file: MANIFEST_FILE.into(),
        msg: e.to_string(),
    })?;
    if manifest.format != DATASET_FORMAT {
        return Err(DatasetError::Structure(format!("unknown format tag {:?}", manifest.format)));
    }
    if manifest.channels != CHANNELS || manifest.patch_size == 0 {
        return Err(DatasetError::Structure(format!(
            "unsupported layout: {} channels, patch size {}",
            manifest.channels, manifest.patch_size
        )));
    }

    let patches_path = dir.join(PATCHES_FILE);
    let blob = fs::read(&patches_path).map_err(io_err(&patches_path))?;
    let floats = manifest.patch_size * manifest.patch_size * CHANNELS;
    let record = floats * 4;
    if blob.len() % record != 0 {
        return Err(DatasetError::Truncated {
            file: PATCHES_FILE.into(),
            detail: format!("{} bytes is not a whole number of {record}-byte patches", blob.len()),
        });
    }
    if blob.len() / record != manifest.patch_count {
        return Err(DatasetError::Structure(format!(
            "manifest lists {} patches, {PATCHES_FILE} holds {}",
            manifest.patch_count,
            blob.len() / record
        )));
    }
    let found = crc_hex(&blob);
    if found != manifest.checksums.patches {
        return Err(DatasetError::Checksum {
            file: PATCHES_FILE.into(),
            expected: manifest.checksums.patches,
            found,
        });
    }

    let meta_path = dir.join(META_FILE);
    let meta = fs::read(&meta_path).map_err(io_err(&meta_path))?;
    let found = crc_hex(&meta);
    if found != manifest.checksums.meta {
        return Err(DatasetError::Checksum {
            file: META_FILE.into(),
            expected: manifest.checksums.meta,
            found,
        });
    }
    let meta = String::from_utf8(meta).map_err(|e| DatasetError::Json {
        file: META_FILE.into(),
        msg: e.to_string(),
    })?;
    let lines: Vec<&str> = meta.lines().filter(|l| !l.trim().is_empty()).collect();
    if lines.len() != manifest.sequences {
        return Err(DatasetError::Structure(format!(
            "manifest lists {} sequences, {META_FILE} holds {}",
            manifest.sequences,
            lines.len()
        )));
    }

    let mut values = blob
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
    let mut samples = Vec::with_capacity(lines.len());
    let mut consumed = 0;
    for (i, line) in lines.iter().enumerate() {
        let seq: SequenceLine = serde_json::from_str(line).map_err(|e| DatasetError::Json {
            file: format!("{META_FILE} line {}", i + 1),
            msg: e.to_string(),
        })?;
        let frames = seq
            .frames
            .iter()
            .map(|f| {
                let mut frame = CameraFrame::new(
                    f.frame_id,
                    f.yaw_deg.to_radians(),
                    f.pitch_deg.to_radians(),
                    f.fov_h_deg.to_radians(),
                    f.fov_v_deg.to_radians(),
                )
                .map_err(|e| DatasetError::Structure(format!("sequence {}: {e}", seq.scene_id)))?;
                frame.timestamp = f.timestamp;
                Ok(frame)
            })
            .collect::<Result<Vec<_>, DatasetError>>()?;
        consumed += seq.patches.len();
        if consumed > manifest.patch_count {
            return Err(DatasetError::Structure(format!(
                "{META_FILE} references more patches than the manifest's {}",
                manifest.patch_count
            )));
        }
        let patches = seq
            .patches
            .iter()
            .map(|p| PatchRecord {
                patch_id: p.patch_id,
                frame_id: p.frame_id,
                phi_h: p.phi_h_deg.to_radians(),
                phi_v: p.phi_v_deg.to_radians(),
                outlier: p.outlier,
                pixels: values.by_ref().take(floats).collect(),
            })
            .collect();
        let sample = SequenceSample {
            scene_id: seq.scene_id,
            patch_size: manifest.patch_size,
            frames,
            patches,
            gt_world: Direction3::from_array(seq.gt),
        };
        sample
            .validate()
            .map_err(|e| DatasetError::Structure(format!("sequence {}: {e}", seq.scene_id)))?;
        samples.push(sample);
    }
    if consumed != manifest.patch_count {
        return Err(DatasetError::Structure(format!(
            "{META_FILE} references {consumed} patches, manifest lists {}",
            manifest.patch_count
        )));
    }
    Ok(Dataset {
        spec: manifest.spec,
        seed: manifest.seed,
        samples,
    })
}
