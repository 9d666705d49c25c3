//! Labeled synthetic sequences: `k` frames with random-walk yaw and small
//! pitch offsets, `n` crops per frame, each rendered in its own crop frame.
//!
//! Only the frame pose goes into `R_f`. The crop offsets `(φ_h, φ_v)` live in
//! patch metadata, so a model has to read them from the positional encoding
//! to map a crop-frame observation back into its camera frame.

pub mod dataset;
pub mod render;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{direction_from_spherical, wrap_angle, CameraFrame, Direction3, GeometryError, RotationMatrix};

pub use dataset::{read_dataset, write_dataset, Dataset, DatasetError};
pub use render::render_patch;

/// Bounded crop re-draws before a below-horizon crop is marked as an outlier.
pub const MAX_CROP_RETRIES: usize = 16;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid scene spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Reference frame geometry: 224-pixel crops out of 1220×370 frames.
const FRAME_WIDTH_PX: f64 = 1220.0;
const FRAME_HEIGHT_PX: f64 = 370.0;
const CROP_PX: f64 = 224.0;

/// Generation parameters. Angles in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    /// Fixed world sun direction; drawn per sequence when `None`.
    pub sun: Option<Direction3>,
    pub min_altitude: f64,
    pub max_altitude: f64,
    pub frames: usize,
    pub crops: usize,
    pub patch_size: usize,
    pub fov_h: f64,
    pub fov_v: f64,
    pub crop_fov_h: f64,
    pub crop_fov_v: f64,
    /// Standard deviation of the per-frame yaw random-walk step.
    pub yaw_step_std: f64,
    /// Frame pitch is uniform in `[-max_pitch, max_pitch]`; zero disables pitch.
    pub max_pitch: f64,
    pub outlier_prob: f64,
    pub noise_sigma: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        let fov_h = 82f64.to_radians();
        let fov_v = 29f64.to_radians();
        Self {
            sun: None,
            min_altitude: 5f64.to_radians(),
            max_altitude: 85f64.to_radians(),
            frames: 8,
            crops: 4,
            patch_size: 16,
            fov_h,
            fov_v,
            crop_fov_h: fov_h * CROP_PX / FRAME_WIDTH_PX,
            crop_fov_v: fov_v * CROP_PX / FRAME_HEIGHT_PX,
            yaw_step_std: 45f64.to_radians(),
            max_pitch: 10f64.to_radians(),
            outlier_prob: 0.25,
            noise_sigma: 0.05,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Spec(m));
        if self.frames == 0 || self.crops == 0 {
            return bad(format!("need frames >= 1 and crops >= 1, got {}x{}", self.frames, self.crops));
        }
        if self.patch_size < 2 {
            return bad(format!("patch_size {} < 2", self.patch_size));
        }
        if !(0.0..=1.0).contains(&self.outlier_prob) {
            return bad(format!("outlier probability {} outside [0, 1]", self.outlier_prob));
        }
        if !(self.noise_sigma >= 0.0) || !(self.yaw_step_std >= 0.0) || !(self.max_pitch >= 0.0) {
            return bad("noise, yaw step and pitch range must be nonnegative".into());
        }
        if !(0.0 < self.min_altitude && self.min_altitude <= self.max_altitude && self.max_altitude < std::f64::consts::FRAC_PI_2) {
            return bad("altitude range must satisfy 0 < min <= max < 90 deg".into());
        }
        for (name, fov) in [("fov_h", self.fov_h), ("fov_v", self.fov_v)] {
            if !(fov > 0.0 && fov < std::f64::consts::PI) {
                return bad(format!("{name} outside (0, 180) deg"));
            }
        }
        if !(self.crop_fov_h > 0.0 && self.crop_fov_h <= self.fov_h && self.crop_fov_v > 0.0 && self.crop_fov_v <= self.fov_v) {
            return bad("crop field of view must be positive and fit in the frame".into());
        }
        if let Some(s) = self.sun {
            s.require_unit()?;
        }
        Ok(())
    }

    pub fn patches_per_sequence(&self) -> usize {
        self.frames * self.crops
    }

    pub fn floats_per_patch(&self) -> usize {
        self.patch_size * self.patch_size * render::CHANNELS
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchRecord {
    pub patch_id: u32,
    /// Index into the owning sequence's frames.
    pub frame_id: u32,
    pub phi_h: f64,
    pub phi_v: f64,
    pub outlier: bool,
    /// RGB, row-major, interleaved; `patch_size² × 3` values in [0, 1].
    pub pixels: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSample {
    pub scene_id: u64,
    pub patch_size: usize,
    pub frames: Vec<CameraFrame>,
    pub patches: Vec<PatchRecord>,
    pub gt_world: Direction3,
}

impl SequenceSample {
    pub fn validate(&self) -> Result<(), SynthError> {
        self.gt_world.require_unit()?;
        let floats = self.patch_size * self.patch_size * render::CHANNELS;
        for p in &self.patches {
            if p.frame_id as usize >= self.frames.len() {
                return Err(SynthError::Spec(format!(
                    "patch {} references missing frame {}",
                    p.patch_id, p.frame_id
                )));
            }
            if p.pixels.len() != floats {
                return Err(SynthError::Spec(format!(
                    "patch {} has {} values, expected {floats}",
                    p.patch_id,
                    p.pixels.len()
                )));
            }
        }
        if self.patches.is_empty() {
            return Err(SynthError::Spec("sequence has no patches".into()));
        }
        Ok(())
    }

    pub fn frame_of(&self, patch: &PatchRecord) -> &CameraFrame {
        &self.frames[patch.frame_id as usize]
    }

    /// `(φ_h, φ_v, yaw)` for every patch, yaw taken from the owning frame.
    pub fn positions(&self) -> Vec<(f64, f64, f64)> {
        self.patches
            .iter()
            .map(|p| (p.phi_h, p.phi_v, self.frame_of(p).encoded_yaw()))
            .collect()
    }

    /// `R_f` per patch.
    pub fn patch_rotations(&self) -> Vec<RotationMatrix> {
        self.patches.iter().map(|p| self.frame_of(p).rotation()).collect()
    }

    /// Camera-frame training targets `R_f · v_gt`.
    pub fn camera_targets(&self) -> Vec<Direction3> {
        self.patch_rotations()
            .iter()
            .map(|r| r.apply(self.gt_world))
            .collect()
    }

    pub fn outlier_fraction(&self) -> f64 {
        self.patches.iter().filter(|p| p.outlier).count() as f64 / self.patches.len() as f64
    }
}

/// Rotation from a frame's camera coordinates into a crop's coordinates.
pub fn crop_rotation(phi_h: f64, phi_v: f64) -> RotationMatrix {
    RotationMatrix::pitch(phi_v).mul(&RotationMatrix::yaw(phi_h))
}

/// Nudges an angle to a value that survives the radians → degrees → radians
/// trip used by the dataset files.
pub(crate) fn file_exact(rad: f64) -> f64 {
    let mut r = rad;
    for _ in 0..8 {
        let back = r.to_degrees().to_radians();
        if back == r {
            return r;
        }
        r = back;
    }
    r
}

/// SplitMix64 finalizer; derives independent per-sequence seeds from a master seed.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn sample_sequence(spec: &SceneSpec, scene_id: u64, seed: u64) -> Result<SequenceSample, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let gt_world = match spec.sun {
        Some(s) => s,
        None => {
            let az = rng.random_range(0.0..std::f64::consts::TAU);
            let alt = rng.random_range(spec.min_altitude..=spec.max_altitude);
            direction_from_spherical(az, alt)?
        }
    };

    let step = Normal::new(0.0, spec.yaw_step_std).map_err(|e| SynthError::Spec(e.to_string()))?;
    let mut yaw = rng.random_range(0.0..std::f64::consts::TAU);
    let mut frames = Vec::with_capacity(spec.frames);
    for f in 0..spec.frames {
        if f > 0 {
            yaw = wrap_angle(yaw + step.sample(&mut rng));
        }
        let pitch = if spec.max_pitch > 0.0 {
            rng.random_range(-spec.max_pitch..=spec.max_pitch)
        } else {
            0.0
        };
        let mut frame = CameraFrame::new(
            f as u32,
            file_exact(wrap_angle(yaw)),
            file_exact(pitch),
            file_exact(spec.fov_h),
            file_exact(spec.fov_v),
        )?;
        frame.timestamp = None;
        frames.push(frame);
    }

    let range_h = (spec.fov_h - spec.crop_fov_h) / 2.0;
    let range_v = (spec.fov_v - spec.crop_fov_v) / 2.0;
    let draw = |rng: &mut ChaCha8Rng, range: f64| {
        if range > 0.0 {
            file_exact(rng.random_range(-range..=range))
        } else {
            0.0
        }
    };

    let mut patches = Vec::with_capacity(spec.patches_per_sequence());
    for frame in &frames {
        let r_f = frame.rotation();
        let cam_sun = r_f.apply(gt_world);
        for _ in 0..spec.crops {
            let mut outlier = rng.random::<f64>() < spec.outlier_prob;
            let mut phi_h = draw(&mut rng, range_h);
            let mut phi_v = draw(&mut rng, range_v);
            let mut light = crop_rotation(phi_h, phi_v).apply(cam_sun);
            if !outlier {
                let mut tries = 0;
                while light.z <= 0.0 && tries < MAX_CROP_RETRIES {
                    phi_h = draw(&mut rng, range_h);
                    phi_v = draw(&mut rng, range_v);
                    light = crop_rotation(phi_h, phi_v).apply(cam_sun);
                    tries += 1;
                }
                if light.z <= 0.0 {
                    outlier = true;
                }
            }
            let pixels = render_patch(light, outlier, spec.noise_sigma, &mut rng, spec.patch_size);
            patches.push(PatchRecord {
                patch_id: patches.len() as u32,
                frame_id: frame.frame_id,
                phi_h,
                phi_v,
                outlier,
                pixels,
            });
        }
    }

    Ok(SequenceSample {
        scene_id,
        patch_size: spec.patch_size,
        frames,
        patches,
        gt_world,
    })
}

/// `count` sequences with seeds derived from `seed`; identical output for any
/// `workers >= 1`.
pub fn generate_sequences(
    spec: &SceneSpec,
    count: usize,
    seed: u64,
    workers: usize,
) -> Result<Vec<SequenceSample>, SynthError> {
    spec.validate()?;
    let workers = workers.max(1).min(count.max(1));
    let make = |i: usize| sample_sequence(spec, i as u64, derive_seed(seed, i as u64));
    if workers == 1 {
        return (0..count).map(make).collect();
    }
    let chunk = count.div_ceil(workers);
    let parts: Vec<Result<Vec<SequenceSample>, SynthError>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let make = &make;
                s.spawn(move || (w * chunk..((w + 1) * chunk).min(count)).map(make).collect())
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("generator worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(count);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}
