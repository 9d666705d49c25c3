//! Angular-error reports, cumulative curves and per-sequence dispersion.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregate::{rms_angle, spherical_mean, AggregateError, Aggregator, EstimateSet, MeanShiftParams};
use crate::encoding::EncodingConfig;
use crate::geometry::{angular_error, Direction3, GeometryError};
use crate::model::{Model, ModelError};
use crate::synth::{derive_seed, SequenceSample};
use crate::tensor::Real;
use crate::train::{Checkpoint, CheckpointError};

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no sequences to evaluate")]
    Empty,
    #[error("sequence {scene_id}: {source}")]
    Model { scene_id: u64, source: ModelError },
    #[error("sequence {scene_id}: {source}")]
    Aggregate { scene_id: u64, source: AggregateError },
    #[error("need at least 2 estimates for dispersion, got {0}")]
    TooFew(usize),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
    #[error("{0} exists (use --force to overwrite)")]
    Exists(String),
}

/// Anything that turns a sequence into per-patch camera-frame vectors.
pub trait Estimator: Sync {
    fn estimate(&self, sample: &SequenceSample) -> Result<Vec<[f64; 3]>, ModelError>;
}

impl<T: Real> Estimator for Model<T> {
    fn estimate(&self, sample: &SequenceSample) -> Result<Vec<[f64; 3]>, ModelError> {
        self.predict(sample)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub aggregator: Aggregator,
    pub meanshift: MeanShiftParams,
    /// Standard deviation of the random pose rotation applied before
    /// inference, radians. Zero evaluates the recorded poses.
    pub pose_noise: f64,
    pub seed: u64,
    pub workers: usize,
    pub thresholds_deg: Vec<f64>,
    pub method: String,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            aggregator: Aggregator::Mean,
            meanshift: MeanShiftParams::default(),
            pose_noise: 0.0,
            seed: 0,
            workers: 1,
            thresholds_deg: default_thresholds(),
            method: "transformer".into(),
        }
    }
}

/// 0° to 60° in 1° steps.
pub fn default_thresholds() -> Vec<f64> {
    (0..=60).map(f64::from).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceResult {
    pub sequence_id: u64,
    pub error_deg: f64,
    /// RMS angle of the calibrated per-patch estimates about their mean.
    pub dispersion_deg: f64,
    /// Error of each calibrated per-patch estimate, in patch order.
    pub patch_errors_deg: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdfPoint {
    pub threshold_deg: f64,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub version: u32,
    pub method: String,
    pub aggregator: Aggregator,
    pub pose_noise_deg: f64,
    pub count: usize,
    pub mean_deg: f64,
    pub median_deg: f64,
    pub max_deg: f64,
    pub patch_median_deg: f64,
    pub cdf: Vec<CdfPoint>,
    pub sequences: Vec<SequenceResult>,
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Fraction of `errors` at or below each threshold.
pub fn cumulative_curve(errors: &[f64], thresholds: &[f64]) -> Vec<f64> {
    if errors.is_empty() {
        return vec![0.0; thresholds.len()];
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    thresholds
        .iter()
        .map(|&t| sorted.partition_point(|&e| e <= t) as f64 / sorted.len() as f64)
        .collect()
}

/// RMS angle (degrees) of unit vectors about their spherical mean.
pub fn dispersion(points: &[Direction3]) -> Result<f64, EvalError> {
    if points.len() < 2 {
        return Err(EvalError::TooFew(points.len()));
    }
    let mean = spherical_mean(points).map_err(|source| EvalError::Aggregate { scene_id: 0, source })?;
    Ok(rms_angle(points, mean).to_degrees())
}

/// The sample with every frame pose rotated by random noise of the given
/// standard deviation, drawn from `seed`.
pub fn perturb_poses(sample: &SequenceSample, std: f64, seed: u64) -> Result<SequenceSample, GeometryError> {
    let mut out = sample.clone();
    if std == 0.0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, sample.scene_id));
    for f in &mut out.frames {
        f.rotation = Some(f.rotation().perturb(std, &mut rng)?);
    }
    Ok(out)
}

fn evaluate_one<E: Estimator + ?Sized>(
    est: &E,
    sample: &SequenceSample,
    opts: &EvalOptions,
) -> Result<SequenceResult, EvalError> {
    let scene_id = sample.scene_id;
    let seen = perturb_poses(sample, opts.pose_noise, opts.seed)?;
    let raw = est
        .estimate(&seen)
        .map_err(|source| EvalError::Model { scene_id, source })?;
    let set = EstimateSet::from_sample(&seen, &raw).map_err(|source| EvalError::Aggregate { scene_id, source })?;
    let v = opts
        .aggregator
        .apply(&set, &opts.meanshift)
        .map_err(|source| EvalError::Aggregate { scene_id, source })?;
    let calibrated = set.calibrated();
    let patch_errors_deg = calibrated
        .iter()
        .map(|&c| angular_error(c, sample.gt_world).map(f64::to_degrees))
        .collect::<Result<Vec<_>, _>>()?;
    let dispersion_deg = if calibrated.len() >= 2 {
        match spherical_mean(&calibrated) {
            Ok(mean) => rms_angle(&calibrated, mean).to_degrees(),
            // no consensus: the estimates are spread over the whole sphere
            Err(_) => rms_angle(&calibrated, v).to_degrees(),
        }
    } else {
        0.0
    };
    Ok(SequenceResult {
        sequence_id: scene_id,
        error_deg: angular_error(v, sample.gt_world)?.to_degrees(),
        dispersion_deg,
        patch_errors_deg,
    })
}

/// Runs `est` over every sample and assembles a report. Results are sorted by
/// sequence id and do not depend on the worker count.
pub fn evaluate<E: Estimator + ?Sized>(
    est: &E,
    samples: &[SequenceSample],
    opts: &EvalOptions,
) -> Result<EvalReport, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::Empty);
    }
    let workers = opts.workers.clamp(1, samples.len());
    let mut results = if workers == 1 {
        samples
            .iter()
            .map(|s| evaluate_one(est, s, opts))
            .collect::<Result<Vec<_>, _>>()?
    } else {
        let chunk = samples.len().div_ceil(workers);
        std::thread::scope(|scope| {
            let handles: Vec<_> = samples
                .chunks(chunk)
                .map(|part| scope.spawn(move || part.iter().map(|s| evaluate_one(est, s, opts)).collect::<Result<Vec<_>, _>>()))
                .collect();
            let mut all = Vec::with_capacity(samples.len());
            for h in handles {
                all.extend(h.join().expect("evaluation worker panicked")?);
            }
            Ok::<_, EvalError>(all)
        })?
    };
    results.sort_by_key(|r| r.sequence_id);
    Ok(build_report(results, opts))
}

fn build_report(sequences: Vec<SequenceResult>, opts: &EvalOptions) -> EvalReport {
    let errors: Vec<f64> = sequences.iter().map(|r| r.error_deg).collect();
    let mut patch: Vec<f64> = sequences.iter().flat_map(|r| r.patch_errors_deg.iter().copied()).collect();
    let fractions = cumulative_curve(&errors, &opts.thresholds_deg);
    let mut sorted = errors.clone();
    EvalReport {
        version: REPORT_VERSION,
        method: opts.method.clone(),
        aggregator: opts.aggregator,
        pose_noise_deg: opts.pose_noise.to_degrees(),
        count: errors.len(),
        mean_deg: errors.iter().sum::<f64>() / errors.len() as f64,
        median_deg: median(&mut sorted),
        max_deg: errors.iter().copied().fold(0.0, f64::max),
        patch_median_deg: median(&mut patch),
        cdf: opts
            .thresholds_deg
            .iter()
            .zip(fractions)
            .map(|(&threshold_deg, fraction)| CdfPoint { threshold_deg, fraction })
            .collect(),
        sequences,
    }
}

/// Checks the checkpoint against the dataset (and an expected encoding, if
/// given) before evaluating it.
pub fn evaluate_checkpoint(
    ckpt: &Checkpoint,
    samples: &[SequenceSample],
    expected_encoding: Option<&EncodingConfig>,
    opts: &EvalOptions,
) -> Result<EvalReport, EvalError> {
    if let Some(enc) = expected_encoding {
        ckpt.check_encoding(enc)?;
    }
    if let Some(s) = samples.first() {
        ckpt.check_patch_size(s.patch_size)?;
    }
    evaluate(&ckpt.model, samples, opts)
}

impl EvalReport {
    pub fn csv(&self) -> String {
        let mut out = String::from("sequence_id,error_deg,dispersion_deg\n");
        for r in &self.sequences {
            out.push_str(&format!("{},{},{}\n", r.sequence_id, r.error_deg, r.dispersion_deg));
        }
        out
    }

    pub fn cdf_csv(&self) -> String {
        let mut out = String::from("threshold_deg,fraction\n");
        for p in &self.cdf {
            out.push_str(&format!("{},{}\n", p.threshold_deg, p.fraction));
        }
        out
    }

    /// Writes `report.csv`, `report.json` and `cdf.csv` into `dir`.
    pub fn write(&self, dir: &Path, force: bool) -> Result<(), EvalError> {
        let io = |p: &Path, e: &dyn std::fmt::Display| EvalError::Io {
            path: p.display().to_string(),
            msg: e.to_string(),
        };
        fs::create_dir_all(dir).map_err(|e| io(dir, &e))?;
        let json = serde_json::to_string_pretty(self).map_err(|e| io(dir, &e))? + "\n";
        let files = [
            ("report.csv", self.csv()),
            ("report.json", json),
            ("cdf.csv", self.cdf_csv()),
        ];
        if !force {
            if let Some((name, _)) = files.iter().find(|(n, _)| dir.join(n).exists()) {
                return Err(EvalError::Exists(dir.join(name).display().to_string()));
            }
        }
        for (name, body) in files {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| io(&p, &e))?;
        }
        Ok(())
    }
}
