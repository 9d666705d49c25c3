//! Fusing per-patch camera-frame estimates into one world-frame direction.
//!
//! Two aggregators: the calibrated mean used by the transformer pipeline, and
//! the sigma-clipped spherical mean shift used by the independent-estimate
//! baseline.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CameraFrame, Direction3, GeometryError};
use crate::synth::SequenceSample;

/// Below this mean-vector length the estimates have no consensus direction.
pub const MIN_CONSENSUS: f64 = 1e-6;
pub const DEFAULT_BANDWIDTH: f64 = 0.2;
pub const DEFAULT_OUTLIER_SIGMA: f64 = 2.0;
pub const MIN_INLIERS: usize = 3;
const SHIFT_TOL: f64 = 1e-6;
const SHIFT_MAX_ITER: usize = 100;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum AggregateError {
    #[error("no estimates")]
    Empty,
    #[error("estimate for patch {patch_id} is not a finite nonzero vector")]
    BadEstimate { patch_id: u32 },
    #[error("estimates have no consensus direction (mean length {norm:.3e})")]
    NoConsensus { norm: f64 },
    #[error("bandwidth must be positive and finite, got {0}")]
    Bandwidth(f64),
    #[error("outlier sigma must be positive, got {0}")]
    OutlierSigma(f64),
    #[error("need at least {needed} estimates, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("estimate file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("estimate file: {0}")]
    Io(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub patch_id: u32,
    pub frame: CameraFrame,
    /// Raw network output; not necessarily unit length.
    pub raw: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateSet {
    estimates: Vec<Estimate>,
}

impl EstimateSet {
    pub fn new(estimates: Vec<Estimate>) -> Result<Self, AggregateError> {
        if estimates.is_empty() {
            return Err(AggregateError::Empty);
        }
        for e in &estimates {
            let v = Direction3::from_array(e.raw);
            if !v.is_finite() || v.norm() == 0.0 {
                return Err(AggregateError::BadEstimate { patch_id: e.patch_id });
            }
        }
        Ok(Self { estimates })
    }

    /// Pairs per-patch outputs with the frames of `sample`.
    pub fn from_sample(sample: &SequenceSample, raw: &[[f64; 3]]) -> Result<Self, AggregateError> {
        if raw.len() != sample.patches.len() {
            return Err(AggregateError::TooFew {
                needed: sample.patches.len(),
                got: raw.len(),
            });
        }
        Self::new(
            sample
                .patches
                .iter()
                .zip(raw)
                .map(|(p, &v)| Estimate {
                    patch_id: p.patch_id,
                    frame: sample.frame_of(p).clone(),
                    raw: v,
                })
                .collect(),
        )
    }

    pub fn estimates(&self) -> &[Estimate] {
        &self.estimates
    }

    pub fn len(&self) -> usize {
        self.estimates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.estimates.is_empty()
    }

    /// Unit world-frame directions `R_fᵀ · v̂`.
    pub fn calibrated(&self) -> Vec<Direction3> {
        self.estimates
            .iter()
            .map(|e| {
                let v = Direction3::from_array(e.raw);
                e.frame.rotation().transpose_apply(v * (1.0 / v.norm()))
            })
            .collect()
    }
}

/// Normalized arithmetic mean of unit vectors.
pub fn spherical_mean(points: &[Direction3]) -> Result<Direction3, AggregateError> {
    if points.is_empty() {
        return Err(AggregateError::Empty);
    }
    let sum = points.iter().fold(Direction3::default(), |acc, &p| acc + p);
    let mean = sum * (1.0 / points.len() as f64);
    let norm = mean.norm();
    if norm < MIN_CONSENSUS {
        return Err(AggregateError::NoConsensus { norm });
    }
    Ok(mean * (1.0 / norm))
}

/// Angle between two unit vectors, robust near 0 and π.
fn angle(a: Direction3, b: Direction3) -> f64 {
    a.cross(b).norm().atan2(a.dot(b))
}

/// Root-mean-square angle (radians) of `points` about `center`.
pub fn rms_angle(points: &[Direction3], center: Direction3) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    (points.iter().map(|&p| angle(p, center).powi(2)).sum::<f64>() / points.len() as f64).sqrt()
}

pub fn calibrate_and_average(est: &EstimateSet) -> Result<Direction3, AggregateError> {
    spherical_mean(&est.calibrated())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanShiftParams {
    /// Kernel width in radians.
    pub bandwidth: f64,
    /// Clip factor applied to the angular standard deviation.
    pub outlier_sigma: f64,
}

impl Default for MeanShiftParams {
    fn default() -> Self {
        Self {
            bandwidth: DEFAULT_BANDWIDTH,
            outlier_sigma: DEFAULT_OUTLIER_SIGMA,
        }
    }
}

impl MeanShiftParams {
    pub fn validate(&self) -> Result<(), AggregateError> {
        if !(self.bandwidth > 0.0) || self.bandwidth.is_nan() {
            return Err(AggregateError::Bandwidth(self.bandwidth));
        }
        if !(self.outlier_sigma > 0.0) {
            return Err(AggregateError::OutlierSigma(self.outlier_sigma));
        }
        Ok(())
    }
}

/// Iterative sigma clipping about the spherical mean. Stops at a fixpoint or
/// when a pass would leave fewer than [`MIN_INLIERS`] points.
pub fn sigma_clip(points: &[Direction3], sigma: f64) -> Result<Vec<Direction3>, AggregateError> {
    let mut inliers = points.to_vec();
    if inliers.len() <= MIN_INLIERS {
        return Ok(inliers);
    }
    loop {
        let mean = spherical_mean(&inliers)?;
        let limit = sigma * rms_angle(&inliers, mean);
        let kept: Vec<Direction3> = inliers.iter().copied().filter(|&p| angle(p, mean) <= limit).collect();
        if kept.len() == inliers.len() || kept.len() < MIN_INLIERS {
            return Ok(inliers);
        }
        inliers = kept;
    }
}

/// Kernel density `Σ exp(−θ²/(2h²))` at `x`.
pub fn kernel_density(x: Direction3, points: &[Direction3], bandwidth: f64) -> f64 {
    let s = 2.0 * bandwidth * bandwidth;
    points.iter().map(|&p| (-angle(x, p).powi(2) / s).exp()).sum()
}

/// Mean shift on the sphere from `start`. Each point is weighted by the
/// kernel times `θ/sin θ`, the factor that makes the step follow the density
/// gradient for a kernel of geodesic distance.
fn shift_to_mode(start: Direction3, points: &[Direction3], bandwidth: f64) -> Direction3 {
    let s = 2.0 * bandwidth * bandwidth;
    let mut x = start;
    for _ in 0..SHIFT_MAX_ITER {
        let mut acc = Direction3::default();
        for &p in points {
            let theta = angle(x, p);
            let k = (-theta * theta / s).exp();
            let ratio = if theta < 1e-8 { 1.0 } else { theta / theta.sin().max(1e-12) };
            acc = acc + p * (k * ratio);
        }
        let norm = acc.norm();
        if !(norm > 0.0) || !norm.is_finite() {
            return x;
        }
        let next = acc * (1.0 / norm);
        let step = angle(x, next);
        x = next;
        if step < SHIFT_TOL {
            break;
        }
    }
    x
}

/// Sigma clipping, then mean shift from every inlier; the densest mode wins
/// (first one on ties).
pub fn meanshift_points(points: &[Direction3], params: &MeanShiftParams) -> Result<Direction3, AggregateError> {
    params.validate()?;
    let inliers = sigma_clip(points, params.outlier_sigma)?;
    if inliers.is_empty() {
        return Err(AggregateError::Empty);
    }
    let mut best: Option<(f64, Direction3)> = None;
    for &start in &inliers {
        let mode = shift_to_mode(start, &inliers, params.bandwidth);
        let d = kernel_density(mode, &inliers, params.bandwidth);
        if best.is_none_or(|(bd, _)| d > bd) {
            best = Some((d, mode));
        }
    }
    Ok(best.expect("at least one inlier").1)
}

pub fn meanshift_aggregate(est: &EstimateSet, params: &MeanShiftParams) -> Result<Direction3, AggregateError> {
    meanshift_points(&est.calibrated(), params)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregator {
    #[default]
    Mean,
    Meanshift,
}

impl Aggregator {
    pub fn apply(&self, est: &EstimateSet, params: &MeanShiftParams) -> Result<Direction3, AggregateError> {
        match self {
            Aggregator::Mean => calibrate_and_average(est),
            Aggregator::Meanshift => meanshift_aggregate(est, params),
        }
    }
}

/// One line of an estimate file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateLine {
    #[serde(default)]
    pub sequence_id: u64,
    pub patch_id: u32,
    pub frame_id: u32,
    pub v: [f64; 3],
    pub yaw_deg: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pitch_deg: Option<f64>,
}

/// Estimate lines for one sequence.
pub fn estimate_lines(sequence_id: u64, est: &EstimateSet) -> Vec<EstimateLine> {
    est.estimates()
        .iter()
        .map(|e| EstimateLine {
            sequence_id,
            patch_id: e.patch_id,
            frame_id: e.frame.frame_id,
            v: e.raw,
            yaw_deg: e.frame.yaw().to_degrees(),
            pitch_deg: (e.frame.pitch != 0.0).then(|| e.frame.pitch.to_degrees()),
        })
        .collect()
}

pub fn write_estimates<W: Write>(mut out: W, lines: &[EstimateLine]) -> Result<(), AggregateError> {
    for l in lines {
        let s = serde_json::to_string(l).map_err(|e| AggregateError::Io(e.to_string()))?;
        writeln!(out, "{s}").map_err(|e| AggregateError::Io(e.to_string()))?;
    }
    Ok(())
}

/// Reads an estimate file and groups it by sequence id, in ascending order.
/// Frames carry no field of view, so they are set to a nominal 1 radian.
pub fn read_estimates<R: BufRead>(input: R) -> Result<Vec<(u64, EstimateSet)>, AggregateError> {
    let mut groups: std::collections::BTreeMap<u64, Vec<Estimate>> = Default::default();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| AggregateError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let l: EstimateLine = serde_json::from_str(&line).map_err(|e| AggregateError::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        let frame = CameraFrame::new(
            l.frame_id,
            l.yaw_deg.to_radians(),
            l.pitch_deg.unwrap_or(0.0).to_radians(),
            1.0,
            1.0,
        )
        .map_err(|e| AggregateError::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        groups.entry(l.sequence_id).or_default().push(Estimate {
            patch_id: l.patch_id,
            frame,
            raw: l.v,
        });
    }
    if groups.is_empty() {
        return Err(AggregateError::Empty);
    }
    groups
        .into_iter()
        .map(|(id, est)| Ok((id, EstimateSet::new(est)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{direction_from_spherical, random_rotation, random_unit, RotationMatrix};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn frame(id: u32, yaw: f64, pitch: f64) -> CameraFrame {
        CameraFrame::new(id, yaw, pitch, 1.0, 0.5).unwrap()
    }

    fn with_rotation(id: u32, r: RotationMatrix) -> CameraFrame {
        let mut f = frame(id, 0.0, 0.0);
        f.rotation = Some(r);
        f
    }

    fn near(a: Direction3, b: Direction3, tol: f64) -> bool {
        (a - b).norm() < tol
    }

    #[test]
    fn single_estimate_identity_pose() {
        let est = EstimateSet::new(vec![Estimate {
            patch_id: 0,
            frame: frame(0, 0.0, 0.0),
            raw: [3.0, 0.0, 4.0],
        }])
        .unwrap();
        assert!(near(calibrate_and_average(&est).unwrap(), Direction3::new(0.6, 0.0, 0.8), 1e-15));
    }

    #[test]
    fn symmetric_pair_about_zenith() {
        let est = EstimateSet::new(vec![
            Estimate { patch_id: 0, frame: frame(0, 0.0, 0.0), raw: [0.3, 0.1, 1.0] },
            Estimate { patch_id: 1, frame: frame(0, 0.0, 0.0), raw: [-0.3, -0.1, 1.0] },
        ])
        .unwrap();
        assert!(near(calibrate_and_average(&est).unwrap(), Direction3::ZENITH, 1e-15));
    }

    #[test]
    fn consistent_camera_estimates_recover_world_direction() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let v = random_unit(&mut rng);
            let est: Vec<_> = (0..32)
                .map(|i| {
                    let f = frame(i / 4, rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(-0.2..0.2));
                    let raw = (f.rotation().apply(v) * rng.random_range(0.5..2.0)).to_array();
                    Estimate { patch_id: i, frame: f, raw }
                })
                .collect();
            let out = calibrate_and_average(&EstimateSet::new(est).unwrap()).unwrap();
            assert!(near(out, v, 1e-9));
            assert!((out.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dispersed_estimates_have_no_consensus() {
        let est = EstimateSet::new(vec![
            Estimate { patch_id: 0, frame: frame(0, 0.0, 0.0), raw: [1.0, 0.0, 0.0] },
            Estimate { patch_id: 1, frame: frame(0, 0.0, 0.0), raw: [-1.0, 0.0, 0.0] },
        ])
        .unwrap();
        assert!(matches!(calibrate_and_average(&est), Err(AggregateError::NoConsensus { .. })));
        assert!(matches!(EstimateSet::new(vec![]), Err(AggregateError::Empty)));
        assert!(EstimateSet::new(vec![Estimate { patch_id: 3, frame: frame(0, 0.0, 0.0), raw: [f64::NAN, 0.0, 1.0] }]).is_err());
    }

    #[test]
    fn meanshift_identical_points() {
        let p = direction_from_spherical(1.0, 0.4).unwrap();
        let out = meanshift_points(&[p; 6], &MeanShiftParams::default()).unwrap();
        assert!(near(out, p, 1e-12));
    }

    fn cluster(rng: &mut ChaCha8Rng, center: Direction3, n: usize, spread: f64) -> Vec<Direction3> {
        (0..n)
            .map(|_| {
                let jitter = Direction3::new(
                    rng.random_range(-spread..spread),
                    rng.random_range(-spread..spread),
                    rng.random_range(-spread..spread),
                );
                (center + jitter).normalized().unwrap()
            })
            .collect()
    }

    /// Argmax of the kernel density over a 1° azimuth/altitude grid.
    fn grid_argmax(points: &[Direction3], h: f64) -> Direction3 {
        let mut best = (f64::NEG_INFINITY, Direction3::ZENITH);
        for alt in -90..=90 {
            for az in 0..360 {
                let x = direction_from_spherical((az as f64).to_radians(), (alt as f64).to_radians()).unwrap();
                let d = kernel_density(x, points, h);
                if d > best.0 {
                    best = (d, x);
                }
            }
        }
        best.1
    }

    #[test]
    fn tight_cluster_plus_outlier_matches_grid_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut pts = cluster(&mut rng, Direction3::ZENITH, 9, 0.05);
        pts.push(Direction3::new(1.0, 0.0, 0.0));
        let params = MeanShiftParams { bandwidth: 0.2, outlier_sigma: 2.0 };
        let inliers = sigma_clip(&pts, 2.0).unwrap();
        assert_eq!(inliers.len(), 9);
        let mode = meanshift_points(&pts, &params).unwrap();
        let oracle = grid_argmax(&inliers, 0.2);
        assert!(angle(mode, oracle).to_degrees() < 2.0);
        let cluster_mean = spherical_mean(&pts[..9]).unwrap();
        assert!(angle(mode, cluster_mean).to_degrees() < 2.0);
    }

    #[test]
    fn huge_bandwidth_gives_the_spherical_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = random_unit(&mut rng);
        let pts = cluster(&mut rng, c, 12, 0.3);
        let params = MeanShiftParams { bandwidth: 1e6, outlier_sigma: 100.0 };
        let mode = meanshift_points(&pts, &params).unwrap();
        assert!(near(mode, spherical_mean(&pts).unwrap(), 1e-3));
    }

    #[test]
    fn returned_mode_dominates_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let (a, b) = (random_unit(&mut rng), random_unit(&mut rng));
            let mut pts = cluster(&mut rng, a, 10, 0.15);
            pts.extend(cluster(&mut rng, b, 6, 0.15));
            let params = MeanShiftParams { bandwidth: 0.2, outlier_sigma: 100.0 };
            let mode = meanshift_points(&pts, &params).unwrap();
            let dm = kernel_density(mode, &pts, 0.2);
            for &p in &pts {
                assert!(dm >= kernel_density(p, &pts, 0.2) - 1e-9);
            }
        }
    }

    #[test]
    fn clipping_keeps_at_least_three() {
        let pts = vec![
            Direction3::ZENITH,
            Direction3::new(1.0, 0.0, 0.0),
            Direction3::new(0.0, 1.0, 0.0),
            Direction3::new(0.0, -1.0, 0.0),
        ];
        assert!(sigma_clip(&pts, 0.1).unwrap().len() >= 3);
        assert_eq!(sigma_clip(&pts[..2], 0.1).unwrap().len(), 2);
    }

    #[test]
    fn bad_params_rejected() {
        let pts = [Direction3::ZENITH];
        for p in [
            MeanShiftParams { bandwidth: 0.0, outlier_sigma: 2.0 },
            MeanShiftParams { bandwidth: f64::NAN, outlier_sigma: 2.0 },
            MeanShiftParams { bandwidth: 0.2, outlier_sigma: -1.0 },
        ] {
            assert!(meanshift_points(&pts, &p).is_err());
        }
    }

    #[test]
    fn global_rotation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let rg = random_rotation(&mut rng);
            let n = 10;
            let poses: Vec<_> = (0..n).map(|_| random_rotation(&mut rng)).collect();
            let center = random_unit(&mut rng);
            let raws: Vec<_> = cluster(&mut rng, center, n, 0.2)
                .into_iter()
                .zip(&poses)
                .map(|(v, r)| (r.apply(v) * 1.7).to_array())
                .collect();
            let build = |rot: &dyn Fn(&RotationMatrix) -> RotationMatrix| {
                EstimateSet::new(
                    poses
                        .iter()
                        .zip(&raws)
                        .enumerate()
                        .map(|(i, (r, &raw))| Estimate { patch_id: i as u32, frame: with_rotation(0, rot(r)), raw })
                        .collect(),
                )
                .unwrap()
            };
            let base = build(&|r| *r);
            let moved = build(&|r| r.mul(&rg));
            let params = MeanShiftParams::default();
            let a = calibrate_and_average(&base).unwrap();
            let b = calibrate_and_average(&moved).unwrap();
            assert!(near(rg.transpose_apply(a), b, 1e-9));
            let a = meanshift_aggregate(&base, &params).unwrap();
            let b = meanshift_aggregate(&moved, &params).unwrap();
            assert!(near(rg.transpose_apply(a), b, 1e-9));
        }
    }

    #[test]
    fn estimate_file_round_trip() {
        let est = EstimateSet::new(vec![
            Estimate { patch_id: 0, frame: frame(0, 0.5, 0.0), raw: [0.1, 0.2, 0.9] },
            Estimate { patch_id: 1, frame: frame(1, -2.0, 0.1), raw: [0.3, -0.2, 0.7] },
        ])
        .unwrap();
        let mut buf = Vec::new();
        let mut lines = estimate_lines(4, &est);
        lines.extend(estimate_lines(2, &est));
        write_estimates(&mut buf, &lines).unwrap();
        let back = read_estimates(&buf[..]).unwrap();
        assert_eq!(back.iter().map(|(id, _)| *id).collect::<Vec<_>>(), [2, 4]);
        let a = calibrate_and_average(&est).unwrap();
        let b = calibrate_and_average(&back[1].1).unwrap();
        assert!(near(a, b, 1e-12));

        let err = read_estimates(&b"{\"patch_id\": 1}\n"[..]).unwrap_err();
        assert!(matches!(err, AggregateError::Parse { line: 1, .. }));
    }
}
