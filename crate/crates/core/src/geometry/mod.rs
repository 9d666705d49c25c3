//! Frames, rotations, angular image coordinates and angular error.
//!
//! Conventions: world and camera frames are right-handed with z up. A camera
//! frame differs from the world frame by a yaw rotation about z
//! (counterclockwise viewed from +z), optionally preceded by a pitch about the
//! camera y axis. Camera-frame vectors are `R_f · v_world`; calibration maps
//! them back with `R_fᵀ`.

mod rotation;
pub mod solar;

use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use rotation::{random_rotation, random_unit, RotationMatrix};
pub use solar::{sun_from_gps_time, SolarPosition};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum GeometryError {
    #[error("altitude {0} rad outside [-pi/2, pi/2]")]
    Altitude(f64),
    #[error("not a unit vector: norm {0}")]
    NotUnit(f64),
    #[error("degenerate direction (norm {0})")]
    Degenerate(f64),
    #[error("not a rotation matrix: {0}")]
    NotRotation(String),
    #[error("pixel ({px}, {py}) outside {width}x{height} image")]
    PixelOutOfBounds {
        px: f64,
        py: f64,
        width: usize,
        height: usize,
    },
    #[error("{0}")]
    Range(String),
}

pub const UNIT_TOLERANCE: f64 = 1e-9;

/// A 3-vector; `z` is the altitude component.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Direction3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Direction3 {
    pub const ZENITH: Direction3 = Direction3 {
        x: 0.0,
        y: 0.0,
        z: 1.0,
    };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn from_array(v: [f64; 3]) -> Self {
        Self::new(v[0], v[1], v[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    /// Normalizes `(x, y, z)`; rejects vectors of norm `<= 1e-12` or non-finite.
    pub fn unit(x: f64, y: f64, z: f64) -> Result<Self, GeometryError> {
        Self::new(x, y, z).normalized()
    }

    pub fn normalized(self) -> Result<Self, GeometryError> {
        let n = self.norm();
        if !n.is_finite() || n <= 1e-12 {
            return Err(GeometryError::Degenerate(n));
        }
        Ok(self * (1.0 / n))
    }

    pub fn dot(self, o: Self) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Self) -> Self {
        Self::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn is_unit(self) -> bool {
        self.is_finite() && (self.norm() - 1.0).abs() <= UNIT_TOLERANCE
    }

    pub fn require_unit(self) -> Result<Self, GeometryError> {
        if self.is_unit() {
            Ok(self)
        } else {
            Err(GeometryError::NotUnit(self.norm()))
        }
    }

    /// Azimuth in [0, 2π), counterclockwise from +x.
    pub fn azimuth(self) -> f64 {
        wrap_angle(self.y.atan2(self.x))
    }

    /// Elevation above the xy plane in [-π/2, π/2].
    pub fn altitude(self) -> f64 {
        let n = self.norm();
        (self.z / n).clamp(-1.0, 1.0).asin()
    }
}

impl Add for Direction3 {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Direction3 {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Direction3 {
    type Output = Self;
    fn mul(self, s: f64) -> Self {
        Self::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Neg for Direction3 {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.x, -self.y, -self.z)
    }
}

/// Wraps an angle into [0, 2π).
pub fn wrap_angle(a: f64) -> f64 {
    let w = a.rem_euclid(TAU);
    // rem_euclid can round up to exactly TAU for tiny negative inputs
    if w >= TAU {
        0.0
    } else {
        w
    }
}

/// Unit vector for an azimuth (counterclockwise from +x) and altitude.
pub fn direction_from_spherical(azimuth: f64, altitude: f64) -> Result<Direction3, GeometryError> {
    if !(-FRAC_PI_2..=FRAC_PI_2).contains(&altitude) || !azimuth.is_finite() {
        return Err(GeometryError::Altitude(altitude));
    }
    let (sa, ca) = azimuth.sin_cos();
    let (sh, ch) = altitude.sin_cos();
    Ok(Direction3::new(ca * ch, sa * ch, sh))
}

/// Rotates a camera-frame direction into the world frame: `R_fᵀ · v_cam`.
pub fn calibrate(v_cam: Direction3, r_f: &RotationMatrix) -> Direction3 {
    r_f.transpose_apply(v_cam)
}

/// Maps a pixel position to viewing angles `(φ_h, φ_v)` in radians.
///
/// The top-left pixel center maps to `(-fov_h/2, +fov_v/2)` and the
/// bottom-right one to `(+fov_h/2, -fov_v/2)`.
pub fn pixel_to_angular(
    px: f64,
    py: f64,
    width: usize,
    height: usize,
    fov_h: f64,
    fov_v: f64,
) -> Result<(f64, f64), GeometryError> {
    if width == 0
        || height == 0
        || !(0.0..width as f64).contains(&px)
        || !(0.0..height as f64).contains(&py)
        || px > (width - 1) as f64
        || py > (height - 1) as f64
    {
        return Err(GeometryError::PixelOutOfBounds {
            px,
            py,
            width,
            height,
        });
    }
    let along = |p: f64, n: usize| if n > 1 { p / (n - 1) as f64 } else { 0.5 };
    let phi_h = (along(px, width) - 0.5) * fov_h;
    let phi_v = (0.5 - along(py, height)) * fov_v;
    Ok((phi_h, phi_v))
}

/// Angle between two unit vectors in [0, π].
pub fn angular_error(a: Direction3, b: Direction3) -> Result<f64, GeometryError> {
    a.require_unit()?;
    b.require_unit()?;
    Ok(a.dot(b).clamp(-1.0, 1.0).acos())
}

/// Like [`angular_error`] but normalizes both arguments first.
pub fn angle_between(a: Direction3, b: Direction3) -> Result<f64, GeometryError> {
    angular_error(a.normalized()?, b.normalized()?)
}

/// `R` composed with a random-axis rotation of angle `|N(0, angle_std)|`.
pub fn perturb_rotation<R: rand::Rng + ?Sized>(
    r: &RotationMatrix,
    angle_std: f64,
    rng: &mut R,
) -> Result<RotationMatrix, GeometryError> {
    r.perturb(angle_std, rng)
}

/// Per-frame camera pose plus field of view.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraFrame {
    pub frame_id: u32,
    yaw: f64,
    pub pitch: f64,
    /// Full rotation overriding yaw/pitch (e.g. a noise-perturbed pose).
    pub rotation: Option<RotationMatrix>,
    pub timestamp: Option<i64>,
    pub fov_h: f64,
    pub fov_v: f64,
}

impl CameraFrame {
    pub fn new(frame_id: u32, yaw: f64, pitch: f64, fov_h: f64, fov_v: f64) -> Result<Self, GeometryError> {
        for (name, fov) in [("fov_h", fov_h), ("fov_v", fov_v)] {
            if !(fov > 0.0 && fov < PI) {
                return Err(GeometryError::Range(format!("{name} {fov} outside (0, pi)")));
            }
        }
        if !yaw.is_finite() || !pitch.is_finite() {
            return Err(GeometryError::Range("non-finite pose angle".into()));
        }
        Ok(Self {
            frame_id,
            yaw: wrap_angle(yaw),
            pitch,
            rotation: None,
            timestamp: None,
            fov_h,
            fov_v,
        })
    }

    pub fn yaw(&self) -> f64 {
        self.yaw
    }

    /// `R_f`, mapping world vectors into this camera's frame.
    pub fn rotation(&self) -> RotationMatrix {
        self.rotation
            .unwrap_or_else(|| RotationMatrix::pitch(self.pitch).mul(&RotationMatrix::yaw(self.yaw)))
    }

    /// Yaw used for positional encoding; follows the rotation override when set.
    pub fn encoded_yaw(&self) -> f64 {
        match &self.rotation {
            Some(r) => r.yaw_angle(),
            None => self.yaw,
        }
    }
}
