use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{wrap_angle, Direction3, GeometryError};

const ROTATION_TOLERANCE: f64 = 1e-9;

/// Proper orthonormal 3×3 matrix, row-major.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotationMatrix([[f64; 3]; 3]);

impl RotationMatrix {
    /// Validates `RᵀR = I` and `det R = +1` to 1e-9.
    pub fn new(m: [[f64; 3]; 3]) -> Result<Self, GeometryError> {
        let r = Self(m);
        let mut worst: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| m[k][i] * m[k][j]).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        if !worst.is_finite() || worst > ROTATION_TOLERANCE {
            return Err(GeometryError::NotRotation(format!(
                "orthonormality defect {worst:e}"
            )));
        }
        let det = r.determinant();
        if (det - 1.0).abs() > ROTATION_TOLERANCE {
            return Err(GeometryError::NotRotation(format!("determinant {det}")));
        }
        Ok(r)
    }

    pub const fn identity() -> Self {
        Self([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    }

    /// `[[cos θ, −sin θ, 0], [sin θ, cos θ, 0], [0, 0, 1]]`.
    pub fn yaw(theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        Self([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    }

    /// Camera tilted up by `p`: a world direction at elevation `p` straight
    /// ahead maps to the camera's +x axis.
    pub fn pitch(p: f64) -> Self {
        let (s, c) = p.sin_cos();
        Self([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    }

    /// Rodrigues rotation about a (normalized) axis.
    pub fn axis_angle(axis: Direction3, angle: f64) -> Result<Self, GeometryError> {
        let k = axis.normalized()?;
        let (s, c) = angle.sin_cos();
        let t = 1.0 - c;
        let (x, y, z) = (k.x, k.y, k.z);
        Ok(Self([
            [c + x * x * t, x * y * t - z * s, x * z * t + y * s],
            [y * x * t + z * s, c + y * y * t, y * z * t - x * s],
            [z * x * t - y * s, z * y * t + x * s, c + z * z * t],
        ]))
    }

    pub fn rows(&self) -> [[f64; 3]; 3] {
        self.0
    }

    pub fn mul(&self, o: &Self) -> Self {
        let mut m = [[0.0; 3]; 3];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| self.0[i][k] * o.0[k][j]).sum();
            }
        }
        Self(m)
    }

    pub fn transpose(&self) -> Self {
        let m = self.0;
        Self([
            [m[0][0], m[1][0], m[2][0]],
            [m[0][1], m[1][1], m[2][1]],
            [m[0][2], m[1][2], m[2][2]],
        ])
    }

    pub fn apply(&self, v: Direction3) -> Direction3 {
        let m = &self.0;
        Direction3::new(
            m[0][0] * v.x + m[0][1] * v.y + m[0][2] * v.z,
            m[1][0] * v.x + m[1][1] * v.y + m[1][2] * v.z,
            m[2][0] * v.x + m[2][1] * v.y + m[2][2] * v.z,
        )
    }

    pub fn transpose_apply(&self, v: Direction3) -> Direction3 {
        let m = &self.0;
        Direction3::new(
            m[0][0] * v.x + m[1][0] * v.y + m[2][0] * v.z,
            m[0][1] * v.x + m[1][1] * v.y + m[2][1] * v.z,
            m[0][2] * v.x + m[1][2] * v.y + m[2][2] * v.z,
        )
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Rotation angle of `Rᵀ·other`, in [0, π].
    pub fn angle_to(&self, other: &Self) -> f64 {
        let d = self.transpose().mul(other);
        let trace = d.0[0][0] + d.0[1][1] + d.0[2][2];
        ((trace - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }

    /// Yaw component, exact for `pitch(p)·yaw(θ)` with |p| < π/2.
    pub fn yaw_angle(&self) -> f64 {
        wrap_angle((-self.0[0][1]).atan2(self.0[0][0]))
    }

    pub fn is_valid(&self) -> bool {
        Self::new(self.0).is_ok()
    }

    /// Composes `R` with a rotation about a uniformly random axis whose angle
    /// is `|N(0, angle_std)|`: returns `Δ·R`.
    pub fn perturb<R: Rng + ?Sized>(&self, angle_std: f64, rng: &mut R) -> Result<Self, GeometryError> {
        if !(angle_std >= 0.0) {
            return Err(GeometryError::Range(format!("angle_std {angle_std} < 0")));
        }
        if angle_std == 0.0 {
            return Ok(*self);
        }
        let axis = random_unit(rng);
        let angle = Normal::new(0.0, angle_std)
            .map_err(|e| GeometryError::Range(e.to_string()))?
            .sample(rng)
            .abs();
        Ok(Self::axis_angle(axis, angle)?.mul(self))
    }
}

/// Uniform direction on the unit sphere.
pub fn random_unit<R: Rng + ?Sized>(rng: &mut R) -> Direction3 {
    loop {
        let v = Direction3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        if let Ok(u) = v.normalized() {
            return u;
        }
    }
}

/// Uniformly distributed rotation (random unit quaternion).
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> RotationMatrix {
    let q: [f64; 4] = loop {
        let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
        let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            break q.map(|x| x / n);
        }
    };
    let [w, x, y, z] = q;
    RotationMatrix([
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ])
}
