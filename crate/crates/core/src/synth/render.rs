//! Procedural patch renderer: a Lambertian ground plane with a gentle height
//! field and a central vertical gnomon casting a shadow.
//!
//! Image axes: column index grows along crop-frame +x, row index grows along
//! crop-frame −y. Pixels are RGB, row-major, interleaved.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::geometry::Direction3;

pub const AMBIENT: f64 = 0.15;
pub const OUTLIER_GRAY: f64 = 0.1;
pub const CHANNELS: usize = 3;

const SUN_COLOR: [f64; 3] = [1.0, 0.95, 0.85];
const SKY_COLOR: [f64; 3] = [0.75, 0.85, 1.0];
const HEIGHT_WAVES: usize = 3;
/// Gnomon height as a fraction of the patch size.
const GNOMON_HEIGHT: f64 = 0.3;
const FOOTPRINT_RADIUS: f64 = 0.9;
const SHADOW_HALF_WIDTH: f64 = 1.0;
/// Edge softness of the shadow and footprint, in pixels.
const SOFTNESS: f64 = 0.5;

#[derive(Debug, Clone, Copy)]
struct Wave {
    kx: f64,
    ky: f64,
    phase: f64,
    amp: f64,
}

/// Ground geometry of one patch, drawn independently of the sun.
#[derive(Debug, Clone)]
pub struct HeightField {
    waves: [Wave; HEIGHT_WAVES],
}

impl HeightField {
    pub fn random<R: Rng + ?Sized>(rng: &mut R, patch_size: usize) -> Self {
        let scale = std::f64::consts::TAU / patch_size as f64;
        let waves = std::array::from_fn(|_| {
            let freq = rng.random_range(0.5..2.0) * scale;
            let dir = rng.random_range(0.0..std::f64::consts::TAU);
            Wave {
                kx: freq * dir.cos(),
                ky: freq * dir.sin(),
                phase: rng.random_range(0.0..std::f64::consts::TAU),
                // slope amplitude up to ~0.08
                amp: rng.random_range(0.02..0.08) / freq,
            }
        });
        Self { waves }
    }

    pub fn flat() -> Self {
        let w = Wave {
            kx: 0.0,
            ky: 0.0,
            phase: 0.0,
            amp: 0.0,
        };
        Self { waves: [w; HEIGHT_WAVES] }
    }

    fn normal(&self, x: f64, y: f64) -> Direction3 {
        let (mut dx, mut dy) = (0.0, 0.0);
        for w in &self.waves {
            let c = (w.kx * x + w.ky * y + w.phase).cos() * w.amp;
            dx += c * w.kx;
            dy += c * w.ky;
        }
        let n = (dx * dx + dy * dy + 1.0).sqrt();
        Direction3::new(-dx / n, -dy / n, 1.0 / n)
    }
}

/// Distance from `p` to the segment `[0, end]`.
fn segment_distance(px: f64, py: f64, ex: f64, ey: f64) -> f64 {
    let len2 = ex * ex + ey * ey;
    let t = if len2 > 0.0 {
        ((px * ex + py * ey) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (dx, dy) = (px - t * ex, py - t * ey);
    (dx * dx + dy * dy).sqrt()
}

fn coverage(dist: f64, half_width: f64) -> f64 {
    ((half_width - dist) / SOFTNESS + 0.5).clamp(0.0, 1.0)
}

/// Shadow segment end point (image-plane offset from the center) for a light
/// direction in the crop frame. Zero length for a sun at the zenith.
pub fn shadow_vector(light: Direction3, patch_size: usize) -> (f64, f64) {
    let horiz = (light.x * light.x + light.y * light.y).sqrt();
    if horiz < 1e-12 || light.z <= 0.0 {
        return (0.0, 0.0);
    }
    let height = GNOMON_HEIGHT * patch_size as f64;
    let max_len = patch_size as f64 / 2.0 - 0.5;
    let len = (height * horiz / light.z).min(max_len);
    (-light.x / horiz * len, -light.y / horiz * len)
}

/// Noise-free radiance of every pixel, `patch_size² × 3` values.
pub fn shade(light: Direction3, field: &HeightField, patch_size: usize) -> Vec<f64> {
    let c = (patch_size as f64 - 1.0) / 2.0;
    let (ex, ey) = shadow_vector(light, patch_size);
    let mut out = Vec::with_capacity(patch_size * patch_size * CHANNELS);
    for row in 0..patch_size {
        for col in 0..patch_size {
            let x = col as f64 - c;
            let y = c - row as f64;
            let lambert = field.normal(x, y).dot(light).max(0.0);
            let in_shadow = coverage(segment_distance(x, y, ex, ey), SHADOW_HALF_WIDTH);
            let footprint = coverage((x * x + y * y).sqrt(), FOOTPRINT_RADIUS);
            let direct = lambert * (1.0 - in_shadow.max(footprint));
            for ch in 0..CHANNELS {
                let v = AMBIENT * SKY_COLOR[ch] * (1.0 - 0.5 * footprint)
                    + (1.0 - AMBIENT) * SUN_COLOR[ch] * direct;
                out.push(v);
            }
        }
    }
    out
}

fn add_noise<R: Rng + ?Sized>(values: &mut [f64], sigma: f64, rng: &mut R) {
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).expect("sigma is finite and positive");
        for v in values.iter_mut() {
            *v += normal.sample(rng);
        }
    }
    for v in values.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
}

/// Renders one patch for a crop-frame light direction.
///
/// Inliers draw a fresh height field from `rng`; outliers are a flat 0.1 gray
/// carrying no directional cue. Gaussian noise `sigma` is added and values are
/// clipped to [0, 1].
pub fn render_patch<R: Rng + ?Sized>(
    light: Direction3,
    is_outlier: bool,
    sigma: f64,
    rng: &mut R,
    patch_size: usize,
) -> Vec<f32> {
    let mut values = if is_outlier {
        vec![OUTLIER_GRAY; patch_size * patch_size * CHANNELS]
    } else {
        let field = HeightField::random(rng, patch_size);
        shade(light, &field, patch_size)
    };
    add_noise(&mut values, sigma, rng);
    values.into_iter().map(|v| v as f32).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::direction_from_spherical;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, PI, TAU};

    const P: usize = 16;

    fn luminance(px: &[f32]) -> Vec<f64> {
        px.chunks(3).map(|c| c.iter().map(|&v| v as f64).sum::<f64>() / 3.0).collect()
    }

    fn offset(i: usize) -> (f64, f64) {
        let c = (P as f64 - 1.0) / 2.0;
        ((i % P) as f64 - c, c - (i / P) as f64)
    }

    #[test]
    fn zenith_sun_casts_no_shadow() {
        let zenith = direction_from_spherical(0.0, FRAC_PI_2).unwrap();
        assert_eq!(shadow_vector(zenith, P), (0.0, 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lum = luminance(&render_patch(zenith, false, 0.0, &mut rng, P));
        for (i, &v) in lum.iter().enumerate() {
            let (x, y) = offset(i);
            if (x * x + y * y).sqrt() > FOOTPRINT_RADIUS + SOFTNESS {
                assert!(v > 0.5, "pixel {i} dark at zenith: {v}");
            }
        }
    }

    #[test]
    fn opposite_azimuths_shadow_opposite_sides() {
        let alt = 30f64.to_radians();
        for az in [0.3, 1.7, 4.0] {
            let mut centroids = Vec::new();
            for a in [az, az + PI] {
                let mut rng = ChaCha8Rng::seed_from_u64(7);
                let light = direction_from_spherical(a, alt).unwrap();
                let lum = luminance(&render_patch(light, false, 0.0, &mut rng, P));
                let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
                for (i, &v) in lum.iter().enumerate() {
                    let (x, y) = offset(i);
                    if v < 0.2 && (x * x + y * y).sqrt() > 1.5 {
                        sx += x;
                        sy += y;
                        n += 1.0;
                    }
                }
                assert!(n > 0.0);
                centroids.push((sx / n, sy / n));
            }
            let dot = centroids[0].0 * centroids[1].0 + centroids[0].1 * centroids[1].1;
            assert!(dot < 0.0, "{centroids:?}");
        }
    }

    #[test]
    fn outliers_are_flat_gray() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let light = direction_from_spherical(1.0, 0.5).unwrap();
        let px = render_patch(light, true, 0.0, &mut rng, P);
        assert!(px.iter().all(|&v| (v as f64 - OUTLIER_GRAY).abs() < 1e-7));
    }

    #[test]
    fn deterministic_and_clipped() {
        let light = direction_from_spherical(2.0, 0.4).unwrap();
        let a = render_patch(light, false, 0.3, &mut ChaCha8Rng::seed_from_u64(3), P);
        let b = render_patch(light, false, 0.3, &mut ChaCha8Rng::seed_from_u64(3), P);
        assert_eq!(a, b);
        assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(a.len(), P * P * 3);
    }

    #[test]
    fn brightness_moment_tracks_sun_azimuth() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (mut truth, mut measured) = (Vec::new(), Vec::new());
        for _ in 0..100 {
            let az = rng.random_range(0.0..TAU);
            let alt = rng.random_range(5f64.to_radians()..60f64.to_radians());
            let light = direction_from_spherical(az, alt).unwrap();
            let lum = luminance(&render_patch(light, false, 0.05, &mut rng, P));
            let mean = lum.iter().sum::<f64>() / lum.len() as f64;
            let (mut mx, mut my) = (0.0, 0.0);
            for (i, &v) in lum.iter().enumerate() {
                let (x, y) = offset(i);
                mx += (v - mean) * x;
                my += (v - mean) * y;
            }
            truth.push(az);
            measured.push(my.atan2(mx));
        }
        // mean cosine of the azimuth residual
        let agreement = truth.iter().zip(&measured).map(|(t, m)| (t - m).cos()).sum::<f64>() / 100.0;
        assert!(agreement > 0.7, "{agreement}");
    }
}
