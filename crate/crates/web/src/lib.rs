//! WebAssembly entry points for the static demo page in `www/`.

use chrono::{NaiveDate, TimeZone, Utc};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sunformer::encoding::{cyclic_pe, EncodingConfig};
use sunformer::geometry::direction_from_spherical;
use sunformer::geometry::solar::sun_from_gps_time;
use sunformer::synth::render_patch;
use wasm_bindgen::prelude::*;

/// Row-major `steps × d_angle` grid of the cyclic encoding, one row per angle
/// from 0 to 360 degrees (exclusive).
#[wasm_bindgen]
pub fn pe_heatmap(d_angle: usize, alpha: f64, steps: usize) -> Result<Vec<f32>, JsError> {
    let cfg = EncodingConfig::new(d_angle, alpha).map_err(|e| JsError::new(&e.to_string()))?;
    let mut out = Vec::with_capacity(steps * d_angle);
    for i in 0..steps {
        let phi = std::f64::consts::TAU * i as f64 / steps as f64;
        out.extend(cyclic_pe(phi, &cfg).into_iter().map(|v| v as f32));
    }
    Ok(out)
}

/// Sun position over one UTC day as flat `[hour, azimuth_deg, altitude_deg]`
/// triples, every `step_min` minutes.
#[wasm_bindgen]
pub fn solar_day_path(lat_deg: f64, lon_deg: f64, year: i32, month: u32, day: u32, step_min: u32) -> Result<Vec<f64>, JsError> {
    let date = NaiveDate::from_ymd_opt(year, month, day).ok_or_else(|| JsError::new("no such date"))?;
    let step = step_min.max(1);
    let mut out = Vec::new();
    for m in (0..24 * 60).step_by(step as usize) {
        let t = Utc.from_utc_datetime(&date.and_hms_opt(m / 60, m % 60, 0).expect("minute of day"));
        let p = sun_from_gps_time(lat_deg, lon_deg, t).map_err(|e| JsError::new(&e.to_string()))?;
        out.extend([m as f64 / 60.0, p.azimuth_deg, p.altitude_deg]);
    }
    Ok(out)
}

/// RGBA bytes of one synthetic patch lit from the given crop-frame direction
/// (azimuth counterclockwise from +x, degrees).
#[wasm_bindgen]
pub fn render_preview(azimuth_deg: f64, altitude_deg: f64, size: usize, noise: f64, seed: u64) -> Result<Vec<u8>, JsError> {
    if size < 2 {
        return Err(JsError::new("size must be at least 2"));
    }
    let light = direction_from_spherical(azimuth_deg.to_radians(), altitude_deg.to_radians())
        .map_err(|e| JsError::new(&e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rgb = render_patch(light, false, noise.max(0.0), &mut rng, size);
    Ok(rgb
        .chunks(3)
        .flat_map(|p| [p[0], p[1], p[2]].map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8).into_iter().chain([255]))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heatmap_shape_and_wraparound() {
        let h = pe_heatmap(8, std::f64::consts::FRAC_PI_2, 36).unwrap();
        assert_eq!(h.len(), 36 * 8);
        assert!(h.iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn day_path_peaks_near_noon() {
        let p = solar_day_path(0.0, 0.0, 2020, 3, 20, 30).unwrap();
        assert_eq!(p.len(), 48 * 3);
        let best = p.chunks(3).max_by(|a, b| a[2].total_cmp(&b[2])).unwrap();
        assert!((best[0] - 12.0).abs() <= 0.5 && best[2] > 85.0);
    }

    #[test]
    fn preview_is_opaque_rgba() {
        let px = render_preview(30.0, 40.0, 16, 0.0, 1).unwrap();
        assert_eq!(px.len(), 16 * 16 * 4);
        assert!(px.chunks(4).all(|p| p[3] == 255));
    }
}
