use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sunformer::aggregate::{calibrate_and_average, spherical_mean, Estimate, EstimateSet};
use sunformer::encoding::{cyclic_pe, EncodingConfig};
use sunformer::geometry::solar::sun_from_gps_time;
use sunformer::geometry::{angle_between, calibrate, random_rotation, wrap_angle, CameraFrame, Direction3};
use sunformer::losses::light_terms;

fn dir() -> impl Strategy<Value = Direction3> {
    (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64)
        .prop_filter("nonzero", |(x, y, z)| x * x + y * y + z * z > 1e-4)
        .prop_map(|(x, y, z)| Direction3::new(x, y, z).normalized().unwrap())
}

proptest! {
    #[test]
    fn calibrate_preserves_angles(a in dir(), b in dir(), seed in any::<u64>()) {
        let r = random_rotation(&mut ChaCha8Rng::seed_from_u64(seed));
        let before = angle_between(a, b).unwrap();
        let after = angle_between(calibrate(a, &r), calibrate(b, &r)).unwrap();
        prop_assert!((before - after).abs() < 1e-7);
        prop_assert!((calibrate(a, &r).norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn encoding_is_bounded_and_periodic(phi in -100.0..100.0f64, half in 1usize..20, alpha in 0.1..3.0f64) {
        let cfg = EncodingConfig::new(2 * half, alpha).unwrap();
        let a = cyclic_pe(phi, &cfg);
        let b = cyclic_pe(phi + std::f64::consts::TAU, &cfg);
        prop_assert_eq!(a.len(), 2 * half);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!(x.abs() <= 1.0);
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn loss_terms_are_consistent(gt in dir(), v in dir(), scale in 0.01..5.0f64) {
        let b = light_terms((v * scale).to_array(), gt).unwrap().0;
        prop_assert!((0.0..=2.0 + 1e-12).contains(&b.cosine));
        prop_assert!(b.norm >= 0.0 && b.hemi >= 0.0);
        prop_assert!((b.total - (b.cosine + b.norm + b.hemi)).abs() < 1e-12);
    }

    #[test]
    fn mean_of_a_hemisphere_cluster_is_unit(points in prop::collection::vec(dir(), 1..20), yaw in -10.0..10.0f64) {
        let up: Vec<_> = points.iter().map(|p| Direction3::new(p.x, p.y, p.z.abs() + 0.1).normalized().unwrap()).collect();
        let m = spherical_mean(&up).unwrap();
        prop_assert!((m.norm() - 1.0).abs() < 1e-12);
        let frame = CameraFrame::new(0, yaw, 0.0, 1.0, 1.0).unwrap();
        let est = up.iter().enumerate().map(|(i, p)| Estimate {
            patch_id: i as u32,
            frame: frame.clone(),
            raw: frame.rotation().apply(*p).to_array(),
        }).collect();
        let back = calibrate_and_average(&EstimateSet::new(est).unwrap()).unwrap();
        prop_assert!((back - m).norm() < 1e-9);
    }

    #[test]
    fn solar_output_ranges(lat in -90.0..=90.0f64, lon in -180.0..=180.0f64, secs in 0i64..3_000_000_000) {
        let t = chrono::DateTime::from_timestamp(secs - 600_000_000, 0).unwrap();
        let p = sun_from_gps_time(lat, lon, t).unwrap();
        prop_assert!((0.0..360.0).contains(&p.azimuth_deg));
        prop_assert!((-90.0..=90.0).contains(&p.altitude_deg));
        prop_assert!((p.direction().norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn wrapped_angles_stay_in_range(a in -1e6..1e6f64) {
        let w = wrap_angle(a);
        prop_assert!((0.0..std::f64::consts::TAU).contains(&w));
        prop_assert!(((a - w) / std::f64::consts::TAU - ((a - w) / std::f64::consts::TAU).round()).abs() < 1e-6);
    }
}
