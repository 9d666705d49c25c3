//! Low-precision solar ephemeris (NOAA fractional-year formulation).
//!
//! Accuracy is a few tenths of a degree within 1950–2050, which is ample for
//! labeling sequences with a ground-truth sun direction. Altitude is geometric
//! (no atmospheric refraction).

use chrono::{DateTime, Datelike, NaiveDate, Timelike, Utc};

use super::{Direction3, GeometryError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolarPosition {
    /// Compass azimuth in degrees, clockwise from north, in [0, 360).
    pub azimuth_deg: f64,
    /// Geometric altitude in degrees, in [-90, 90].
    pub altitude_deg: f64,
}

impl SolarPosition {
    /// Sun direction in an east-north-up world frame (x east, y north, z up).
    pub fn direction(&self) -> Direction3 {
        let (sa, ca) = self.azimuth_deg.to_radians().sin_cos();
        let (sh, ch) = self.altitude_deg.to_radians().sin_cos();
        Direction3::new(sa * ch, ca * ch, sh)
    }
}

pub fn sun_from_gps_time(
    lat_deg: f64,
    lon_deg: f64,
    timestamp: DateTime<Utc>,
) -> Result<SolarPosition, GeometryError> {
    if !(-90.0..=90.0).contains(&lat_deg) {
        return Err(GeometryError::Range(format!("latitude {lat_deg} outside [-90, 90]")));
    }
    if !(-180.0..=180.0).contains(&lon_deg) {
        return Err(GeometryError::Range(format!("longitude {lon_deg} outside [-180, 180]")));
    }
    let year = timestamp.year();
    if !(1950..=2050).contains(&year) {
        return Err(GeometryError::Range(format!("year {year} outside 1950-2050")));
    }

    let days_in_year = if NaiveDate::from_ymd_opt(year, 2, 29).is_some() {
        366.0
    } else {
        365.0
    };
    let hours = timestamp.hour() as f64
        + timestamp.minute() as f64 / 60.0
        + (timestamp.second() as f64 + timestamp.nanosecond() as f64 * 1e-9) / 3600.0;
    let gamma = std::f64::consts::TAU / days_in_year
        * (timestamp.ordinal0() as f64 + (hours - 12.0) / 24.0);

    let eqtime_min = 229.18
        * (0.000075 + 0.001868 * gamma.cos()
            - 0.032077 * gamma.sin()
            - 0.014615 * (2.0 * gamma).cos()
            - 0.040849 * (2.0 * gamma).sin());
    let decl = 0.006918 - 0.399912 * gamma.cos() + 0.070257 * gamma.sin()
        - 0.006758 * (2.0 * gamma).cos()
        + 0.000907 * (2.0 * gamma).sin()
        - 0.002697 * (3.0 * gamma).cos()
        + 0.00148 * (3.0 * gamma).sin();

    let true_solar_min = hours * 60.0 + eqtime_min + 4.0 * lon_deg;
    let hour_angle = (true_solar_min / 4.0 - 180.0).to_radians();

    let lat = lat_deg.to_radians();
    let (sl, cl) = lat.sin_cos();
    let (sd, cd) = decl.sin_cos();
    let east = -cd * hour_angle.sin();
    let north = cl * sd - sl * cd * hour_angle.cos();
    let up = sl * sd + cl * cd * hour_angle.cos();

    let altitude_deg = up.clamp(-1.0, 1.0).asin().to_degrees();
    let mut azimuth_deg = east.atan2(north).to_degrees().rem_euclid(360.0);
    if azimuth_deg >= 360.0 {
        azimuth_deg = 0.0;
    }
    Ok(SolarPosition {
        azimuth_deg,
        altitude_deg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn at(s: &str) -> DateTime<Utc> {
        DateTime::parse_from_rfc3339(s).unwrap().with_timezone(&Utc)
    }

    #[test]
    fn equinox_noon_and_midnight_on_the_equator() {
        let noon = sun_from_gps_time(0.0, 0.0, at("2020-03-20T12:07:00Z")).unwrap();
        assert!((88.0..=90.0).contains(&noon.altitude_deg), "{noon:?}");
        let midnight = sun_from_gps_time(0.0, 0.0, at("2020-03-21T00:07:00Z")).unwrap();
        assert!((-90.0..=-88.0).contains(&midnight.altitude_deg), "{midnight:?}");
    }

    #[test]
    fn rejects_out_of_range() {
        let t = at("2020-01-01T00:00:00Z");
        assert!(sun_from_gps_time(91.0, 0.0, t).is_err());
        assert!(sun_from_gps_time(0.0, -181.0, t).is_err());
        assert!(sun_from_gps_time(0.0, 0.0, at("1949-12-31T23:00:00Z")).is_err());
        assert!(sun_from_gps_time(0.0, 0.0, at("2051-01-01T00:00:00Z")).is_err());
    }

    #[test]
    fn ranges_and_continuity() {
        let start = Utc.with_ymd_and_hms(2011, 9, 26, 0, 0, 0).unwrap();
        let mut prev: Option<f64> = None;
        for minute in 0..(48 * 60) {
            let t = start + chrono::Duration::minutes(minute);
            let p = sun_from_gps_time(49.0, 8.4, t).unwrap();
            assert!((-90.0..=90.0).contains(&p.altitude_deg));
            assert!((0.0..360.0).contains(&p.azimuth_deg));
            if let Some(q) = prev {
                assert!((p.altitude_deg - q).abs() < 0.3);
            }
            prev = Some(p.altitude_deg);
        }
    }

    #[test]
    fn direction_is_unit_and_east_at_azimuth_90() {
        let p = SolarPosition {
            azimuth_deg: 90.0,
            altitude_deg: 0.0,
        };
        let d = p.direction();
        assert!((d - Direction3::new(1.0, 0.0, 0.0)).norm() < 1e-15);
    }
}
