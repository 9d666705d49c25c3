#![allow(dead_code)]

/// Reference sun positions from NREL's SPA (pvlib `spa_python`, sea level,
/// 12 C), geometric elevation. Columns: UTC time, latitude and longitude in
/// degrees, compass azimuth and altitude in degrees.
pub const SOLAR_REFERENCE: [(&str, f64, f64, f64, f64); 10] = [
    ("2020-03-20T12:07:00Z", 0.0, 0.0, 31.4895, 89.8399),
    ("2024-06-21T11:00:00Z", 48.1372, 11.5756, 171.4689, 65.1049),
    ("2021-12-21T02:30:00Z", -33.8688, 151.2093, 319.8835, 76.8115),
    ("2019-01-15T17:00:00Z", 40.7128, -74.006, 178.5641, 28.1892),
    ("2022-09-23T13:30:00Z", 64.1466, -21.9426, 182.7395, 25.6239),
    ("2023-04-10T03:15:00Z", 35.6762, 139.6503, 196.6992, 61.1878),
    ("2018-07-04T15:45:00Z", -22.9068, -43.1729, 344.9040, 42.7970),
    ("2025-11-02T07:20:00Z", 1.3521, 103.8198, 245.2196, 49.1264),
    ("2000-12-21T12:00:00Z", 51.5074, -0.1278, 180.2931, 15.0516),
    ("2010-01-01T00:00:00Z", -77.846, 166.676, 15.8954, 34.7682),
];
