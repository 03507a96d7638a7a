//! Sun position from UTC time and coarse geo-location, and the relative sun
//! direction predicted from a vehicle pose.
//!
//! The ephemeris is the NOAA solar-calculator series (Julian-century
//! polynomial form, no refraction). Accuracy is a few hundredths of a degree
//! over 1950-2050 — far below the many-degree spread of sun observations, so
//! a high-precision algorithm would buy nothing.

use std::f64::consts::{FRAC_PI_2, PI};

use chrono::{DateTime, Datelike, Utc};

use crate::angles::wrap_to_pi;
use crate::error::{Error, Result};
use crate::road_map::{MapPose, RoadGraph};

pub const MIN_YEAR: i32 = 1950;
pub const MAX_YEAR: i32 = 2050;

/// Sun direction in the horizontal (compass) frame at `timestamp`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SunPosition {
    /// Radians clockwise from true north, in [0, 2pi).
    pub azimuth: f64,
    /// Radians above the horizon, in [-pi/2, pi/2].
    pub elevation: f64,
    /// UTC seconds since the Unix epoch.
    pub timestamp: f64,
}

impl SunPosition {
    pub fn is_daytime(&self) -> bool {
        self.elevation > 0.0
    }
}

/// Sun azimuth/elevation at `utc` (seconds since the Unix epoch) as seen from
/// (`lat`, `lon`) in degrees.
pub fn sun_position(utc: f64, lat: f64, lon: f64) -> Result<SunPosition> {
    if !(-90.0..=90.0).contains(&lat) || !lat.is_finite() {
        return Err(Error::BadCoordinate { what: "latitude", value: lat });
    }
    if !(-180.0..=180.0).contains(&lon) || !lon.is_finite() {
        return Err(Error::BadCoordinate { what: "longitude", value: lon });
    }
    if !utc.is_finite() {
        return Err(Error::BadCoordinate { what: "timestamp", value: utc });
    }
    let dt = DateTime::<Utc>::from_timestamp(utc.floor() as i64, 0)
        .ok_or(Error::BadCoordinate { what: "timestamp", value: utc })?;
    let year = dt.year();
    if !(MIN_YEAR..=MAX_YEAR).contains(&year) {
        return Err(Error::TimeOutOfRange(year));
    }

    let jd = utc / 86400.0 + 2440587.5;
    let t = (jd - 2451545.0) / 36525.0; // Julian centuries from J2000

    // geometric mean longitude / anomaly, orbital eccentricity
    let l0 = ((280.46646 + t * (36000.76983 + t * 0.0003032)).rem_euclid(360.0)).to_radians();
    let m = (357.52911 + t * (35999.05029 - t * 0.0001537)).to_radians();
    let e = 0.016708634 - t * (0.000042037 + t * 0.0000001267);

    // equation of center, true and apparent longitude
    let c = (m.sin() * (1.914602 - t * (0.004817 + 0.000014 * t))
        + (2.0 * m).sin() * (0.019993 - 0.000101 * t)
        + (3.0 * m).sin() * 0.000289)
        .to_radians();
    let true_lon = l0 + c;
    let node = (125.04 - 1934.136 * t).to_radians();
    let app_lon = (true_lon.to_degrees() - 0.00569 - 0.00478 * node.sin()).to_radians();

    // obliquity (mean, then nutation-corrected) and declination
    let sec = 21.448 - t * (46.815 + t * (0.00059 - t * 0.001813));
    let e0 = (23.0 + (26.0 + sec / 60.0) / 60.0).to_radians();
    let obliq = (e0.to_degrees() + 0.00256 * node.cos()).to_radians();
    let decl = (obliq.sin() * app_lon.sin()).asin();

    // equation of time (minutes) and hour angle
    let y = (obliq / 2.0).tan().powi(2);
    let eqtime = 4.0
        * (y * (2.0 * l0).sin() - 2.0 * e * m.sin()
            + 4.0 * e * y * m.sin() * (2.0 * l0).cos()
            - 0.5 * y * y * (4.0 * l0).sin()
            - 1.25 * e * e * (2.0 * m).sin())
        .to_degrees();
    let minutes = (utc.rem_euclid(86400.0)) / 60.0;
    let tst = minutes + eqtime + 4.0 * lon;
    let ha = (tst / 4.0 - 180.0).to_radians();

    // horizontal coordinates
    let lat_r = lat.to_radians();
    let sin_el = lat_r.sin() * decl.sin() + lat_r.cos() * decl.cos() * ha.cos();
    let elevation = sin_el.clamp(-1.0, 1.0).asin();
    let x_n = lat_r.cos() * decl.sin() - lat_r.sin() * decl.cos() * ha.cos();
    let x_e = -decl.cos() * ha.sin();
    let mut azimuth = x_e.atan2(x_n);
    if azimuth < 0.0 {
        azimuth += 2.0 * PI;
    }

    Ok(SunPosition { azimuth, elevation, timestamp: utc })
}

/// Compass azimuth re-expressed in the map frame (radians CCW from +x/east):
/// azimuth_map = pi/2 - azimuth_compass.
#[inline]
pub fn map_frame_azimuth(sun: &SunPosition) -> f64 {
    wrap_to_pi(FRAC_PI_2 - sun.azimuth)
}

/// Relative sun direction a camera on the vehicle would report:
/// wrap(sun azimuth in the map frame - global heading). Zero means the sun is
/// dead ahead; +pi/2 means it is to the left. Returns `None` at night.
pub fn predicted_relative_sun(
    pose: &MapPose,
    graph: &RoadGraph,
    sun: &SunPosition,
) -> Result<Option<f64>> {
    if !sun.is_daytime() {
        return Ok(None);
    }
    let heading = graph.global_heading(pose)?;
    Ok(Some(wrap_to_pi(map_frame_azimuth(sun) - heading)))
}
