//! Angle helpers. All internal angles are radians; headings are
//! counterclockwise from the map x axis (east).

use std::f64::consts::PI;

/// Wrap an angle to (-pi, pi].
#[inline]
pub fn wrap_to_pi(a: f64) -> f64 {
    // rem_euclid keeps the result in [0, 2pi) for any finite input,
    // including large multiples accumulated over long drives.
    let r = (-a + PI).rem_euclid(2.0 * PI);
    PI - r
}

/// Wrap an angle to [0, 2pi).
#[inline]
pub fn wrap_to_two_pi(a: f64) -> f64 {
    a.rem_euclid(2.0 * PI)
}

/// Signed difference a - b wrapped to (-pi, pi].
#[inline]
pub fn angle_diff(a: f64, b: f64) -> f64 {
    wrap_to_pi(a - b)
}

#[inline]
pub fn deg_to_rad(d: f64) -> f64 {
    d * PI / 180.0
}

#[inline]
pub fn rad_to_deg(r: f64) -> f64 {
    r * 180.0 / PI
}
