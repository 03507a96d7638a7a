//! The factorized observation model: five per-cue likelihood terms, their
//! noise parameters, and maximum-likelihood fitting of those parameters from
//! residual logs.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{Matrix2, Matrix2x4, Vector2, Vector4};
use serde::{Deserialize, Serialize};

use crate::angles::wrap_to_pi;
use crate::error::{Error, Result};
use crate::road_map::{IntersectionClass, RoadGraph, RoadType, SegmentId, StreetSegment};
use crate::solar::{map_frame_azimuth, SunPosition};

/// What the intersection detector reports for one frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntersectionObs {
    Visible,
    NotVisible,
}

impl std::fmt::Display for IntersectionObs {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            IntersectionObs::Visible => write!(f, "visible"),
            IntersectionObs::NotVisible => write!(f, "not_visible"),
        }
    }
}

/// One time step's worth of cues; every field may be absent.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ObservationFrame {
    /// UTC seconds.
    pub t: f64,
    /// Relative sun direction, radians in (-pi, pi].
    pub phi: Option<f64>,
    pub inter: Option<IntersectionObs>,
    pub rtype: Option<RoadType>,
    /// km/h.
    pub velocity: Option<f64>,
    /// (forward distance m, heading change rad).
    pub odom: Option<[f64; 2]>,
}

impl ObservationFrame {
    pub fn has_any(&self) -> bool {
        self.phi.is_some()
            || self.inter.is_some()
            || self.rtype.is_some()
            || self.velocity.is_some()
            || self.odom.is_some()
    }
}

pub(crate) mod mat2 {
    use nalgebra::Matrix2;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Matrix2<f64>, s: S) -> Result<S::Ok, S::Error> {
        [[m[(0, 0)], m[(0, 1)]], [m[(1, 0)], m[(1, 1)]]].serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Matrix2<f64>, D::Error> {
        let rows = <[[f64; 2]; 2]>::deserialize(d)?;
        Ok(Matrix2::new(rows[0][0], rows[0][1], rows[1][0], rows[1][1]))
    }
}

/// Noise parameters of the observation model. Covariances are row-major
/// nested arrays in JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    /// Sun-direction variance, rad^2.
    pub sigma_sun: f64,
    /// Odometry covariance over (distance m, heading rad) on highways.
    #[serde(with = "mat2")]
    pub sigma_odom_highway: Matrix2<f64>,
    /// Same, on all other roads.
    #[serde(with = "mat2")]
    pub sigma_odom_city: Matrix2<f64>,
    /// Probability the intersection detector agrees with the map.
    pub gamma_inter: f64,
    /// Probability the road-type detector agrees with the map.
    pub beta_rtype: f64,
    /// Speed-limit slack, km/h.
    pub v0: f64,
    /// Likelihood of driving above limit + slack.
    pub eps_speed: f64,
}

/// Fitting floors: variances below these are lifted (degenerate logs happen).
pub const MIN_SIGMA_SUN: f64 = (2.0 * PI / 180.0) * (2.0 * PI / 180.0);
pub const MIN_SIGMA_ODOM_D: f64 = 0.05 * 0.05;
pub const MIN_SIGMA_ODOM_TH: f64 = (0.2 * PI / 180.0) * (0.2 * PI / 180.0);

impl Default for NoiseModel {
    fn default() -> Self {
        let deg = PI / 180.0;
        Self {
            sigma_sun: (15.0 * deg) * (15.0 * deg),
            sigma_odom_highway: Matrix2::new(0.36, 0.0, 0.0, (1.0 * deg) * (1.0 * deg)),
            sigma_odom_city: Matrix2::new(0.09, 0.0, 0.0, (0.5 * deg) * (0.5 * deg)),
            gamma_inter: 0.8,
            beta_rtype: 0.9,
            v0: 25.0,
            eps_speed: 1e-4,
        }
    }
}

impl NoiseModel {
    pub fn odom_cov(&self, road_type: RoadType) -> &Matrix2<f64> {
        match road_type {
            RoadType::Highway => &self.sigma_odom_highway,
            RoadType::NonHighway => &self.sigma_odom_city,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_sun > 0.0) {
            return Err(Error::BadConfig(format!(
                "sigma_sun must be positive, got {}",
                self.sigma_sun
            )));
        }
        for (name, m) in [
            ("sigma_odom_highway", &self.sigma_odom_highway),
            ("sigma_odom_city", &self.sigma_odom_city),
        ] {
            let sym = (m[(0, 1)] - m[(1, 0)]).abs();
            if sym > 1e-9 * (1.0 + m[(0, 1)].abs()) {
                return Err(Error::BadConfig(format!("{name} is not symmetric")));
            }
            if !(m[(0, 0)] > 0.0) || m.determinant() <= 0.0 {
                return Err(Error::BadConfig(format!("{name} is not positive definite")));
            }
        }
        for (name, p) in [("gamma_inter", self.gamma_inter), ("beta_rtype", self.beta_rtype)] {
            if !(p > 0.5 && p <= 1.0) {
                return Err(Error::BadConfig(format!(
                    "{name} must lie in (0.5, 1], got {p}"
                )));
            }
        }
        if !(self.eps_speed > 0.0) {
            return Err(Error::BadConfig("eps_speed must be positive".into()));
        }
        if !(self.v0 >= 0.0) {
            return Err(Error::BadConfig("v0 must be non-negative".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let nm: NoiseModel = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        nm.validate()?;
        Ok(nm)
    }
}

fn gaussian1(residual: f64, variance: f64) -> f64 {
    (-0.5 * residual * residual / variance).exp() / (2.0 * PI * variance).sqrt()
}

/// Sun cue as a linear observation of s = (d, d_prev, theta, theta_prev):
/// phi = h . s + offset + noise, with h = (-alpha, 0, -1, 0) and
/// offset = azimuth_map - beta. The caller wraps the innovation.
pub fn sun_observation_row(seg: &StreetSegment, sun: &SunPosition) -> (Vector4<f64>, f64) {
    (
        Vector4::new(-seg.alpha, 0.0, -1.0, 0.0),
        map_frame_azimuth(sun) - seg.beta,
    )
}

/// Odometry as a linear observation of s: rows (1,-1,0,0) and
/// (alpha,-alpha,1,-1) predict (forward distance, heading change).
pub fn odometry_matrix(seg: &StreetSegment) -> Matrix2x4<f64> {
    Matrix2x4::new(
        1.0, -1.0, 0.0, 0.0, //
        seg.alpha, -seg.alpha, 1.0, -1.0,
    )
}

/// Gaussian density of the wrapped sun residual. Night frames contribute 1.
pub fn sun_likelihood(
    phi_obs: f64,
    u: SegmentId,
    s: &Vector4<f64>,
    graph: &RoadGraph,
    sun: &SunPosition,
    nm: &NoiseModel,
) -> Result<f64> {
    if !sun.is_daytime() {
        return Ok(1.0);
    }
    let seg = graph.get(u)?;
    let (h, offset) = sun_observation_row(seg, sun);
    let residual = wrap_to_pi(phi_obs - (h.dot(s) + offset));
    Ok(gaussian1(residual, nm.sigma_sun))
}

/// gamma if the detector output matches the segment's visibility class
/// (`too_close` counts as not seeing the intersection), else 1 - gamma.
pub fn intersection_likelihood(
    i_obs: IntersectionObs,
    u: SegmentId,
    graph: &RoadGraph,
    nm: &NoiseModel,
) -> Result<f64> {
    let class = graph.get(u)?.intersection_class;
    let map_visible = class == IntersectionClass::Visible;
    let obs_visible = i_obs == IntersectionObs::Visible;
    Ok(if map_visible == obs_visible {
        nm.gamma_inter
    } else {
        1.0 - nm.gamma_inter
    })
}

pub fn road_type_likelihood(
    r_obs: RoadType,
    u: SegmentId,
    graph: &RoadGraph,
    nm: &NoiseModel,
) -> Result<f64> {
    Ok(if graph.get(u)?.road_type == r_obs {
        nm.beta_rtype
    } else {
        1.0 - nm.beta_rtype
    })
}

/// Piecewise-constant plausibility of driving at `v` km/h on segment `u`:
/// 0.99/(V + v0) while v <= V + v0, a small epsilon above that.
pub fn speed_likelihood(v: f64, u: SegmentId, graph: &RoadGraph, nm: &NoiseModel) -> Result<f64> {
    let limit = graph.get(u)?.speed_limit;
    Ok(if v <= limit + nm.v0 {
        0.99 / (limit + nm.v0)
    } else {
        nm.eps_speed
    })
}

/// Bivariate Gaussian density of the measured (distance, heading-change)
/// increment about M_u s, with the covariance of the segment's road class.
pub fn odometry_likelihood(
    odom: [f64; 2],
    s: &Vector4<f64>,
    u: SegmentId,
    graph: &RoadGraph,
    nm: &NoiseModel,
) -> Result<f64> {
    let seg = graph.get(u)?;
    let cov = nm.odom_cov(seg.road_type);
    let det = cov.determinant();
    if det <= 0.0 {
        return Err(Error::BadConfig(
            "odometry covariance is singular".into(),
        ));
    }
    let mean = odometry_matrix(seg) * s;
    let r = Vector2::new(odom[0] - mean[0], wrap_to_pi(odom[1] - mean[1]));
    let inv = cov
        .try_inverse()
        .ok_or_else(|| Error::BadConfig("odometry covariance is singular".into()))?;
    let maha = (r.transpose() * inv * r)[(0, 0)];
    Ok((-0.5 * maha).exp() / (2.0 * PI * det.sqrt()))
}

/// Product of the present cue terms for a state (u, s); absent cues
/// contribute factor 1, as does the sun cue at night or without ephemeris.
pub fn frame_likelihood(
    y: &ObservationFrame,
    u: SegmentId,
    s: &Vector4<f64>,
    graph: &RoadGraph,
    sun: Option<&SunPosition>,
    nm: &NoiseModel,
) -> Result<f64> {
    let mut p = 1.0;
    if let (Some(phi), Some(sun)) = (y.phi, sun) {
        p *= sun_likelihood(phi, u, s, graph, sun, nm)?;
    }
    if let Some(i) = y.inter {
        p *= intersection_likelihood(i, u, graph, nm)?;
    }
    if let Some(r) = y.rtype {
        p *= road_type_likelihood(r, u, graph, nm)?;
    }
    if let Some(v) = y.velocity {
        p *= speed_likelihood(v, u, graph, nm)?;
    }
    if let Some(o) = y.odom {
        p *= odometry_likelihood(o, s, u, graph, nm)?;
    }
    Ok(p)
}

/// One row of a residual log used for noise fitting.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualRow {
    pub t: f64,
    /// Road class the vehicle was on (selects the odometry covariance).
    pub class: RoadType,
    pub res_d: Option<f64>,
    pub res_theta: Option<f64>,
    pub res_sun: Option<f64>,
    pub inter_pred: Option<IntersectionObs>,
    pub inter_gt: Option<IntersectionObs>,
    pub rtype_pred: Option<RoadType>,
    pub rtype_gt: Option<RoadType>,
}

impl Default for ResidualRow {
    fn default() -> Self {
        Self {
            t: 0.0,
            class: RoadType::NonHighway,
            res_d: None,
            res_theta: None,
            res_sun: None,
            inter_pred: None,
            inter_gt: None,
            rtype_pred: None,
            rtype_gt: None,
        }
    }
}

fn mle_cov2(rows: &[[f64; 2]]) -> Matrix2<f64> {
    let n = rows.len() as f64;
    let mean = rows
        .iter()
        .fold([0.0, 0.0], |a, r| [a[0] + r[0] / n, a[1] + r[1] / n]);
    let mut m = Matrix2::zeros();
    for r in rows {
        let d = Vector2::new(r[0] - mean[0], r[1] - mean[1]);
        m += d * d.transpose() / n;
    }
    m
}

fn floor_cov2(mut m: Matrix2<f64>, floor_d: f64, floor_th: f64) -> Matrix2<f64> {
    m[(0, 0)] = m[(0, 0)].max(floor_d);
    m[(1, 1)] = m[(1, 1)].max(floor_th);
    // keep it positive definite if the raw fit was (near-)perfectly correlated
    let max_off = 0.999 * (m[(0, 0)] * m[(1, 1)]).sqrt();
    let off = m[(0, 1)].clamp(-max_off, max_off);
    m[(0, 1)] = off;
    m[(1, 0)] = off;
    m
}

fn fit_agreement(
    what: &str,
    pairs: impl Iterator<Item = (bool, bool)>,
    default: f64,
) -> Result<f64> {
    let mut total = 0usize;
    let mut agree = 0usize;
    for (a, b) in pairs {
        total += 1;
        if a == b {
            agree += 1;
        }
    }
    if total == 0 {
        log::warn!("no {what} rows in residual log; keeping default {default}");
        return Ok(default);
    }
    if total < 2 {
        return Err(Error::Fit(format!(
            "{what}: need at least 2 labeled rows, found {total}"
        )));
    }
    let p = agree as f64 / total as f64;
    if p <= 0.5 {
        return Err(Error::Fit(format!(
            "{what}: agreement rate {p:.3} is not better than chance; refusing to fit"
        )));
    }
    Ok(p)
}

/// Maximum-likelihood noise parameters from a residual log. Families with no
/// rows at all keep their defaults (with a warning); families with exactly
/// one row, or discrete cues fitted at or below chance level, are errors.
pub fn fit_noise(rows: &[ResidualRow]) -> Result<NoiseModel> {
    let mut nm = NoiseModel::default();

    for class in [RoadType::Highway, RoadType::NonHighway] {
        let od: Vec<[f64; 2]> = rows
            .iter()
            .filter(|r| r.class == class)
            .filter_map(|r| match (r.res_d, r.res_theta) {
                (Some(d), Some(th)) => Some([d, wrap_to_pi(th)]),
                _ => None,
            })
            .collect();
        if od.is_empty() {
            log::warn!("no odometry residuals for class {class}; keeping defaults");
            continue;
        }
        if od.len() < 2 {
            return Err(Error::Fit(format!(
                "odometry residuals for class {class}: need at least 2 rows, found {}",
                od.len()
            )));
        }
        let cov = floor_cov2(mle_cov2(&od), MIN_SIGMA_ODOM_D, MIN_SIGMA_ODOM_TH);
        match class {
            RoadType::Highway => nm.sigma_odom_highway = cov,
            RoadType::NonHighway => nm.sigma_odom_city = cov,
        }
    }

    let sun: Vec<f64> = rows.iter().filter_map(|r| r.res_sun).map(wrap_to_pi).collect();
    if sun.is_empty() {
        log::warn!("no sun residuals; keeping default sigma_sun");
    } else if sun.len() < 2 {
        return Err(Error::Fit(
            "sun residuals: need at least 2 rows, found 1".into(),
        ));
    } else {
        let n = sun.len() as f64;
        let mean = sun.iter().sum::<f64>() / n;
        let var = sun.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
        nm.sigma_sun = var.max(MIN_SIGMA_SUN);
    }

    nm.gamma_inter = fit_agreement(
        "intersection confusion",
        rows.iter().filter_map(|r| match (r.inter_pred, r.inter_gt) {
            (Some(p), Some(g)) => Some((p == IntersectionObs::Visible, g == IntersectionObs::Visible)),
            _ => None,
        }),
        nm.gamma_inter,
    )?;
    nm.beta_rtype = fit_agreement(
        "road-type confusion",
        rows.iter().filter_map(|r| match (r.rtype_pred, r.rtype_gt) {
            (Some(p), Some(g)) => Some((p == RoadType::Highway, g == RoadType::Highway)),
            _ => None,
        }),
        nm.beta_rtype,
    )?;

    nm.validate()?;
    Ok(nm)
}
