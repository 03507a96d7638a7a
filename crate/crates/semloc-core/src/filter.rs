//! Recursive Bayes filter over the road graph: a discrete distribution over
//! segments times a per-segment Gaussian mixture over the continuous state
//! s = (d, d_prev, theta, theta_prev).
//!
//! Prediction branches every component over the stay/leave decision with a
//! sigmoid arrival model, pushes leavers through the exact affine coordinate
//! change onto successors, and applies linear dynamics. Updates are conjugate
//! where the cue is Gaussian (odometry, sun) and plain weight rescaling where
//! it is discrete (intersection, road type, speed).

use nalgebra::{Matrix2, Matrix4, Vector2, Vector4};

use crate::error::{Error, Result};
use crate::angles::wrap_to_pi;
use crate::observation::{
    intersection_likelihood, odometry_matrix, road_type_likelihood, speed_likelihood,
    sun_observation_row, NoiseModel, ObservationFrame,
};
use crate::road_map::{RoadGraph, SegmentId};
use crate::solar::SunPosition;

/// One Gaussian hypothesis over s, weighted within its segment's mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub pi: f64,
    pub mean: Vector4<f64>,
    pub cov: Matrix4<f64>,
}

/// A segment's share of the posterior: discrete weight plus the mixture.
/// `components` is empty exactly when `weight` is zero.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SegmentMixture {
    pub weight: f64,
    pub components: Vec<Component>,
}

/// Posterior over (segment, s) at one time step; `segments` is aligned with
/// the graph's segment indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    pub t: f64,
    pub segments: Vec<SegmentMixture>,
}

impl Posterior {
    /// Verify the distribution invariants (weights and per-segment mixture
    /// weights normalized, covariances symmetric positive definite).
    pub fn check(&self) -> Result<()> {
        let total: f64 = self.segments.iter().map(|m| m.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidGraph(format!(
                "posterior weights sum to {total}, not 1"
            )));
        }
        for (i, m) in self.segments.iter().enumerate() {
            if m.weight < 0.0 {
                return Err(Error::InvalidGraph(format!("segment {i}: negative weight")));
            }
            if m.weight > 0.0 {
                let pis: f64 = m.components.iter().map(|c| c.pi).sum();
                if (pis - 1.0).abs() > 1e-9 {
                    return Err(Error::InvalidGraph(format!(
                        "segment {i}: mixture weights sum to {pis}"
                    )));
                }
            }
            for c in &m.components {
                if !c.mean.iter().all(|v| v.is_finite()) {
                    return Err(Error::InvalidGraph(format!("segment {i}: non-finite mean")));
                }
                let sym = c.cov - c.cov.transpose();
                if sym.norm() > 1e-9 * (1.0 + c.cov.norm()) {
                    return Err(Error::InvalidGraph(format!("segment {i}: asymmetric cov")));
                }
                if c.cov.clone().cholesky().is_none() {
                    return Err(Error::InvalidGraph(format!(
                        "segment {i}: covariance not positive definite"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Discrete street marginal p(u), aligned with graph segment ids.
    pub fn street_marginal(&self) -> Vec<f64> {
        self.segments.iter().map(|m| m.weight).collect()
    }

    pub fn normalize(&mut self) -> f64 {
        let total: f64 = self.segments.iter().map(|m| m.weight).sum();
        if total > 0.0 {
            for m in &mut self.segments {
                m.weight /= total;
            }
        }
        total
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterConfig {
    pub max_components_per_segment: usize,
    /// Components below this share of total mass are dropped.
    pub prune_weight: f64,
    /// Merge pairs closer than this symmetric Mahalanobis distance.
    pub merge_mahalanobis: f64,
    /// Sigmoid scale (meters) of the arrival model.
    pub transition_sharpness: f64,
    pub dt: f64,
    /// Process noise over (d, d_prev, theta, theta_prev).
    pub q: Matrix4<f64>,
    /// Damping of the heading-offset velocity in the dynamics.
    pub rho: f64,
    /// Assumed speed when placing initial components (m/s).
    pub init_speed: f64,
    /// Distance between initial components along a segment (m).
    pub component_spacing: f64,
    pub init_sigma_pos: f64,
    pub init_sigma_vel: f64,
    pub init_sigma_theta: f64,
    pub init_sigma_omega: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        let deg = std::f64::consts::PI / 180.0;
        Self {
            max_components_per_segment: 4,
            prune_weight: 1e-6,
            merge_mahalanobis: 1.0,
            transition_sharpness: 5.0,
            dt: 1.0,
            // generous heading noise lets one odometry update absorb a street
            // corner taken within a single frame
            q: Matrix4::from_diagonal(&Vector4::new(
                1.5 * 1.5,
                1e-6,
                (25.0 * deg) * (25.0 * deg),
                1e-6,
            )),
            rho: 0.5,
            init_speed: 10.0,
            component_spacing: 20.0,
            init_sigma_pos: 10.0,
            init_sigma_vel: 5.0,
            init_sigma_theta: 20.0 * deg,
            init_sigma_omega: 10.0 * deg,
        }
    }
}

impl FilterConfig {
    /// Dynamics matrix: constant velocity on d, damped velocity on theta;
    /// the hatted slots receive the previous current values.
    pub fn dynamics(&self) -> Matrix4<f64> {
        Matrix4::new(
            2.0, -1.0, 0.0, 0.0, //
            1.0, 0.0, 0.0, 0.0, //
            0.0, 0.0, 1.0 + self.rho, -self.rho, //
            0.0, 0.0, 1.0, 0.0,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_components_per_segment == 0 {
            return Err(Error::BadConfig("max_components_per_segment must be >= 1".into()));
        }
        for (name, v) in [
            ("prune_weight", self.prune_weight),
            ("merge_mahalanobis", self.merge_mahalanobis),
            ("transition_sharpness", self.transition_sharpness),
            ("dt", self.dt),
            ("init_speed", self.init_speed),
            ("component_spacing", self.component_spacing),
            ("init_sigma_pos", self.init_sigma_pos),
            ("init_sigma_vel", self.init_sigma_vel),
            ("init_sigma_theta", self.init_sigma_theta),
            ("init_sigma_omega", self.init_sigma_omega),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::BadConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if self.q.cholesky().is_none() {
            return Err(Error::BadConfig("process noise Q must be positive definite".into()));
        }
        Ok(())
    }
}

/// Uniform-over-road-length prior: segment weights proportional to length,
/// components spread every `component_spacing` meters with a broad covariance
/// and a mildly informative rearward previous-position estimate.
pub fn init_uniform(graph: &RoadGraph, config: &FilterConfig) -> Result<Posterior> {
    if graph.is_empty() {
        return Err(Error::EmptyMap);
    }
    let total = graph.total_length();
    let sp = config.init_sigma_pos * config.init_sigma_pos;
    let sv = config.init_sigma_vel * config.init_sigma_vel * config.dt * config.dt;
    let st = config.init_sigma_theta * config.init_sigma_theta;
    let so = config.init_sigma_omega * config.init_sigma_omega * config.dt * config.dt;
    // d and d_prev share the position uncertainty; their difference carries
    // the speed uncertainty (likewise for the heading pair)
    let cov = Matrix4::new(
        sp, sp, 0.0, 0.0, //
        sp, sp + sv, 0.0, 0.0, //
        0.0, 0.0, st, st, //
        0.0, 0.0, st, st + so,
    );
    let segments = graph
        .iter()
        .map(|seg| {
            let n = ((seg.length / config.component_spacing).floor() as usize).max(1);
            let components = (0..n)
                .map(|i| {
                    let d = seg.length * (i as f64 + 0.5) / n as f64;
                    Component {
                        pi: 1.0 / n as f64,
                        mean: Vector4::new(d, d - config.init_speed * config.dt, 0.0, 0.0),
                        cov,
                    }
                })
                .collect();
            SegmentMixture { weight: seg.length / total, components }
        })
        .collect();
    Ok(Posterior { t: 0.0, segments })
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Probability of leaving segment `u` this step for a component whose mean
/// is `s`, plus the per-successor share. Dead ends never leave.
pub fn street_transition_probs(
    s: &Vector4<f64>,
    u: SegmentId,
    graph: &RoadGraph,
    config: &FilterConfig,
) -> Result<(f64, f64)> {
    let seg = graph.get(u)?;
    if seg.successors.is_empty() {
        return Ok((0.0, 0.0));
    }
    let step = s[0] - s[1];
    let p_leave = sigmoid((s[0] + step - seg.length) / config.transition_sharpness);
    Ok((p_leave, p_leave / seg.successors.len() as f64))
}

/// Prediction: stay/leave branching, exact reparameterization of leavers onto
/// successors, then linear dynamics with process noise on every branch.
pub fn predict(post: &Posterior, graph: &RoadGraph, config: &FilterConfig) -> Result<Posterior> {
    let a = config.dynamics();
    let mut out: Vec<Vec<(f64, Vector4<f64>, Matrix4<f64>)>> = vec![Vec::new(); post.segments.len()];

    for (i, m) in post.segments.iter().enumerate() {
        if m.weight == 0.0 {
            continue;
        }
        let u = SegmentId(i as u32);
        let seg = graph.get(u)?;
        for c in &m.components {
            let mass = m.weight * c.pi;
            let (p_leave, per_succ) = street_transition_probs(&c.mean, u, graph, config)?;
            if p_leave < 1.0 {
                let mean = a * c.mean;
                let cov = a * c.cov * a.transpose() + config.q;
                out[i].push((mass * (1.0 - p_leave), mean, cov));
            }
            if p_leave > 0.0 {
                for &succ in &seg.successors {
                    let r = graph.reparameterize(u, succ)?;
                    let mean_r = r.apply(&c.mean);
                    let cov_r = r.linear * c.cov * r.linear.transpose();
                    let mean = a * mean_r;
                    let cov = a * cov_r * a.transpose() + config.q;
                    out[succ.index()].push((mass * per_succ, mean, cov));
                }
            }
        }
    }

    let mut segments = Vec::with_capacity(out.len());
    for branches in out {
        let weight: f64 = branches.iter().map(|b| b.0).sum();
        let components = if weight > 0.0 {
            branches
                .into_iter()
                .map(|(mass, mean, cov)| Component { pi: mass / weight, mean, cov })
                .collect()
        } else {
            Vec::new()
        };
        segments.push(SegmentMixture { weight, components });
    }
    let mut post = Posterior { t: post.t + config.dt, segments };
    post.normalize();
    Ok(post)
}

/// One scalar Kalman update in Joseph form. Returns the innovation density.
fn kalman_scalar(
    c: &mut Component,
    h: &Vector4<f64>,
    innovation: f64,
    r: f64,
) -> f64 {
    let s = (h.transpose() * c.cov * h)[(0, 0)] + r;
    let k = c.cov * h / s;
    c.mean += k * innovation;
    let ikh = Matrix4::identity() - k * h.transpose();
    c.cov = ikh * c.cov * ikh.transpose() + k * r * k.transpose();
    c.cov = (c.cov + c.cov.transpose()) * 0.5;
    (-0.5 * innovation * innovation / s).exp() / (2.0 * std::f64::consts::PI * s).sqrt()
}

/// One 2-D Kalman update in Joseph form. Returns the innovation density.
fn kalman_pair(
    c: &mut Component,
    h: &nalgebra::Matrix2x4<f64>,
    innovation: Vector2<f64>,
    r: &Matrix2<f64>,
) -> Result<f64> {
    let s = h * c.cov * h.transpose() + r;
    let det = s.determinant();
    let s_inv = s
        .try_inverse()
        .filter(|_| det > 0.0)
        .ok_or_else(|| Error::BadConfig("odometry innovation covariance is singular".into()))?;
    let k = c.cov * h.transpose() * s_inv;
    c.mean += k * innovation;
    let ikh = Matrix4::identity() - k * h;
    c.cov = ikh * c.cov * ikh.transpose() + k * r * k.transpose();
    c.cov = (c.cov + c.cov.transpose()) * 0.5;
    let maha = (innovation.transpose() * s_inv * innovation)[(0, 0)];
    Ok((-0.5 * maha).exp() / (2.0 * std::f64::consts::PI * det.sqrt()))
}

/// Measurement update. Discrete cues rescale segment weights; Gaussian cues
/// run conjugate updates on every component, scaling mixture weights by the
/// marginal innovation density. Returns the posterior and the frame's
/// marginal log-likelihood. All mass annihilated is a divergence error.
pub fn update(
    post: &Posterior,
    y: &ObservationFrame,
    graph: &RoadGraph,
    sun: Option<&SunPosition>,
    nm: &NoiseModel,
) -> Result<(Posterior, f64)> {
    let mut segments = Vec::with_capacity(post.segments.len());
    let sun_active = sun.filter(|s| s.is_daytime());

    for (i, m) in post.segments.iter().enumerate() {
        if m.weight == 0.0 {
            segments.push(SegmentMixture::default());
            continue;
        }
        let u = SegmentId(i as u32);
        let seg = graph.get(u)?;

        let mut discrete = 1.0;
        if let Some(i_obs) = y.inter {
            discrete *= intersection_likelihood(i_obs, u, graph, nm)?;
        }
        if let Some(r_obs) = y.rtype {
            discrete *= road_type_likelihood(r_obs, u, graph, nm)?;
        }
        if let Some(v) = y.velocity {
            discrete *= speed_likelihood(v, u, graph, nm)?;
        }

        let mut components = Vec::with_capacity(m.components.len());
        let mut evidence = 0.0;
        for c in &m.components {
            let mut c = c.clone();
            let mut lik = 1.0;
            if let Some(o) = y.odom {
                let h = odometry_matrix(seg);
                let mean = h * c.mean;
                let cov = nm.odom_cov(seg.road_type);
                let innov = Vector2::new(o[0] - mean[0], wrap_to_pi(o[1] - mean[1]));
                lik *= kalman_pair(&mut c, &h, innov, cov)?;
            }
            if let (Some(phi), Some(sun)) = (y.phi, sun_active) {
                let (h, offset) = sun_observation_row(seg, sun);
                let predicted = h.dot(&c.mean) + offset;
                let innov = wrap_to_pi(phi - predicted);
                lik *= kalman_scalar(&mut c, &h, innov, nm.sigma_sun);
            }
            c.pi *= lik;
            evidence += c.pi;
            components.push(c);
        }

        let weight = m.weight * discrete * evidence;
        if weight > 0.0 && evidence > 0.0 {
            for c in &mut components {
                c.pi /= evidence;
            }
            segments.push(SegmentMixture { weight, components });
        } else {
            segments.push(SegmentMixture::default());
        }
    }

    let mut out = Posterior { t: post.t, segments };
    let z = out.normalize();
    if z < 1e-300 {
        return Err(Error::Diverged { t: post.t });
    }
    Ok((out, z.ln()))
}

/// Symmetric Mahalanobis distance used for merge decisions.
fn merge_distance(a: &Component, b: &Component) -> f64 {
    let d = a.mean - b.mean;
    let inv_a = a.cov.try_inverse().unwrap_or_else(Matrix4::zeros);
    let inv_b = b.cov.try_inverse().unwrap_or_else(Matrix4::zeros);
    (0.5 * (d.transpose() * (inv_a + inv_b) * d)[(0, 0)]).max(0.0).sqrt()
}

/// Moment-matched combination of components weighted by global mass.
fn moment_match(parts: &[(f64, &Component)]) -> Component {
    let mass: f64 = parts.iter().map(|(m, _)| m).sum();
    let mut mean = Vector4::zeros();
    for (m, c) in parts {
        mean += c.mean * (*m / mass);
    }
    let mut cov = Matrix4::zeros();
    for (m, c) in parts {
        let d = c.mean - mean;
        cov += (c.cov + d * d.transpose()) * (*m / mass);
    }
    Component { pi: mass, mean, cov }
}

/// Reduce each segment's mixture: drop negligible components, merge close
/// pairs (moment matching), and cap the component count, folding the
/// remainder into the last kept slot. Total mass is preserved up to the
/// pruned amount, which is renormalized away.
pub fn merge_prune(post: &Posterior, config: &FilterConfig) -> Posterior {
    let mut segments = Vec::with_capacity(post.segments.len());
    for m in &post.segments {
        if m.weight == 0.0 {
            segments.push(SegmentMixture::default());
            continue;
        }
        // global-mass representation
        let mut comps: Vec<Component> = m
            .components
            .iter()
            .filter(|c| m.weight * c.pi >= config.prune_weight)
            .map(|c| Component { pi: m.weight * c.pi, mean: c.mean, cov: c.cov })
            .collect();

        // greedy pairwise merging below the distance threshold
        loop {
            if comps.len() < 2 {
                break;
            }
            let mut best = (f64::INFINITY, 0, 0);
            for i in 0..comps.len() {
                for j in (i + 1)..comps.len() {
                    let d = merge_distance(&comps[i], &comps[j]);
                    if d < best.0 {
                        best = (d, i, j);
                    }
                }
            }
            if best.0 >= config.merge_mahalanobis {
                break;
            }
            let (_, i, j) = best;
            let merged = moment_match(&[(comps[i].pi, &comps[i]), (comps[j].pi, &comps[j])]);
            comps[i] = merged;
            comps.remove(j);
        }

        // cap: keep the heaviest, moment-match the tail into the last slot
        if comps.len() > config.max_components_per_segment {
            comps.sort_by(|a, b| b.pi.partial_cmp(&a.pi).unwrap_or(std::cmp::Ordering::Equal));
            let keep = config.max_components_per_segment;
            let tail: Vec<(f64, &Component)> =
                comps[keep - 1..].iter().map(|c| (c.pi, c)).collect();
            let folded = moment_match(&tail);
            comps.truncate(keep - 1);
            comps.push(folded);
        }

        let weight: f64 = comps.iter().map(|c| c.pi).sum();
        if weight > 0.0 {
            for c in &mut comps {
                c.pi /= weight;
            }
            segments.push(SegmentMixture { weight, components: comps });
        } else {
            segments.push(SegmentMixture::default());
        }
    }
    let mut out = Posterior { t: post.t, segments };
    out.normalize();
    out
}

/// One full filter step: predict, update, reduce. Returns the new posterior
/// and the frame's marginal log-likelihood.
pub fn step(
    post: &Posterior,
    y: &ObservationFrame,
    graph: &RoadGraph,
    sun: Option<&SunPosition>,
    nm: &NoiseModel,
    config: &FilterConfig,
) -> Result<(Posterior, f64)> {
    let predicted = predict(post, graph, config)?;
    let (updated, log_z) = update(&predicted, y, graph, sun, nm)?;
    Ok((merge_prune(&updated, config), log_z))
}

/// A cluster of posterior mass at a map location.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mode {
    pub position: [f64; 2],
    pub mass: f64,
}

/// Cluster the posterior's probability mass by map position: greedily seed at
/// the heaviest unassigned component and absorb everything within `radius`
/// meters (straight-line). Returns modes sorted by mass, heaviest first.
pub fn mode_analysis(post: &Posterior, graph: &RoadGraph, radius: f64) -> Result<Vec<Mode>> {
    let mut atoms: Vec<(f64, [f64; 2])> = Vec::new();
    for (i, m) in post.segments.iter().enumerate() {
        if m.weight == 0.0 {
            continue;
        }
        let seg = graph.get(SegmentId(i as u32))?;
        for c in &m.components {
            let d = c.mean[0].clamp(0.0, seg.length);
            atoms.push((m.weight * c.pi, seg.point_at_unchecked(d)));
        }
    }
    Ok(cluster_modes(atoms, radius))
}

/// Greedy agglomeration of (mass, position) atoms: heaviest unclaimed atom
/// seeds a mode and absorbs everything within `radius` of it.
pub fn cluster_modes(mut atoms: Vec<(f64, [f64; 2])>, radius: f64) -> Vec<Mode> {
    // deterministic greedy order: mass descending, position as tiebreak
    atoms.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1[0].partial_cmp(&b.1[0]).unwrap_or(std::cmp::Ordering::Equal))
            .then(a.1[1].partial_cmp(&b.1[1]).unwrap_or(std::cmp::Ordering::Equal))
    });

    let mut assigned = vec![false; atoms.len()];
    let mut modes = Vec::new();
    for i in 0..atoms.len() {
        if assigned[i] {
            continue;
        }
        let seed = atoms[i].1;
        let mut mass = 0.0;
        let mut centroid = [0.0, 0.0];
        for (j, atom) in atoms.iter().enumerate() {
            if assigned[j] {
                continue;
            }
            let dx = atom.1[0] - seed[0];
            let dy = atom.1[1] - seed[1];
            if (dx * dx + dy * dy).sqrt() <= radius {
                assigned[j] = true;
                mass += atom.0;
                centroid[0] += atom.0 * atom.1[0];
                centroid[1] += atom.0 * atom.1[1];
            }
        }
        modes.push(Mode {
            position: [centroid[0] / mass, centroid[1] / mass],
            mass,
        });
    }
    modes.sort_by(|a, b| b.mass.partial_cmp(&a.mass).unwrap_or(std::cmp::Ordering::Equal));
    modes
}

/// Rolling single-mode test with latching: localized once the top mode has
/// held at least `dominance` of the mass for `window` consecutive frames,
/// and forever after.
#[derive(Debug, Clone)]
pub struct LocalizationTracker {
    window: usize,
    dominance: f64,
    streak: usize,
    latched: bool,
}

impl Default for LocalizationTracker {
    fn default() -> Self {
        Self::new(10, 0.95)
    }
}

impl LocalizationTracker {
    pub fn new(window: usize, dominance: f64) -> Self {
        Self { window, dominance, streak: 0, latched: false }
    }

    /// Feed one frame's modes; returns the localized flag after this frame.
    pub fn push(&mut self, modes: &[Mode]) -> bool {
        let single = modes.first().map(|m| m.mass >= self.dominance).unwrap_or(false);
        self.streak = if single { self.streak + 1 } else { 0 };
        if self.streak >= self.window {
            self.latched = true;
        }
        self.latched
    }

    pub fn is_localized(&self) -> bool {
        self.latched
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::observation::IntersectionObs;
    use crate::road_map::{connect_by_endpoints, RoadType, StreetSegment, CONNECT_TOL};
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    fn line(id: u32, p0: [f64; 2], beta: f64, length: f64, speed: f64, rt: RoadType) -> StreetSegment {
        StreetSegment::new_line(SegmentId(id), p0, beta, length, speed, rt)
    }

    fn lone_segment(length: f64) -> RoadGraph {
        RoadGraph::new(
            vec![line(0, [0.0, 0.0], 0.0, length, 50.0, RoadType::NonHighway)],
            [49.0, 8.4],
        )
        .unwrap()
    }

    #[test]
    fn init_weights_proportional_to_length() {
        let cfg = FilterConfig::default();
        let g = RoadGraph::new(
            vec![
                line(0, [0.0, 0.0], 0.0, 30.0, 50.0, RoadType::NonHighway),
                line(1, [0.0, 10.0], 0.0, 10.0, 50.0, RoadType::NonHighway),
            ],
            [0.0, 0.0],
        )
        .unwrap();
        let p = init_uniform(&g, &cfg).unwrap();
        assert_abs_diff_eq!(p.segments[0].weight, 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(p.segments[1].weight, 0.25, epsilon = 1e-12);
        p.check().unwrap();

        let g = RoadGraph::new(
            vec![
                line(0, [0.0, 0.0], 0.0, 40.0, 50.0, RoadType::NonHighway),
                line(1, [0.0, 10.0], 0.0, 40.0, 50.0, RoadType::NonHighway),
            ],
            [0.0, 0.0],
        )
        .unwrap();
        let p = init_uniform(&g, &cfg).unwrap();
        assert_abs_diff_eq!(p.segments[0].weight, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn init_component_layout() {
        let cfg = FilterConfig::default();
        let g = lone_segment(100.0);
        let p = init_uniform(&g, &cfg).unwrap();
        let comps = &p.segments[0].components;
        assert_eq!(comps.len(), 5);
        for (i, c) in comps.iter().enumerate() {
            assert_abs_diff_eq!(c.pi, 0.2, epsilon = 1e-12);
            assert_abs_diff_eq!(c.mean[0], 20.0 * i as f64 + 10.0, epsilon = 1e-12);
            assert_abs_diff_eq!(c.mean[1], c.mean[0] - cfg.init_speed * cfg.dt, epsilon = 1e-12);
        }
        // short segment still gets one component
        let p = init_uniform(&lone_segment(7.0), &cfg).unwrap();
        assert_eq!(p.segments[0].components.len(), 1);
        assert_abs_diff_eq!(p.segments[0].components[0].mean[0], 3.5, epsilon = 1e-12);
    }

    #[test]
    fn transition_sigmoid_examples() {
        let cfg = FilterConfig::default();
        let mut a = line(0, [0.0, 0.0], 0.0, 100.0, 50.0, RoadType::NonHighway);
        let b = line(1, [100.0, 0.0], 0.0, 50.0, 50.0, RoadType::NonHighway);
        let c = line(2, [100.0, 0.0], PI / 2.0, 50.0, 50.0, RoadType::NonHighway);
        a.successors = vec![SegmentId(1), SegmentId(2)];
        let mut b2 = b.clone();
        b2.predecessors = vec![SegmentId(0)];
        let mut c2 = c.clone();
        c2.predecessors = vec![SegmentId(0)];
        let g = RoadGraph::new(vec![a, b2, c2], [0.0, 0.0]).unwrap();

        // d + step lands exactly on the end: sigmoid midpoint
        let s = Vector4::new(95.0, 90.0, 0.0, 0.0);
        let (p, per) = street_transition_probs(&s, SegmentId(0), &g, &cfg).unwrap();
        assert_abs_diff_eq!(p, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(per, 0.25, epsilon = 1e-12);

        // ten sharpness-lengths short of the end: deep in the stay tail
        let s = Vector4::new(45.0, 40.0, 0.0, 0.0);
        let (p, _) = street_transition_probs(&s, SegmentId(0), &g, &cfg).unwrap();
        assert!((p - 4.5e-5).abs() < 1e-5, "{p}");

        // dead end: never leaves
        let (p, per) = street_transition_probs(&s, SegmentId(1), &g, &cfg).unwrap();
        assert_eq!((p, per), (0.0, 0.0));
    }

    #[test]
    fn predict_is_linear_gaussian_far_from_junctions() {
        let mut cfg = FilterConfig::default();
        cfg.q = Matrix4::from_diagonal(&Vector4::new(1e-12, 1e-12, 1e-12, 1e-12));
        let g = lone_segment(10_000.0);
        let mut p = init_uniform(&g, &cfg).unwrap();
        // collapse to one known component mid-segment
        let mean = Vector4::new(5000.0, 4994.0, 0.02, 0.01);
        let cov = Matrix4::from_diagonal(&Vector4::new(4.0, 4.0, 0.01, 0.01));
        p.segments[0].components = vec![Component { pi: 1.0, mean, cov }];

        let out = predict(&p, &g, &cfg).unwrap();
        let c = &out.segments[0].components[0];
        let a = cfg.dynamics();
        assert_abs_diff_eq!(c.mean[0], 5006.0, epsilon = 1e-9);
        assert_abs_diff_eq!(c.mean[1], 5000.0, epsilon = 1e-9);
        assert_abs_diff_eq!(c.mean[2], 0.02 + 0.5 * 0.01, epsilon = 1e-12);
        assert_abs_diff_eq!(c.mean[3], 0.02, epsilon = 1e-12);
        let expect = a * cov * a.transpose() + cfg.q;
        assert!((c.cov - expect).norm() < 1e-9);
        out.check().unwrap();
    }

    #[test]
    fn predict_conserves_mass_across_junctions() {
        let mut a = line(0, [0.0, 0.0], 0.0, 50.0, 50.0, RoadType::NonHighway);
        let b = line(1, [50.0, 0.0], 0.0, 50.0, 50.0, RoadType::NonHighway);
        let c = line(2, [50.0, 0.0], PI / 2.0, 50.0, 50.0, RoadType::NonHighway);
        a.successors = vec![SegmentId(1), SegmentId(2)];
        let mut b = b;
        b.predecessors = vec![SegmentId(0)];
        let mut c = c;
        c.predecessors = vec![SegmentId(0)];
        let g = RoadGraph::new(vec![a, b, c], [0.0, 0.0]).unwrap();
        let cfg = FilterConfig::default();

        let mut p = init_uniform(&g, &cfg).unwrap();
        // put a straddling component right at the junction
        p.segments[0].components = vec![Component {
            pi: 1.0,
            mean: Vector4::new(48.0, 43.0, 0.0, 0.0),
            cov: Matrix4::from_diagonal(&Vector4::new(4.0, 4.0, 0.01, 0.01)),
        }];
        p.segments[0].weight = 1.0;
        p.segments[1] = SegmentMixture::default();
        p.segments[2] = SegmentMixture::default();

        let out = predict(&p, &g, &cfg).unwrap();
        let total: f64 = out.segments.iter().map(|m| m.weight).sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
        assert!(out.segments[1].weight > 0.1);
        assert_abs_diff_eq!(out.segments[1].weight, out.segments[2].weight, epsilon = 1e-12);
        // the reparameterized leavers start near d = 0 on the successors
        let d_new = out.segments[1].components[0].mean[0];
        assert!((0.0..10.0).contains(&d_new), "{d_new}");
        out.check().unwrap();
    }

    #[test]
    fn update_discrete_reweighting() {
        let g = RoadGraph::new(
            vec![
                line(0, [0.0, 0.0], 0.0, 50.0, 100.0, RoadType::Highway),
                line(1, [0.0, 10.0], 0.0, 50.0, 50.0, RoadType::NonHighway),
            ],
            [0.0, 0.0],
        )
        .unwrap();
        let cfg = FilterConfig::default();
        let nm = NoiseModel::default();
        let mut p = init_uniform(&g, &cfg).unwrap();
        p.segments[0].weight = 0.5;
        p.segments[1].weight = 0.5;

        let y = ObservationFrame {
            rtype: Some(RoadType::Highway),
            ..Default::default()
        };
        let (out, log_z) = update(&p, &y, &g, None, &nm).unwrap();
        assert_abs_diff_eq!(out.segments[0].weight, 0.9, epsilon = 1e-12);
        assert_abs_diff_eq!(out.segments[1].weight, 0.1, epsilon = 1e-12);
        // z = 0.5*0.9 + 0.5*0.1 = 0.5
        assert_abs_diff_eq!(log_z, 0.5f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn update_with_empty_frame_is_identity() {
        let g = lone_segment(100.0);
        let cfg = FilterConfig::default();
        let nm = NoiseModel::default();
        let p = init_uniform(&g, &cfg).unwrap();
        let y = ObservationFrame::default();
        let (out, log_z) = update(&p, &y, &g, None, &nm).unwrap();
        assert_eq!(out, p);
        assert_abs_diff_eq!(log_z, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn update_matches_reference_kalman_filter() {
        // dead-end segment: transitions vanish, the filter is exactly linear
        let g = lone_segment(100_000.0);
        let mut cfg = FilterConfig::default();
        cfg.prune_weight = 0.0;
        let nm = NoiseModel::default();

        let mean0 = Vector4::new(50_000.0, 49_995.0, 0.0, 0.0);
        let cov0 = Matrix4::from_diagonal(&Vector4::new(25.0, 26.0, 0.04, 0.05));
        let mut post = Posterior {
            t: 0.0,
            segments: vec![SegmentMixture {
                weight: 1.0,
                components: vec![Component { pi: 1.0, mean: mean0, cov: cov0 }],
            }],
        };

        // reference filter state
        let mut mean_ref = mean0;
        let mut cov_ref = cov0;
        let a = cfg.dynamics();
        let seg = g.get(SegmentId(0)).unwrap();
        let h = odometry_matrix(seg);
        let r = *nm.odom_cov(RoadType::NonHighway);

        for k in 0..10 {
            let z = Vector2::new(5.0 + 0.1 * k as f64, 0.001 * k as f64);
            let y = ObservationFrame { t: k as f64, odom: Some([z[0], z[1]]), ..Default::default() };
            post = predict(&post, &g, &cfg).unwrap();
            let (updated, _) = update(&post, &y, &g, None, &nm).unwrap();
            post = updated;

            mean_ref = a * mean_ref;
            cov_ref = a * cov_ref * a.transpose() + cfg.q;
            let s = h * cov_ref * h.transpose() + r;
            let kk = cov_ref * h.transpose() * s.try_inverse().unwrap();
            mean_ref += kk * (z - h * mean_ref);
            let ikh = Matrix4::identity() - kk * h;
            cov_ref = ikh * cov_ref * ikh.transpose() + kk * r * kk.transpose();

            let c = &post.segments[0].components[0];
            assert!((c.mean - mean_ref).norm() < 1e-6, "step {k}");
            assert!((c.cov - cov_ref).norm() < 1e-6, "step {k}");
        }
    }

    #[test]
    fn update_annihilation_is_divergence() {
        let g = lone_segment(100.0);
        let cfg = FilterConfig::default();
        let nm = NoiseModel::default();
        let p = init_uniform(&g, &cfg).unwrap();
        let y = ObservationFrame { odom: Some([1e7, 0.0]), ..Default::default() };
        assert!(matches!(update(&p, &y, &g, None, &nm), Err(Error::Diverged { .. })));
    }

    #[test]
    fn constant_likelihood_leaves_posterior_unchanged() {
        // same speed limit everywhere: the velocity cue is uninformative
        let g = RoadGraph::new(
            vec![
                line(0, [0.0, 0.0], 0.0, 60.0, 50.0, RoadType::NonHighway),
                line(1, [0.0, 10.0], 1.0, 40.0, 50.0, RoadType::NonHighway),
            ],
            [0.0, 0.0],
        )
        .unwrap();
        let cfg = FilterConfig::default();
        let nm = NoiseModel::default();
        let p = init_uniform(&g, &cfg).unwrap();
        let y = ObservationFrame { velocity: Some(40.0), ..Default::default() };
        let (out, _) = update(&p, &y, &g, None, &nm).unwrap();
        for (a, b) in out.segments.iter().zip(&p.segments) {
            assert_abs_diff_eq!(a.weight, b.weight, epsilon = 1e-12);
        }
    }

    #[test]
    fn merge_identical_components() {
        let cfg = FilterConfig::default();
        let c = Component {
            pi: 0.5,
            mean: Vector4::new(10.0, 5.0, 0.0, 0.0),
            cov: Matrix4::from_diagonal(&Vector4::new(1.0, 1.0, 0.01, 0.01)),
        };
        let post = Posterior {
            t: 0.0,
            segments: vec![SegmentMixture { weight: 1.0, components: vec![c.clone(), c.clone()] }],
        };
        let out = merge_prune(&post, &cfg);
        assert_eq!(out.segments[0].components.len(), 1);
        let m = &out.segments[0].components[0];
        assert_abs_diff_eq!(m.pi, 1.0, epsilon = 1e-12);
        assert!((m.mean - c.mean).norm() < 1e-12);
        assert!((m.cov - c.cov).norm() < 1e-12);
    }

    #[test]
    fn prune_drops_negligible_mass() {
        let cfg = FilterConfig::default();
        let mk = |pi: f64, d: f64| Component {
            pi,
            mean: Vector4::new(d, d - 5.0, 0.0, 0.0),
            cov: Matrix4::from_diagonal(&Vector4::new(0.01, 0.01, 1e-4, 1e-4)),
        };
        let post = Posterior {
            t: 0.0,
            segments: vec![SegmentMixture {
                weight: 1.0,
                components: vec![mk(1.0 - 1e-9, 10.0), mk(1e-9, 90.0)],
            }],
        };
        let out = merge_prune(&post, &cfg);
        assert_eq!(out.segments[0].components.len(), 1);
        assert_abs_diff_eq!(out.segments[0].weight, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(out.segments[0].components[0].pi, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn cap_preserves_mixture_moments() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut cfg = FilterConfig::default();
        cfg.merge_mahalanobis = 0.0; // isolate the capping path
        cfg.prune_weight = 0.0;

        let mut comps = Vec::new();
        for _ in 0..10 {
            comps.push(Component {
                pi: rng.gen_range(0.01..1.0),
                mean: Vector4::new(
                    rng.gen_range(0.0..2000.0),
                    rng.gen_range(0.0..2000.0),
                    rng.gen_range(-0.3..0.3),
                    rng.gen_range(-0.3..0.3),
                ),
                cov: Matrix4::from_diagonal(&Vector4::new(
                    rng.gen_range(0.5..2.0),
                    rng.gen_range(0.5..2.0),
                    rng.gen_range(0.001..0.01),
                    rng.gen_range(0.001..0.01),
                )),
            });
        }
        let total: f64 = comps.iter().map(|c| c.pi).sum();
        for c in &mut comps {
            c.pi /= total;
        }
        let mean_in: Vector4<f64> = comps.iter().map(|c| c.mean * c.pi).sum();

        let post = Posterior {
            t: 0.0,
            segments: vec![SegmentMixture { weight: 1.0, components: comps }],
        };
        let out = merge_prune(&post, &cfg);
        assert_eq!(out.segments[0].components.len(), 4);
        let mean_out: Vector4<f64> = out.segments[0]
            .components
            .iter()
            .map(|c| c.mean * c.pi)
            .sum();
        assert!((mean_in - mean_out).norm() < 1e-9, "{}", (mean_in - mean_out).norm());
        out.check().unwrap();
    }

    #[test]
    fn step_composes_the_three_stages() {
        let g = lone_segment(200.0);
        let cfg = FilterConfig::default();
        let nm = NoiseModel::default();
        let p = init_uniform(&g, &cfg).unwrap();
        let y = ObservationFrame { t: 1.0, odom: Some([5.0, 0.0]), ..Default::default() };

        let (direct, lz) = step(&p, &y, &g, None, &nm, &cfg).unwrap();
        let predicted = predict(&p, &g, &cfg).unwrap();
        let (updated, lz2) = update(&predicted, &y, &g, None, &nm).unwrap();
        let reduced = merge_prune(&updated, &cfg);
        assert_eq!(direct, reduced);
        assert_eq!(lz, lz2);
        direct.check().unwrap();
    }

    #[test]
    fn diffusion_never_sharpens_street_marginal() {
        // square one-way loop of identical segments
        let l = 100.0;
        let mut segs = vec![
            StreetSegment::new_line(SegmentId(0), [0.0, 0.0], 0.0, l, 50.0, RoadType::NonHighway),
            StreetSegment::new_line(SegmentId(1), [l, 0.0], PI / 2.0, l, 50.0, RoadType::NonHighway),
            StreetSegment::new_line(SegmentId(2), [l, l], PI, l, 50.0, RoadType::NonHighway),
            StreetSegment::new_line(SegmentId(3), [0.0, l], -PI / 2.0, l, 50.0, RoadType::NonHighway),
        ];
        connect_by_endpoints(&mut segs, CONNECT_TOL, false);
        let g = RoadGraph::new(segs, [0.0, 0.0]).unwrap();
        assert_eq!(g.get(SegmentId(0)).unwrap().successors, vec![SegmentId(1)]);
        let mut cfg = FilterConfig::default();
        cfg.prune_weight = 0.0; // keep the marginal flow exactly mass-conserving
        cfg.init_speed = 5.0;
        let nm = NoiseModel::default();
        let y = ObservationFrame::default();

        let entropy = |p: &Posterior| -> f64 {
            p.street_marginal()
                .iter()
                .filter(|&&w| w > 0.0)
                .map(|w| -w * w.ln())
                .sum()
        };

        // the length-proportional prior is the flow's symmetric fixed point:
        // empty steps must leave the marginal pinned at maximum entropy
        let mut p = init_uniform(&g, &cfg).unwrap();
        let h_max = 4.0f64.ln();
        for _ in 0..30 {
            let (next, _) = step(&p, &y, &g, None, &nm, &cfg).unwrap();
            assert_abs_diff_eq!(entropy(&next), h_max, epsilon = 1e-9);
            p = next;
        }

        // a concentrated prior spreads monotonically while it disperses onto
        // the next street (a coherent packet re-concentrates once it has
        // fully crossed a junction, so the window ends there)
        let mut p = init_uniform(&g, &cfg).unwrap();
        for (i, m) in p.segments.iter_mut().enumerate() {
            m.weight = if i == 0 { 1.0 } else { 0.0 };
            if i != 0 {
                m.components.clear();
            }
        }
        let mut last = entropy(&p);
        for _ in 0..8 {
            let (next, _) = step(&p, &y, &g, None, &nm, &cfg).unwrap();
            let e = entropy(&next);
            assert!(e >= last - 1e-9, "entropy decreased: {last} -> {e}");
            last = e;
            p = next;
        }
        assert!(last > 0.6, "marginal failed to spread: {last}");
    }

    #[test]
    fn modes_cluster_by_distance() {
        let g = RoadGraph::new(
            vec![
                line(0, [0.0, 0.0], 0.0, 100.0, 50.0, RoadType::NonHighway),
                line(1, [2000.0, 0.0], 0.0, 100.0, 50.0, RoadType::NonHighway),
            ],
            [0.0, 0.0],
        )
        .unwrap();
        let cfg = FilterConfig::default();
        let mut p = init_uniform(&g, &cfg).unwrap();

        // all mass on one segment
        p.segments[0].weight = 1.0;
        p.segments[1].weight = 0.0;
        p.segments[1].components.clear();
        let modes = mode_analysis(&p, &g, 200.0).unwrap();
        assert_eq!(modes.len(), 1);
        assert_abs_diff_eq!(modes[0].mass, 1.0, epsilon = 1e-12);

        // two clusters 2 km apart
        let mut p2 = init_uniform(&g, &cfg).unwrap();
        p2.segments[0].weight = 0.5;
        p2.segments[1].weight = 0.5;
        let modes = mode_analysis(&p2, &g, 200.0).unwrap();
        assert_eq!(modes.len(), 2);
        assert_abs_diff_eq!(modes[0].mass, 0.5, epsilon = 1e-12);

        // asymmetric split sorts heaviest first
        let mut p3 = init_uniform(&g, &cfg).unwrap();
        p3.segments[0].weight = 0.01;
        p3.segments[1].weight = 0.99;
        let modes = mode_analysis(&p3, &g, 200.0).unwrap();
        assert_abs_diff_eq!(modes[0].mass, 0.99, epsilon = 1e-12);
        assert_abs_diff_eq!(modes[1].mass, 0.01, epsilon = 1e-12);
        assert!(modes[0].position[0] > 1000.0);
    }

    #[test]
    fn localization_latch() {
        let single = vec![Mode { position: [0.0, 0.0], mass: 0.99 }];
        let split = vec![
            Mode { position: [0.0, 0.0], mass: 0.5 },
            Mode { position: [500.0, 0.0], mass: 0.5 },
        ];

        let mut t = LocalizationTracker::default();
        for _ in 0..9 {
            assert!(!t.push(&single));
        }
        assert!(t.push(&single)); // 10th frame

        // broken streak never localizes
        let mut t = LocalizationTracker::default();
        for _ in 0..9 {
            t.push(&single);
        }
        assert!(!t.push(&split));
        assert!(!t.is_localized());

        // latched stays true through later ambiguity
        let mut t = LocalizationTracker::default();
        for _ in 0..10 {
            t.push(&single);
        }
        assert!(t.push(&split));
        assert!(t.is_localized());
    }

    #[test]
    fn rotating_map_and_sun_changes_nothing() {
        // rotate every segment and the sun's compass azimuth by the same
        // angle: all posterior numbers must be identical
        let delta = 0.7;
        let build = |rot: f64| -> RoadGraph {
            let r = |p: [f64; 2]| {
                [p[0] * rot.cos() - p[1] * rot.sin(), p[0] * rot.sin() + p[1] * rot.cos()]
            };
            let mut a = StreetSegment::new_line(SegmentId(0), r([0.0, 0.0]), wrap_to_pi(0.3 + rot), 80.0, 50.0, RoadType::NonHighway);
            let b = StreetSegment::new_line(SegmentId(1), a.p1, wrap_to_pi(1.1 + rot), 60.0, 50.0, RoadType::NonHighway);
            a.successors = vec![SegmentId(1)];
            let mut b = b;
            b.predecessors = vec![SegmentId(0)];
            RoadGraph::new(vec![a, b], [49.0, 8.4]).unwrap()
        };
        let g1 = build(0.0);
        let g2 = build(delta);
        let cfg = FilterConfig::default();
        let nm = NoiseModel::default();

        let sun1 = SunPosition { azimuth: 1.9, elevation: 0.4, timestamp: 0.0 };
        // map-frame azimuth must rotate with the map: compass azimuth drops by delta
        let sun2 = SunPosition { azimuth: 1.9 - delta, elevation: 0.4, timestamp: 0.0 };

        let mut p1 = init_uniform(&g1, &cfg).unwrap();
        let mut p2 = init_uniform(&g2, &cfg).unwrap();
        for k in 0..20 {
            let y = ObservationFrame {
                t: k as f64,
                odom: Some([6.0, 0.01]),
                phi: Some(0.3 + 0.01 * k as f64),
                inter: Some(IntersectionObs::NotVisible),
                velocity: Some(30.0),
                ..Default::default()
            };
            let (n1, z1) = step(&p1, &y, &g1, Some(&sun1), &nm, &cfg).unwrap();
            let (n2, z2) = step(&p2, &y, &g2, Some(&sun2), &nm, &cfg).unwrap();
            assert_abs_diff_eq!(z1, z2, epsilon = 1e-9);
            for (m1, m2) in n1.segments.iter().zip(&n2.segments) {
                assert_abs_diff_eq!(m1.weight, m2.weight, epsilon = 1e-9);
                for (c1, c2) in m1.components.iter().zip(&m2.components) {
                    assert_abs_diff_eq!(c1.pi, c2.pi, epsilon = 1e-9);
                    assert!((c1.mean - c2.mean).norm() < 1e-9);
                }
            }
            p1 = n1;
            p2 = n2;
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = FilterConfig::default();
        cfg.dt = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = FilterConfig::default();
        cfg.q = Matrix4::zeros();
        assert!(cfg.validate().is_err());
        assert!(FilterConfig::default().validate().is_ok());
    }

    #[test]
    fn shifted_state_on_a_straight_street_is_unobservable() {
        // both observation rows are differences along the street, so a rigid
        // 500 m shift of (d, d_prev) changes no likelihood term
        let g = lone_segment(900.0);
        let seg = g.get(SegmentId(0)).unwrap();
        let shift = Vector4::new(500.0, 500.0, 0.0, 0.0);
        let h = odometry_matrix(seg);
        assert!((h * shift).norm() < 1e-12);
        let sun = SunPosition { azimuth: 2.0, elevation: 0.5, timestamp: 0.0 };
        let (hs, _) = sun_observation_row(seg, &sun);
        assert!(hs.dot(&shift).abs() < 1e-12);
    }

    #[test]
    fn posterior_check_catches_violations() {
        let g = lone_segment(100.0);
        let cfg = FilterConfig::default();
        let mut p = init_uniform(&g, &cfg).unwrap();
        p.segments[0].weight = 0.7;
        assert!(p.check().is_err());

        let mut p = init_uniform(&g, &cfg).unwrap();
        p.segments[0].components[0].cov = Matrix4::zeros();
        assert!(p.check().is_err());
    }
}
