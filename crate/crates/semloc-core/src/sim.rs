//! Synthetic maps, ground-truth drives, and noisy observation streams.
//!
//! The generators here stand in for real sensor pipelines: a route is driven
//! at a fraction of each street's speed limit, and every frame is turned into
//! the same observation tuple a perception stack would produce — noisy
//! odometry, a relative sun angle when the sun is up, flip-corrupted
//! intersection and road-type labels, and the (noise-free) speed readout.

use nalgebra::{Matrix2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::angles::wrap_to_pi;
use crate::error::{Error, Result};
use crate::observation::{mat2, IntersectionObs, ObservationFrame};
use crate::road_map::{
    connect_by_endpoints, partition_for_intersections, IntersectionClass, MapPose, RoadGraph,
    RoadType, SegmentId, StreetSegment, CONNECT_TOL, INTERSECTION_FAR, INTERSECTION_NEAR,
};
use crate::solar::{map_frame_azimuth, sun_position};

pub const KMH_TO_MPS: f64 = 1.0 / 3.6;

/// When the simulated sun sensor produces a reading (it is always absent
/// while the sun is below the horizon).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SunAvailability {
    Always,
    Never,
    /// Active only between these UTC hours of day, e.g. 8.0 to 16.0.
    Schedule { start_hour_utc: f64, end_hour_utc: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub seed: u64,
    /// Frames per second of simulated driving.
    pub frame_rate: f64,
    /// Covariance of additive odometry noise over (distance m, heading rad).
    #[serde(with = "mat2")]
    pub odom_noise: Matrix2<f64>,
    /// Variance of additive sun-direction noise, rad^2.
    pub sun_noise: f64,
    /// Probability that the emitted intersection label is the wrong one.
    pub inter_flip_prob: f64,
    /// Probability that the emitted road-type label is the wrong one.
    pub rtype_flip_prob: f64,
    /// Driving speed as a fraction of each street's speed limit.
    pub speed_fraction: f64,
    pub sun: SunAvailability,
    /// Geographic anchor of the map frame (degrees).
    pub origin_lat: f64,
    pub origin_lon: f64,
    /// Wall-clock start of the drive, ISO 8601.
    pub start_utc: String,
    /// Length of automatically generated routes, meters.
    #[serde(default = "default_route_target")]
    pub route_target_m: f64,
}

fn default_route_target() -> f64 {
    1500.0
}

impl Default for SimConfig {
    fn default() -> Self {
        let deg = std::f64::consts::PI / 180.0;
        Self {
            seed: 1,
            frame_rate: 1.0,
            odom_noise: Matrix2::new(0.36, 0.0, 0.0, (1.0 * deg) * (1.0 * deg)),
            sun_noise: (5.0 * deg) * (5.0 * deg),
            inter_flip_prob: 0.2,
            rtype_flip_prob: 0.1,
            speed_fraction: 0.85,
            sun: SunAvailability::Always,
            origin_lat: 49.0069,
            origin_lon: 8.4037,
            start_utc: "2011-09-26T10:00:00Z".into(),
            route_target_m: default_route_target(),
        }
    }
}

impl SimConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: SimConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.frame_rate > 0.0) {
            return Err(Error::BadConfig("frame_rate must be positive".into()));
        }
        for (name, p) in [
            ("inter_flip_prob", self.inter_flip_prob),
            ("rtype_flip_prob", self.rtype_flip_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::BadConfig(format!("{name} must be in [0,1], got {p}")));
            }
        }
        if !(self.speed_fraction > 0.0) {
            return Err(Error::BadConfig("speed_fraction must be positive".into()));
        }
        if self.sun_noise < 0.0 {
            return Err(Error::BadConfig("sun_noise must be nonnegative".into()));
        }
        // zero noise is allowed; anything else must be a proper covariance
        if self.odom_noise != Matrix2::zeros() {
            let sym = self.odom_noise - self.odom_noise.transpose();
            if sym.norm() > 1e-12 || self.odom_noise.cholesky().is_none() {
                return Err(Error::BadConfig(
                    "odom_noise must be zero or symmetric positive definite".into(),
                ));
            }
        }
        if let SunAvailability::Schedule { start_hour_utc, end_hour_utc } = self.sun {
            if !(0.0..=24.0).contains(&start_hour_utc)
                || !(0.0..=24.0).contains(&end_hour_utc)
                || start_hour_utc >= end_hour_utc
            {
                return Err(Error::BadConfig("sun schedule hours must satisfy 0 <= start < end <= 24".into()));
            }
        }
        self.start_epoch()?;
        Ok(())
    }

    /// Drive start as UTC epoch seconds.
    pub fn start_epoch(&self) -> Result<f64> {
        let t = chrono::DateTime::parse_from_rfc3339(&self.start_utc)
            .map_err(|e| Error::BadConfig(format!("start_utc: {e}")))?;
        Ok(t.timestamp_millis() as f64 / 1000.0)
    }

    fn sun_scheduled(&self, t_epoch: f64) -> bool {
        match self.sun {
            SunAvailability::Always => true,
            SunAvailability::Never => false,
            SunAvailability::Schedule { start_hour_utc, end_hour_utc } => {
                let hour = (t_epoch / 3600.0).rem_euclid(24.0);
                (start_hour_utc..end_hour_utc).contains(&hour)
            }
        }
    }
}

/// One frame of simulated truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthFrame {
    /// UTC epoch seconds.
    pub t: f64,
    pub pose: MapPose,
    /// Map-frame position, meters.
    pub position: [f64; 2],
    /// Global heading, radians.
    pub heading: f64,
    /// Speed, m/s.
    pub velocity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapKind {
    /// Manhattan lattice of `nx` x `ny` junctions with rounded corners.
    /// Block sizes vary around `block` in a fixed non-palindromic pattern so
    /// that no rigid motion maps the lattice onto itself — otherwise
    /// dead-reckoned routes keep permanent ghost hypotheses and never
    /// localize.
    Grid { nx: usize, ny: usize, block: f64 },
    /// A 400 x 240 m rectangular loop with split points mid-south and
    /// mid-north. The graph is symmetric under 180-degree rotation, so
    /// odometry alone cannot separate a drive from its rotated ghost.
    SymmetricLoop,
    /// `spokes` straight streets radiating from one junction.
    Radial { spokes: usize, length: f64 },
}

const GRID_X_SCALE: [f64; 6] = [1.0, 0.7, 1.3, 0.9, 1.15, 0.8];
const GRID_Y_SCALE: [f64; 6] = [0.85, 1.2, 0.75, 1.1, 0.95, 1.25];
const GRID_SPEED: f64 = 30.0;
const LOOP_SPEED: f64 = 54.0;
const RADIAL_SPEED: f64 = 50.0;

fn lattice_coords(n: usize, block: f64, scale: &[f64]) -> Vec<f64> {
    let mut xs = vec![0.0];
    for i in 0..n - 1 {
        xs.push(xs[i] + block * scale[i % scale.len()]);
    }
    xs
}

/// Directed street runs and junction fittings of the grid lattice. Straight
/// runs stop `CORNER_RADIUS` short of each lattice point; the junction
/// itself is filled with a through stub plus left/right quarter arcs per
/// approach. The arcs matter: their curvature term lets a hypothesis that is
/// actually turning predict the observed yaw, which is what separates it
/// from a hypothesis sliding past the junction on a straight street. An
/// instantaneous 90-degree bend gives the filter no such handle.
fn grid_runs(nx: usize, ny: usize, block: f64) -> Vec<StreetSegment> {
    use std::f64::consts::{FRAC_PI_2, PI};
    let xs = lattice_coords(nx, block, &GRID_X_SCALE);
    let ys = lattice_coords(ny, block, &GRID_Y_SCALE);
    let r = CORNER_RADIUS;
    let mut segs = Vec::new();
    let line = |segs: &mut Vec<StreetSegment>, p0: [f64; 2], beta: f64, len: f64| {
        let id = SegmentId(segs.len() as u32);
        segs.push(StreetSegment::new_line(id, p0, beta, len, GRID_SPEED, RoadType::NonHighway));
    };
    let arc = |segs: &mut Vec<StreetSegment>, p0: [f64; 2], beta: f64, alpha: f64| {
        let id = SegmentId(segs.len() as u32);
        segs.push(StreetSegment::new_arc(
            id,
            p0,
            beta,
            alpha,
            r * FRAC_PI_2,
            GRID_SPEED,
            RoadType::NonHighway,
        ));
    };
    for j in 0..ny {
        for i in 0..nx - 1 {
            let len = xs[i + 1] - xs[i] - 2.0 * r;
            line(&mut segs, [xs[i] + r, ys[j]], 0.0, len);
            line(&mut segs, [xs[i + 1] - r, ys[j]], PI, len);
        }
    }
    for i in 0..nx {
        for j in 0..ny - 1 {
            let len = ys[j + 1] - ys[j] - 2.0 * r;
            line(&mut segs, [xs[i], ys[j] + r], FRAC_PI_2, len);
            line(&mut segs, [xs[i], ys[j + 1] - r], -FRAC_PI_2, len);
        }
    }
    // Junction fittings. Traffic can arrive from a given side only if a
    // street exists on that side, and each maneuver needs its exit street.
    for i in 0..nx {
        for j in 0..ny {
            let (x, y) = (xs[i], ys[j]);
            let out_e = i + 1 < nx;
            let out_w = i > 0;
            let out_n = j + 1 < ny;
            let out_s = j > 0;
            if out_w {
                // eastbound arrival at (x - r, y)
                let p = [x - r, y];
                if out_e {
                    line(&mut segs, p, 0.0, 2.0 * r);
                }
                if out_n {
                    arc(&mut segs, p, 0.0, 1.0 / r);
                }
                if out_s {
                    arc(&mut segs, p, 0.0, -1.0 / r);
                }
            }
            if out_e {
                // westbound arrival at (x + r, y)
                let p = [x + r, y];
                if out_w {
                    line(&mut segs, p, PI, 2.0 * r);
                }
                if out_s {
                    arc(&mut segs, p, PI, 1.0 / r);
                }
                if out_n {
                    arc(&mut segs, p, PI, -1.0 / r);
                }
            }
            if out_s {
                // northbound arrival at (x, y - r)
                let p = [x, y - r];
                if out_n {
                    line(&mut segs, p, FRAC_PI_2, 2.0 * r);
                }
                if out_w {
                    arc(&mut segs, p, FRAC_PI_2, 1.0 / r);
                }
                if out_e {
                    arc(&mut segs, p, FRAC_PI_2, -1.0 / r);
                }
            }
            if out_n {
                // southbound arrival at (x, y + r)
                let p = [x, y + r];
                if out_s {
                    line(&mut segs, p, -FRAC_PI_2, 2.0 * r);
                }
                if out_e {
                    arc(&mut segs, p, -FRAC_PI_2, 1.0 / r);
                }
                if out_w {
                    arc(&mut segs, p, -FRAC_PI_2, -1.0 / r);
                }
            }
        }
    }
    segs
}

/// Curb radius of synthetic-map turns, meters.
const CORNER_RADIUS: f64 = 12.0;

fn loop_runs() -> Vec<StreetSegment> {
    use std::f64::consts::{FRAC_PI_2, PI};
    let (w, h, r) = (400.0, 240.0, CORNER_RADIUS);
    let quarter = r * FRAC_PI_2;
    let line = |id: u32, p0: [f64; 2], beta: f64, len: f64| {
        StreetSegment::new_line(SegmentId(id), p0, beta, len, LOOP_SPEED, RoadType::NonHighway)
    };
    let arc = |id: u32, p0: [f64; 2], beta: f64| {
        StreetSegment::new_arc(SegmentId(id), p0, beta, 1.0 / r, quarter, LOOP_SPEED, RoadType::NonHighway)
    };
    // One directed counterclockwise ring: four straight edges with rounded
    // corners, plus extra nodes mid-south and mid-north. The ring maps onto
    // itself under a 180-degree rotation about the center, so relative cues
    // can never separate a drive from its half-lap twin; only an absolute
    // heading reference can.
    //
    // Two deliberate choices make the remaining structure identifiable at
    // all:
    //  - the reversed (clockwise) ring is NOT part of the map. With both
    //    rings present every drive has a mirrored ghost that reproduces the
    //    exact observation stream of the linearized model (it absorbs the
    //    same +-90-degree heading innovations at its own corners and then
    //    tracks with theta = pi), so no cue subset could ever resolve it;
    //  - corners are arcs rather than instantaneous bends. A one-frame
    //    90-degree bend costs every hypothesis the same theta innovation,
    //    whether it crosses the corner or sits mid-block, so along-track
    //    offsets would never collapse. On an arc the heading-change
    //    prediction carries the alpha (d - d_prev) term, which only
    //    hypotheses actually on the arc can match.
    vec![
        line(0, [w / 2.0, 0.0], 0.0, w / 2.0 - r),
        arc(1, [w - r, 0.0], 0.0),
        line(2, [w, r], FRAC_PI_2, h - 2.0 * r),
        arc(3, [w, h - r], FRAC_PI_2),
        line(4, [w - r, h], PI, w / 2.0 - r),
        line(5, [w / 2.0, h], PI, w / 2.0 - r),
        arc(6, [r, h], PI),
        line(7, [0.0, h - r], -FRAC_PI_2, h - 2.0 * r),
        arc(8, [0.0, r], -FRAC_PI_2),
        line(9, [r, 0.0], 0.0, w / 2.0 - r),
    ]
}

fn radial_runs(spokes: usize, length: f64) -> Vec<StreetSegment> {
    let mut segs = Vec::new();
    for k in 0..spokes {
        let beta = 2.0 * std::f64::consts::PI * k as f64 / spokes as f64;
        let tip = [length * beta.cos(), length * beta.sin()];
        segs.push(StreetSegment::new_line(
            SegmentId(2 * k as u32),
            [0.0, 0.0],
            beta,
            length,
            RADIAL_SPEED,
            RoadType::NonHighway,
        ));
        segs.push(StreetSegment::new_line(
            SegmentId(2 * k as u32 + 1),
            tip,
            wrap_to_pi(beta + std::f64::consts::PI),
            length,
            RADIAL_SPEED,
            RoadType::NonHighway,
        ));
    }
    segs
}

/// Build one of the synthetic map families, wired and partitioned into
/// intersection-visibility bands. `origin` anchors the map at (lat, lon).
pub fn make_synthetic_map(kind: MapKind, origin: [f64; 2]) -> Result<RoadGraph> {
    let mut runs = match kind {
        MapKind::Grid { nx, ny, block } => {
            if nx < 2 || ny < 2 {
                return Err(Error::BadConfig("grid needs at least 2x2 junctions".into()));
            }
            let min_block = block * GRID_X_SCALE.iter().chain(&GRID_Y_SCALE).cloned().fold(f64::INFINITY, f64::min);
            // the shortest trimmed run must still fit the look-ahead bands
            if min_block - 2.0 * CORNER_RADIUS <= 2.0 * (INTERSECTION_FAR - INTERSECTION_NEAR) {
                return Err(Error::BadConfig(format!(
                    "grid block {block} m too small for corners and intersection bands"
                )));
            }
            grid_runs(nx, ny, block)
        }
        MapKind::SymmetricLoop => loop_runs(),
        MapKind::Radial { spokes, length } => {
            if spokes < 3 || length <= 2.0 * INTERSECTION_FAR {
                return Err(Error::BadConfig("radial needs >= 3 spokes and longer arms".into()));
            }
            radial_runs(spokes, length)
        }
    };
    connect_by_endpoints(&mut runs, CONNECT_TOL, false);
    let graph = RoadGraph::new(runs, origin)?;
    partition_for_intersections(&graph, INTERSECTION_NEAR, INTERSECTION_FAR)
}

/// Deterministic route: walk successors from segment 0, alternating the
/// preferred turn direction (left, right) at every branching junction,
/// until `target_m` of road has been strung together or a dead end is
/// reached. Turning at every opportunity keeps the drive informative:
/// long straight stretches are what position ambiguity feeds on.
pub fn auto_route(graph: &RoadGraph, target_m: f64) -> Result<Vec<SegmentId>> {
    if graph.is_empty() {
        return Err(Error::EmptyMap);
    }
    if !(target_m > 0.0) {
        return Err(Error::BadRoute(format!("route target must be positive, got {target_m}")));
    }
    const TURN_CYCLE: [f64; 2] = [std::f64::consts::FRAC_PI_2, -std::f64::consts::FRAC_PI_2];
    let mut cur = SegmentId(0);
    let mut route = vec![cur];
    let mut total = graph.get(cur)?.length;
    let mut choices = 0usize;
    while total < target_m {
        let seg = graph.get(cur)?;
        let next = match seg.successors.as_slice() {
            [] => break,
            [only] => *only,
            succs => {
                let desired = wrap_to_pi(seg.end_heading() + TURN_CYCLE[choices % TURN_CYCLE.len()]);
                choices += 1;
                // rank by where the candidate ends up pointing: curved pieces
                // all start tangent to the junction approach, so only the end
                // heading tells a turn from a straight-through
                *succs
                    .iter()
                    .min_by(|a, b| {
                        let da = wrap_to_pi(graph.get(**a).unwrap().end_heading() - desired).abs();
                        let db = wrap_to_pi(graph.get(**b).unwrap().end_heading() - desired).abs();
                        da.partial_cmp(&db).unwrap().then(a.0.cmp(&b.0))
                    })
                    .expect("non-empty successors")
            }
        };
        route.push(next);
        total += graph.get(next)?.length;
        cur = next;
    }
    Ok(route)
}

/// Drive the route at `speed_fraction` of each street's limit, producing one
/// frame per 1/frame_rate seconds. The first frame is the start pose; the
/// drive ends when the route is exhausted (no partial final step).
pub fn simulate_drive(
    graph: &RoadGraph,
    route: &[SegmentId],
    sim: &SimConfig,
) -> Result<Vec<GroundTruthFrame>> {
    sim.validate()?;
    let first = *route.first().ok_or_else(|| Error::BadRoute("empty route".into()))?;
    for w in route.windows(2) {
        let seg = graph.get(w[0])?;
        if !seg.successors.contains(&w[1]) {
            return Err(Error::BadRoute(format!(
                "segment {} does not follow {} in the graph",
                w[1].0, w[0].0
            )));
        }
    }

    let t0 = sim.start_epoch()?;
    let dt = 1.0 / sim.frame_rate;
    let speed = |u: SegmentId| -> Result<f64> {
        Ok(sim.speed_fraction * graph.get(u)?.speed_limit * KMH_TO_MPS)
    };
    let frame = |t: f64, u: SegmentId, d: f64| -> Result<GroundTruthFrame> {
        let pose = MapPose { u, d, theta: 0.0 };
        Ok(GroundTruthFrame {
            t,
            pose,
            position: graph.pose_point(&pose)?,
            heading: graph.global_heading(&pose)?,
            velocity: speed(u)?,
        })
    };

    let mut frames = vec![frame(t0, first, 0.0)?];
    let mut idx = 0usize;
    let mut d = 0.0f64;
    'drive: for k in 1.. {
        let mut step = speed(route[idx])? * dt;
        let mut len = graph.get(route[idx])?.length;
        while d + step > len {
            if idx + 1 >= route.len() {
                break 'drive;
            }
            step -= len - d;
            d = 0.0;
            idx += 1;
            len = graph.get(route[idx])?.length;
        }
        d += step;
        if (d - len).abs() < 1e-12 && idx + 1 < route.len() {
            d = 0.0;
            idx += 1;
        }
        frames.push(frame(t0 + k as f64 * dt, route[idx], d)?);
    }
    Ok(frames)
}

/// Shortest successor path distance between two poses, used to recover the
/// true odometry increment from ground truth.
fn path_distance(graph: &RoadGraph, from: &MapPose, to: &MapPose) -> Result<f64> {
    if from.u == to.u {
        return Ok(to.d - from.d);
    }
    // breadth-first over successors; one frame never spans many segments
    let mut frontier = vec![(from.u, graph.get(from.u)?.length - from.d)];
    let mut seen = vec![from.u];
    for _ in 0..8 {
        let mut next = Vec::new();
        for &(u, dist) in &frontier {
            for &s in &graph.get(u)?.successors {
                if s == to.u {
                    return Ok(dist + to.d);
                }
                if !seen.contains(&s) {
                    seen.push(s);
                    next.push((s, dist + graph.get(s)?.length));
                }
            }
        }
        frontier = next;
    }
    Err(Error::BadRoute(format!(
        "poses on segments {} and {} are not connected",
        from.u.0, to.u.0
    )))
}

/// Turn a ground-truth drive into the observation stream a perception stack
/// would emit: one frame per step from the second truth frame on. All random
/// draws happen in a fixed order every frame, so a given seed yields the
/// same stream regardless of which cues end up present.
pub fn emit_observations(
    gt: &[GroundTruthFrame],
    graph: &RoadGraph,
    sim: &SimConfig,
) -> Result<Vec<ObservationFrame>> {
    sim.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(sim.seed);
    let chol = (sim.odom_noise != Matrix2::zeros())
        .then(|| sim.odom_noise.cholesky().expect("validated SPD").l());
    let mut out = Vec::with_capacity(gt.len().saturating_sub(1));

    for pair in gt.windows(2) {
        let (prev, cur) = (&pair[0], &pair[1]);
        let z = Vector2::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        let sun_draw: f64 = rng.sample(StandardNormal);
        let inter_flip = rng.gen::<f64>() < sim.inter_flip_prob;
        let rtype_flip = rng.gen::<f64>() < sim.rtype_flip_prob;

        let noise = chol.map(|l| l * z).unwrap_or_else(Vector2::zeros);
        let od_d = path_distance(graph, &prev.pose, &cur.pose)? + noise[0];
        let od_th = wrap_to_pi(wrap_to_pi(cur.heading - prev.heading) + noise[1]);

        let sun = sun_position(cur.t, sim.origin_lat, sim.origin_lon)?;
        let phi = (sim.sun_scheduled(cur.t) && sun.is_daytime()).then(|| {
            wrap_to_pi(
                wrap_to_pi(map_frame_azimuth(&sun) - cur.heading)
                    + sun_draw * sim.sun_noise.sqrt(),
            )
        });

        let seg = graph.get(cur.pose.u)?;
        let truly_visible = seg.intersection_class == IntersectionClass::Visible;
        let inter = match truly_visible != inter_flip {
            true => IntersectionObs::Visible,
            false => IntersectionObs::NotVisible,
        };
        let rtype = match (seg.road_type == RoadType::Highway) != rtype_flip {
            true => RoadType::Highway,
            false => RoadType::NonHighway,
        };

        out.push(ObservationFrame {
            t: cur.t,
            phi,
            inter: Some(inter),
            rtype: Some(rtype),
            velocity: Some(cur.velocity / KMH_TO_MPS),
            odom: Some([od_d, od_th]),
        });
    }
    Ok(out)
}
