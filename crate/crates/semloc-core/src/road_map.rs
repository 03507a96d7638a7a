//! Directed road graph: parameterized street segments, pose arithmetic, and
//! intersection-visibility partitioning.
//!
//! A segment is a line or circular arc starting at `p0` with initial heading
//! `beta`, constant curvature `alpha` (rad/m, 0 for lines) and arc length
//! `length`. A pose on the graph is (segment id, distance along it, heading
//! offset from the local street direction).

use std::collections::HashMap;
use std::path::Path;

use nalgebra::{Matrix4, Vector4};
use serde::{Deserialize, Serialize};

use crate::angles::wrap_to_pi;
use crate::error::{Error, Result};

/// Dense segment identifier; equals the segment's index in the graph.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct SegmentId(pub u32);

impl SegmentId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl std::fmt::Display for SegmentId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoadType {
    Highway,
    NonHighway,
}

impl std::fmt::Display for RoadType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RoadType::Highway => write!(f, "highway"),
            RoadType::NonHighway => write!(f, "non_highway"),
        }
    }
}

/// How visible the next intersection is from a point on this segment.
/// Assigned by [`partition_for_intersections`]; mirrors the annotation bands
/// used for the intersection cue (close sector vs. far sector vs. none).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntersectionClass {
    TooClose,
    Visible,
    NotVisible,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StreetSegment {
    pub id: SegmentId,
    /// Start point, meters in the local map frame.
    pub p0: [f64; 2],
    /// End point; redundant with (p0, beta, alpha, length) and checked on load.
    pub p1: [f64; 2],
    /// Initial heading, radians CCW from +x.
    pub beta: f64,
    /// Curvature in rad/m; 0 for straight lines.
    pub alpha: f64,
    /// Arc length in meters, > 0.
    pub length: f64,
    /// Speed limit in km/h, > 0.
    pub speed_limit: f64,
    pub road_type: RoadType,
    pub intersection_class: IntersectionClass,
    pub successors: Vec<SegmentId>,
    pub predecessors: Vec<SegmentId>,
}

impl StreetSegment {
    /// Straight segment with `p1` derived from the start pose and length.
    pub fn new_line(
        id: SegmentId,
        p0: [f64; 2],
        beta: f64,
        length: f64,
        speed_limit: f64,
        road_type: RoadType,
    ) -> Self {
        Self::new_arc(id, p0, beta, 0.0, length, speed_limit, road_type)
    }

    /// Arc segment with `p1` derived from the start pose, curvature and length.
    pub fn new_arc(
        id: SegmentId,
        p0: [f64; 2],
        beta: f64,
        alpha: f64,
        length: f64,
        speed_limit: f64,
        road_type: RoadType,
    ) -> Self {
        let mut seg = Self {
            id,
            p0,
            p1: p0,
            beta,
            alpha,
            length,
            speed_limit,
            road_type,
            intersection_class: IntersectionClass::NotVisible,
            successors: Vec::new(),
            predecessors: Vec::new(),
        };
        seg.p1 = seg.point_at_unchecked(length);
        seg
    }

    /// Point at arc length `d` from the start, `0 <= d <= length`.
    pub fn point_at(&self, d: f64) -> Result<[f64; 2]> {
        if !(0.0..=self.length).contains(&d) {
            return Err(Error::OutOfRange {
                segment: self.id,
                what: "d",
                value: d,
                lo: 0.0,
                hi: self.length,
            });
        }
        Ok(self.point_at_unchecked(d))
    }

    /// Same as [`point_at`] but extrapolates outside `[0, length]`.
    /// Used internally where d may transiently overshoot the segment.
    pub fn point_at_unchecked(&self, d: f64) -> [f64; 2] {
        if self.alpha == 0.0 {
            [
                self.p0[0] + d * self.beta.cos(),
                self.p0[1] + d * self.beta.sin(),
            ]
        } else {
            let psi = self.beta + self.alpha * d;
            [
                self.p0[0] + (psi.sin() - self.beta.sin()) / self.alpha,
                self.p0[1] + (self.beta.cos() - psi.cos()) / self.alpha,
            ]
        }
    }

    /// Street tangent direction at arc length `d`, unwrapped.
    #[inline]
    pub fn heading_at(&self, d: f64) -> f64 {
        self.beta + self.alpha * d
    }

    /// Tangent direction at the end of the segment, unwrapped.
    #[inline]
    pub fn end_heading(&self) -> f64 {
        self.heading_at(self.length)
    }
}

/// Vehicle pose on the graph: segment, distance along it, and the heading
/// offset theta from the local street direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapPose {
    pub u: SegmentId,
    pub d: f64,
    pub theta: f64,
}

/// Affine change of continuous state coordinates when the hypothesis moves
/// from a segment to one of its successors. Applying it to the 4-vector
/// (d, d_prev, theta, theta_prev) re-expresses the same physical pose pair
/// relative to the successor; Gaussians push through exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseReparam {
    pub linear: Matrix4<f64>,
    pub offset: Vector4<f64>,
}

impl PoseReparam {
    #[inline]
    pub fn apply(&self, s: &Vector4<f64>) -> Vector4<f64> {
        self.linear * s + self.offset
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoadGraph {
    /// (latitude, longitude) of the local planar frame's origin.
    pub frame_origin: [f64; 2],
    /// Sorted by id; `segments[i].id == i`.
    pub segments: Vec<StreetSegment>,
}

/// Tolerance used to decide that two segment endpoints meet (meters).
pub const CONNECT_TOL: f64 = 0.5;

/// Distance bands before an intersection, in meters: within `NEAR` the
/// crossing dominates the view; between `NEAR` and `FAR` it is visible ahead.
pub const INTERSECTION_NEAR: f64 = 6.25;
pub const INTERSECTION_FAR: f64 = 23.0;

const GEOM_TOL: f64 = 1e-6;
/// Sub-segment shorter than this is dropped during partitioning.
const MIN_PIECE: f64 = 1e-7;

impl RoadGraph {
    /// Build a graph from segments, checking all structural invariants.
    pub fn new(mut segments: Vec<StreetSegment>, frame_origin: [f64; 2]) -> Result<Self> {
        segments.sort_by_key(|s| s.id);
        let graph = Self {
            frame_origin,
            segments,
        };
        graph.validate()?;
        Ok(graph)
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn get(&self, id: SegmentId) -> Result<&StreetSegment> {
        self.segments
            .get(id.index())
            .ok_or(Error::UnknownSegment(id))
    }

    pub fn iter(&self) -> std::slice::Iter<'_, StreetSegment> {
        self.segments.iter()
    }

    pub fn total_length(&self) -> f64 {
        self.segments.iter().map(|s| s.length).sum()
    }

    /// Global heading of a pose: theta + beta + alpha * d, wrapped to (-pi, pi].
    pub fn global_heading(&self, pose: &MapPose) -> Result<f64> {
        let seg = self.get(pose.u)?;
        if !(0.0..=seg.length).contains(&pose.d) {
            return Err(Error::OutOfRange {
                segment: pose.u,
                what: "d",
                value: pose.d,
                lo: 0.0,
                hi: seg.length,
            });
        }
        Ok(wrap_to_pi(pose.theta + seg.heading_at(pose.d)))
    }

    /// Global planar position of a pose.
    pub fn pose_point(&self, pose: &MapPose) -> Result<[f64; 2]> {
        self.get(pose.u)?.point_at(pose.d)
    }

    /// Affine coordinate change for a hypothesis crossing from `from` onto its
    /// successor `to`. Chosen so that arc-length position and global heading
    /// are preserved identically for every (d, theta), not just at the
    /// junction point itself.
    pub fn reparameterize(&self, from: SegmentId, to: SegmentId) -> Result<PoseReparam> {
        let u = self.get(from)?;
        if !u.successors.contains(&to) {
            return Err(Error::NotASuccessor { from, to });
        }
        let v = self.get(to)?;
        let da = u.alpha - v.alpha;
        // d' = d - l_u, theta' = theta + (a_u - a_v) d + (b_u - b_v + a_v l_u).
        // The angular constant is wrapped so theta stays near zero across
        // junctions instead of accumulating full turns.
        let c = wrap_to_pi(u.beta - v.beta + v.alpha * u.length);
        let mut linear = Matrix4::identity();
        linear[(2, 0)] = da;
        linear[(3, 1)] = da;
        let offset = Vector4::new(-u.length, -u.length, c, c);
        Ok(PoseReparam { linear, offset })
    }

    /// Check every structural invariant; called by all constructors.
    pub fn validate(&self) -> Result<()> {
        for (i, seg) in self.segments.iter().enumerate() {
            if seg.id.index() != i {
                return Err(Error::InvalidGraph(format!(
                    "segment ids must be dense and sorted; found id {} at index {i}",
                    seg.id
                )));
            }
            if !(seg.length > 0.0) || !seg.length.is_finite() {
                return Err(Error::InvalidGraph(format!(
                    "segment {}: length {} must be positive",
                    seg.id, seg.length
                )));
            }
            if !(seg.speed_limit > 0.0) {
                return Err(Error::InvalidGraph(format!(
                    "segment {}: speed limit {} must be positive",
                    seg.id, seg.speed_limit
                )));
            }
            let end = seg.point_at_unchecked(seg.length);
            let err = dist(end, seg.p1);
            if err > GEOM_TOL {
                return Err(Error::InvalidGraph(format!(
                    "segment {}: p1 off by {err:.2e} m from geometry",
                    seg.id
                )));
            }
            for &succ in &seg.successors {
                let s = self.get(succ).map_err(|_| {
                    Error::InvalidGraph(format!("segment {}: dangling successor {succ}", seg.id))
                })?;
                if dist(seg.p1, s.p0) > CONNECT_TOL {
                    return Err(Error::InvalidGraph(format!(
                        "segment {} end does not meet successor {succ} start",
                        seg.id
                    )));
                }
                if !s.predecessors.contains(&seg.id) {
                    return Err(Error::InvalidGraph(format!(
                        "segment {succ} missing predecessor {}",
                        seg.id
                    )));
                }
            }
            for &pred in &seg.predecessors {
                let p = self.get(pred).map_err(|_| {
                    Error::InvalidGraph(format!("segment {}: dangling predecessor {pred}", seg.id))
                })?;
                if !p.successors.contains(&seg.id) {
                    return Err(Error::InvalidGraph(format!(
                        "segment {pred} missing successor {}",
                        seg.id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let graph: RoadGraph = serde_json::from_str(s)?;
        graph.validate()?;
        Ok(graph)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json_string()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// A connection bending the heading by more than this is a U-turn, not a
/// corner: sharp urban corners sit at 90 degrees and multi-way forks rarely
/// exceed 120, while doubling back needs the full 180.
const U_TURN_BEND: f64 = 3.0 * std::f64::consts::FRAC_PI_4;

/// Wire up successor/predecessor lists by matching segment endpoints within
/// `tol` meters. Links that reverse direction (the heading jumps by more
/// than 135 degrees, e.g. onto a segment running back along `from`) are not
/// connected unless `allow_u_turns` is set.
pub fn connect_by_endpoints(segments: &mut [StreetSegment], tol: f64, allow_u_turns: bool) {
    for seg in segments.iter_mut() {
        seg.successors.clear();
        seg.predecessors.clear();
    }
    let n = segments.len();
    let mut succ: Vec<Vec<SegmentId>> = vec![Vec::new(); n];
    let mut pred: Vec<Vec<SegmentId>> = vec![Vec::new(); n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            if dist(segments[i].p1, segments[j].p0) > tol {
                continue;
            }
            let bend = wrap_to_pi(segments[j].beta - segments[i].end_heading()).abs();
            if bend > U_TURN_BEND && !allow_u_turns {
                continue;
            }
            succ[i].push(segments[j].id);
            pred[j].push(segments[i].id);
        }
    }
    for i in 0..n {
        segments[i].successors = std::mem::take(&mut succ[i]);
        segments[i].predecessors = std::mem::take(&mut pred[i]);
    }
}

/// Groups planar points that lie within `tol` of each other (single-linkage
/// over a uniform grid). Good enough for junction detection where genuine
/// nodes are meters apart.
struct PointClusters {
    labels: Vec<usize>,
    count: usize,
}

fn cluster_points(points: &[[f64; 2]], tol: f64) -> PointClusters {
    let n = points.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut Vec<usize>, mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    let cell = |p: [f64; 2]| -> (i64, i64) {
        ((p[0] / tol).floor() as i64, (p[1] / tol).floor() as i64)
    };
    let mut grid: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    for (i, p) in points.iter().enumerate() {
        grid.entry(cell(*p)).or_default().push(i);
    }
    for (i, p) in points.iter().enumerate() {
        let (cx, cy) = cell(*p);
        for dx in -1..=1 {
            for dy in -1..=1 {
                if let Some(cands) = grid.get(&(cx + dx, cy + dy)) {
                    for &j in cands {
                        if j < i && dist(*p, points[j]) <= tol {
                            let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                            if ri != rj {
                                parent[ri] = rj;
                            }
                        }
                    }
                }
            }
        }
    }
    let mut labels = vec![usize::MAX; n];
    let mut count = 0;
    for i in 0..n {
        let root = find(&mut parent, i);
        if labels[root] == usize::MAX {
            labels[root] = count;
            count += 1;
        }
        labels[i] = labels[root];
    }
    PointClusters { labels, count }
}

/// Split every segment whose directed end reaches an intersection into
/// visibility bands: the last `near` meters are `too_close`, the stretch
/// between `far` and `near` meters before the end is `visible`, and the rest
/// keeps `not_visible`. Connectivity is rewired through the pieces; segments
/// not ending at an intersection are copied unchanged, which also makes the
/// operation idempotent. An intersection is an endpoint cluster where three
/// or more distinct arms meet.
pub fn partition_for_intersections(graph: &RoadGraph, near: f64, far: f64) -> Result<RoadGraph> {
    assert!(near > 0.0 && far > near, "bands must satisfy 0 < near < far");
    let n = graph.segments.len();

    // Cluster all endpoints; 2i = start of segment i, 2i+1 = its end.
    let mut points = Vec::with_capacity(2 * n);
    for seg in &graph.segments {
        points.push(seg.p0);
        points.push(seg.p1);
    }
    let clusters = cluster_points(&points, CONNECT_TOL);

    // Arms per node cluster: distinct clusters reachable as the other
    // endpoint of an incident segment. A two-way pair contributes one arm.
    let mut arms: Vec<Vec<usize>> = vec![Vec::new(); clusters.count];
    for i in 0..n {
        let (a, b) = (clusters.labels[2 * i], clusters.labels[2 * i + 1]);
        if a == b {
            continue;
        }
        if !arms[a].contains(&b) {
            arms[a].push(b);
        }
        if !arms[b].contains(&a) {
            arms[b].push(a);
        }
    }
    let is_intersection: Vec<bool> = arms.iter().map(|a| a.len() >= 3).collect();

    // Cut points (distance from segment start) and band classes per piece.
    let mut next_id = 0u32;
    let mut first_piece = vec![SegmentId(0); n];
    let mut last_piece = vec![SegmentId(0); n];
    let mut pieces: Vec<StreetSegment> = Vec::with_capacity(n);
    let mut chains: Vec<Vec<usize>> = Vec::with_capacity(n); // piece indices per original

    for (i, seg) in graph.segments.iter().enumerate() {
        let splits: Vec<(f64, f64, IntersectionClass)> = if is_intersection
            [clusters.labels[2 * i + 1]]
        {
            let l = seg.length;
            let mut cuts = Vec::new();
            if l - far > MIN_PIECE {
                cuts.push((0.0, l - far, IntersectionClass::NotVisible));
                cuts.push((l - far, l - near, IntersectionClass::Visible));
                cuts.push((l - near, l, IntersectionClass::TooClose));
            } else if l - near > MIN_PIECE {
                cuts.push((0.0, l - near, IntersectionClass::Visible));
                cuts.push((l - near, l, IntersectionClass::TooClose));
            } else {
                cuts.push((0.0, l, IntersectionClass::TooClose));
            }
            cuts
        } else {
            vec![(0.0, seg.length, seg.intersection_class)]
        };

        let mut chain = Vec::with_capacity(splits.len());
        for (k, &(a, b, class)) in splits.iter().enumerate() {
            let id = SegmentId(next_id);
            next_id += 1;
            let p0 = if k == 0 { seg.p0 } else { seg.point_at_unchecked(a) };
            let p1 = if k == splits.len() - 1 {
                seg.p1
            } else {
                seg.point_at_unchecked(b)
            };
            pieces.push(StreetSegment {
                id,
                p0,
                p1,
                beta: if k == 0 { seg.beta } else { wrap_to_pi(seg.heading_at(a)) },
                alpha: seg.alpha,
                length: b - a,
                speed_limit: seg.speed_limit,
                road_type: seg.road_type,
                intersection_class: class,
                successors: Vec::new(),
                predecessors: Vec::new(),
            });
            chain.push(pieces.len() - 1);
        }
        first_piece[i] = pieces[chain[0]].id;
        last_piece[i] = pieces[*chain.last().unwrap()].id;
        chains.push(chain);
    }

    // Rewire: consecutive pieces chain together; the last piece inherits the
    // original successors, redirected to first pieces.
    for (i, seg) in graph.segments.iter().enumerate() {
        let chain = &chains[i];
        for w in chain.windows(2) {
            let next = pieces[w[1]].id;
            pieces[w[0]].successors.push(next);
        }
        let tail = *chain.last().unwrap();
        for &succ in &seg.successors {
            pieces[tail].successors.push(first_piece[succ.index()]);
        }
    }
    let succ_lists: Vec<(SegmentId, Vec<SegmentId>)> = pieces
        .iter()
        .map(|p| (p.id, p.successors.clone()))
        .collect();
    for (id, succs) in succ_lists {
        for s in succs {
            pieces[s.index()].predecessors.push(id);
        }
    }

    RoadGraph::new(pieces, graph.frame_origin)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    fn line(id: u32, p0: [f64; 2], beta: f64, length: f64) -> StreetSegment {
        StreetSegment::new_line(SegmentId(id), p0, beta, length, 50.0, RoadType::NonHighway)
    }

    /// Four 100 m roads meeting at the origin, each direction separate.
    fn plus_crossing() -> RoadGraph {
        let mut segs = Vec::new();
        let arms = [0.0, PI / 2.0, PI, -PI / 2.0];
        let mut id = 0;
        for &b in &arms {
            let far = [100.0 * b.cos(), 100.0 * b.sin()];
            // inbound: far point toward origin
            segs.push(StreetSegment::new_line(
                SegmentId(id),
                far,
                wrap_to_pi(b + PI),
                100.0,
                50.0,
                RoadType::NonHighway,
            ));
            id += 1;
            // outbound: origin toward far point
            segs.push(line(id, [0.0, 0.0], b, 100.0));
            id += 1;
        }
        connect_by_endpoints(&mut segs, CONNECT_TOL, false);
        RoadGraph::new(segs, [49.0, 8.4]).unwrap()
    }

    #[test]
    fn global_heading_examples() {
        let mut s = line(0, [0.0, 0.0], 1.0, 60.0);
        let g = RoadGraph::new(vec![s.clone()], [0.0, 0.0]).unwrap();
        let h = g
            .global_heading(&MapPose { u: SegmentId(0), d: 40.0, theta: 0.0 })
            .unwrap();
        assert_abs_diff_eq!(h, 1.0, epsilon = 1e-12);

        s = StreetSegment::new_arc(SegmentId(0), [0.0, 0.0], 1.0, 0.01, 60.0, 50.0, RoadType::NonHighway);
        let g = RoadGraph::new(vec![s], [0.0, 0.0]).unwrap();
        let h = g
            .global_heading(&MapPose { u: SegmentId(0), d: 50.0, theta: 0.1 })
            .unwrap();
        assert_abs_diff_eq!(h, 1.6, epsilon = 1e-12);

        let s = StreetSegment::new_arc(
            SegmentId(0),
            [0.0, 0.0],
            PI - 0.1,
            0.01,
            60.0,
            50.0,
            RoadType::NonHighway,
        );
        let g = RoadGraph::new(vec![s], [0.0, 0.0]).unwrap();
        let h = g
            .global_heading(&MapPose { u: SegmentId(0), d: 30.0, theta: 0.0 })
            .unwrap();
        assert_abs_diff_eq!(h, -PI + 0.2, epsilon = 1e-12);
    }

    #[test]
    fn heading_rejects_bad_pose() {
        let g = RoadGraph::new(vec![line(0, [0.0, 0.0], 0.0, 10.0)], [0.0, 0.0]).unwrap();
        assert!(matches!(
            g.global_heading(&MapPose { u: SegmentId(3), d: 0.0, theta: 0.0 }),
            Err(Error::UnknownSegment(_))
        ));
        assert!(matches!(
            g.global_heading(&MapPose { u: SegmentId(0), d: 11.0, theta: 0.0 }),
            Err(Error::OutOfRange { .. })
        ));
    }

    #[test]
    fn point_on_line_and_arc() {
        let s = line(0, [0.0, 0.0], 0.0, 20.0);
        assert_abs_diff_eq!(s.point_at(10.0).unwrap()[0], 10.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.point_at(10.0).unwrap()[1], 0.0, epsilon = 1e-12);
        assert_eq!(s.point_at(0.0).unwrap(), [0.0, 0.0]);

        // half circle with radius 100/pi
        let s = StreetSegment::new_arc(
            SegmentId(0),
            [0.0, 0.0],
            0.0,
            PI / 100.0,
            100.0,
            50.0,
            RoadType::NonHighway,
        );
        let end = s.point_at(100.0).unwrap();
        assert_abs_diff_eq!(end[0], 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(end[1], 200.0 / PI, epsilon = 1e-9);
        assert!(s.point_at(100.5).is_err());
    }

    #[test]
    fn arc_p1_reconstruction_invariant() {
        let s = StreetSegment::new_arc(
            SegmentId(0),
            [3.0, -2.0],
            0.7,
            -0.004,
            240.0,
            80.0,
            RoadType::Highway,
        );
        let end = s.point_at(s.length).unwrap();
        assert!(dist(end, s.p1) < 1e-6);
    }

    #[test]
    fn partition_bands_on_long_segment() {
        let g = plus_crossing();
        let p = partition_for_intersections(&g, INTERSECTION_NEAR, INTERSECTION_FAR).unwrap();
        // 4 inbound segments split into 3 pieces each, 4 outbound unchanged.
        assert_eq!(p.len(), 16);
        assert_abs_diff_eq!(p.total_length(), g.total_length(), epsilon = 1e-6);

        // Follow one inbound chain: 77 / 16.75 / 6.25 with the right classes.
        let head = p
            .iter()
            .find(|s| dist(s.p0, [100.0, 0.0]) < 1e-9 && s.intersection_class == IntersectionClass::NotVisible)
            .expect("not_visible head piece");
        assert_abs_diff_eq!(head.length, 77.0, epsilon = 1e-9);
        let mid = p.get(head.successors[0]).unwrap();
        assert_eq!(mid.intersection_class, IntersectionClass::Visible);
        assert_abs_diff_eq!(mid.length, 16.75, epsilon = 1e-9);
        let tail = p.get(mid.successors[0]).unwrap();
        assert_eq!(tail.intersection_class, IntersectionClass::TooClose);
        assert_abs_diff_eq!(tail.length, 6.25, epsilon = 1e-9);
        // The tail reaches the junction and fans out to the three other arms.
        assert_eq!(tail.successors.len(), 3);
        assert!(dist(tail.p1, [0.0, 0.0]) < 1e-9);
    }

    #[test]
    fn partition_short_segment_single_band() {
        let mut segs = vec![
            line(0, [-5.0, 0.0], 0.0, 5.0),
            line(1, [0.0, 0.0], PI / 2.0, 50.0),
            line(2, [0.0, 0.0], -PI / 2.0, 50.0),
            line(3, [0.0, 0.0], 0.0, 50.0),
        ];
        connect_by_endpoints(&mut segs, CONNECT_TOL, false);
        let g = RoadGraph::new(segs, [0.0, 0.0]).unwrap();
        let p = partition_for_intersections(&g, INTERSECTION_NEAR, INTERSECTION_FAR).unwrap();
        let short = p.iter().find(|s| dist(s.p0, [-5.0, 0.0]) < 1e-9).unwrap();
        assert_eq!(short.intersection_class, IntersectionClass::TooClose);
        assert_abs_diff_eq!(short.length, 5.0, epsilon = 1e-12);
        // 23 > 20 m outbound arms get visible + too_close only... they do not
        // end at the junction, so they stay whole.
        assert_eq!(p.len(), 4);
    }

    #[test]
    fn partition_no_intersection_is_identity() {
        let mut segs = vec![line(0, [0.0, 0.0], 0.0, 40.0), line(1, [40.0, 0.0], 0.0, 60.0)];
        connect_by_endpoints(&mut segs, CONNECT_TOL, false);
        let g = RoadGraph::new(segs, [0.0, 0.0]).unwrap();
        let p = partition_for_intersections(&g, INTERSECTION_NEAR, INTERSECTION_FAR).unwrap();
        assert_eq!(p.len(), 2);
        assert!(p.iter().all(|s| s.intersection_class == IntersectionClass::NotVisible));
    }

    #[test]
    fn partition_is_idempotent() {
        let g = plus_crossing();
        let p1 = partition_for_intersections(&g, INTERSECTION_NEAR, INTERSECTION_FAR).unwrap();
        let p2 = partition_for_intersections(&p1, INTERSECTION_NEAR, INTERSECTION_FAR).unwrap();
        assert_eq!(
            serde_json::to_string(&p1).unwrap(),
            serde_json::to_string(&p2).unwrap()
        );
    }

    #[test]
    fn reparameterize_collinear_and_turn() {
        let mut segs = vec![line(0, [0.0, 0.0], 0.3, 50.0), line(1, [0.0; 2], 0.3, 50.0)];
        segs[1] = StreetSegment::new_line(SegmentId(1), segs[0].p1, 0.3, 50.0, 50.0, RoadType::NonHighway);
        connect_by_endpoints(&mut segs, CONNECT_TOL, false);
        let g = RoadGraph::new(segs, [0.0, 0.0]).unwrap();
        let r = g.reparameterize(SegmentId(0), SegmentId(1)).unwrap();
        let s = r.apply(&Vector4::new(52.0, 48.0, 0.12, 0.10));
        assert_abs_diff_eq!(s[0], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s[1], -2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s[2], 0.12, epsilon = 1e-12);
        assert_abs_diff_eq!(s[3], 0.10, epsilon = 1e-12);

        // 90 degree left turn: the heading offset absorbs the turn.
        let a = line(0, [0.0, 0.0], 0.0, 30.0);
        let b = StreetSegment::new_line(SegmentId(1), a.p1, PI / 2.0, 30.0, 50.0, RoadType::NonHighway);
        let mut segs = vec![a, b];
        connect_by_endpoints(&mut segs, CONNECT_TOL, false);
        let g = RoadGraph::new(segs, [0.0, 0.0]).unwrap();
        let r = g.reparameterize(SegmentId(0), SegmentId(1)).unwrap();
        let s = r.apply(&Vector4::new(30.0, 27.0, 0.0, 0.0));
        assert_abs_diff_eq!(s[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s[2], -PI / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s[3], -PI / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn reparameterize_rejects_non_successor() {
        let g = plus_crossing();
        // the reverse twin is deliberately not connected
        assert!(matches!(
            g.reparameterize(SegmentId(0), SegmentId(1)),
            Err(Error::NotASuccessor { .. })
        ));
    }

    #[test]
    fn reparameterize_preserves_global_heading() {
        // arc into line and arc into arc, random states
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let beta: f64 = rng.gen_range(-PI..PI);
            let alpha: f64 = rng.gen_range(-0.02..0.02);
            let len: f64 = rng.gen_range(20.0..120.0);
            let a = StreetSegment::new_arc(SegmentId(0), [0.0, 0.0], beta, alpha, len, 50.0, RoadType::NonHighway);
            let beta2 = wrap_to_pi(a.end_heading() + rng.gen_range(-1.0..1.0));
            let alpha2: f64 = rng.gen_range(-0.02..0.02);
            let b = StreetSegment::new_arc(SegmentId(1), a.p1, beta2, alpha2, 80.0, 50.0, RoadType::NonHighway);
            let mut segs = vec![a, b];
            connect_by_endpoints(&mut segs, CONNECT_TOL, true);
            let g = RoadGraph::new(segs, [0.0, 0.0]).unwrap();
            let r = g.reparameterize(SegmentId(0), SegmentId(1)).unwrap();

            let d = rng.gen_range(len..len + 10.0);
            let theta = rng.gen_range(-0.5..0.5);
            let s = Vector4::new(d, d - 5.0, theta, theta + 0.02);
            let s2 = r.apply(&s);
            // compare unclamped headings through each parameterization
            let h1 = wrap_to_pi(theta + g.get(SegmentId(0)).unwrap().heading_at(d));
            let h2 = wrap_to_pi(s2[2] + g.get(SegmentId(1)).unwrap().heading_at(s2[0]));
            assert_abs_diff_eq!(wrap_to_pi(h1 - h2), 0.0, epsilon = 1e-9);
            // arc-length position is preserved too
            assert_abs_diff_eq!(s2[0], d - len, epsilon = 1e-9);
        }
    }

    #[test]
    fn chained_reparameterization_accumulates_exactly() {
        // three segments in a row; crossing both junctions shifts d by the
        // total upstream length and keeps the global heading.
        let a = line(0, [0.0, 0.0], 0.1, 40.0);
        let b = StreetSegment::new_arc(SegmentId(1), a.p1, 0.1, 0.01, 30.0, 50.0, RoadType::NonHighway);
        let c = StreetSegment::new_line(SegmentId(2), b.p1, b.end_heading(), 50.0, 50.0, RoadType::NonHighway);
        let mut segs = vec![a, b, c];
        connect_by_endpoints(&mut segs, CONNECT_TOL, false);
        let g = RoadGraph::new(segs, [0.0, 0.0]).unwrap();
        let r01 = g.reparameterize(SegmentId(0), SegmentId(1)).unwrap();
        let r12 = g.reparameterize(SegmentId(1), SegmentId(2)).unwrap();
        let s = Vector4::new(72.0, 71.0, 0.05, 0.04);
        let s2 = r12.apply(&r01.apply(&s));
        assert_abs_diff_eq!(s2[0], 2.0, epsilon = 1e-9);
        let h0 = wrap_to_pi(0.05 + g.get(SegmentId(0)).unwrap().heading_at(72.0));
        let h2 = wrap_to_pi(s2[2] + g.get(SegmentId(2)).unwrap().heading_at(s2[0]));
        assert_abs_diff_eq!(wrap_to_pi(h0 - h2), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn validate_catches_broken_graphs() {
        let mut s = line(0, [0.0, 0.0], 0.0, 10.0);
        s.p1 = [10.0, 1.0];
        assert!(RoadGraph::new(vec![s], [0.0, 0.0]).is_err());

        let mut s = line(0, [0.0, 0.0], 0.0, 10.0);
        s.successors.push(SegmentId(9));
        assert!(RoadGraph::new(vec![s], [0.0, 0.0]).is_err());

        // successor exists but starts elsewhere
        let a = line(0, [0.0, 0.0], 0.0, 10.0);
        let b = line(1, [50.0, 0.0], 0.0, 10.0);
        let mut a2 = a.clone();
        a2.successors.push(SegmentId(1));
        let mut b2 = b.clone();
        b2.predecessors.push(SegmentId(0));
        assert!(RoadGraph::new(vec![a2, b2], [0.0, 0.0]).is_err());
    }

    #[test]
    fn json_round_trip_is_lossless() {
        let g = partition_for_intersections(&plus_crossing(), INTERSECTION_NEAR, INTERSECTION_FAR)
            .unwrap();
        let s1 = g.to_json_string().unwrap();
        let g2 = RoadGraph::from_json_str(&s1).unwrap();
        let s2 = g2.to_json_string().unwrap();
        assert_eq!(s1, s2);
    }

    #[test]
    fn connect_skips_reverse_twin() {
        let fwd = line(0, [0.0, 0.0], 0.0, 10.0);
        let rev = StreetSegment::new_line(SegmentId(1), [10.0, 0.0], PI, 10.0, 50.0, RoadType::NonHighway);
        let next = line(2, [10.0, 0.0], 0.0, 10.0);
        let mut segs = vec![fwd, rev, next];
        connect_by_endpoints(&mut segs, CONNECT_TOL, false);
        assert_eq!(segs[0].successors, vec![SegmentId(2)]);
        // with u-turns allowed the twin is connected as well
        let mut segs2 = vec![
            line(0, [0.0, 0.0], 0.0, 10.0),
            StreetSegment::new_line(SegmentId(1), [10.0, 0.0], PI, 10.0, 50.0, RoadType::NonHighway),
            line(2, [10.0, 0.0], 0.0, 10.0),
        ];
        connect_by_endpoints(&mut segs2, CONNECT_TOL, true);
        assert!(segs2[0].successors.contains(&SegmentId(1)));
    }
}
