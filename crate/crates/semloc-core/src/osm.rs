//! OpenStreetMap XML ingestion: parse a `.osm` extract, keep the drivable
//! ways, and build a directed [`RoadGraph`] with speed limits and collapsed
//! road types.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use quick_xml::events::{BytesStart, Event};
use quick_xml::Reader;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::road_map::{
    partition_for_intersections, RoadGraph, RoadType, SegmentId, StreetSegment, INTERSECTION_FAR,
    INTERSECTION_NEAR,
};

/// Mean Earth radius used by the local equirectangular projection.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// `highway=*` values collapsed to [`RoadType::Highway`]; everything else
/// drivable is non-highway.
pub const HIGHWAY_CLASSES: [&str; 4] = ["motorway", "motorway_link", "trunk", "trunk_link"];

const DEFAULT_ALLOWLIST: [&str; 14] = [
    "motorway",
    "motorway_link",
    "trunk",
    "trunk_link",
    "primary",
    "primary_link",
    "secondary",
    "secondary_link",
    "tertiary",
    "tertiary_link",
    "residential",
    "unclassified",
    "service",
    "living_street",
];

const DEFAULT_SPEEDS: [(&str, f64); 9] = [
    ("motorway", 100.0),
    ("trunk", 100.0),
    ("primary", 60.0),
    ("secondary", 50.0),
    ("tertiary", 50.0),
    ("residential", 30.0),
    ("living_street", 30.0),
    ("service", 30.0),
    ("unclassified", 30.0),
];

const KMH_PER_MPH: f64 = 1.609344;

/// Ingestion knobs: which `highway=*` values count as drivable, and the
/// per-class speed defaults (km/h) used when `maxspeed` is absent or
/// unparseable. `*_link` values fall back to their base class.
#[derive(Debug, Clone)]
pub struct IngestConfig {
    pub allowlist: Vec<String>,
    pub speed_defaults: BTreeMap<String, f64>,
    /// Used when a drivable class has no table entry at all.
    pub fallback_speed: f64,
    pub allow_u_turns: bool,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            allowlist: DEFAULT_ALLOWLIST.iter().map(|s| s.to_string()).collect(),
            speed_defaults: DEFAULT_SPEEDS
                .iter()
                .map(|(k, v)| (k.to_string(), *v))
                .collect(),
            fallback_speed: 50.0,
            allow_u_turns: false,
        }
    }
}

#[derive(Debug, Deserialize)]
struct ConfigOverrides {
    allowlist: Option<Vec<String>>,
    fallback_speed: Option<f64>,
    allow_u_turns: Option<bool>,
    speed_defaults: Option<BTreeMap<String, f64>>,
}

impl IngestConfig {
    /// Defaults overridden by whatever keys the TOML document provides;
    /// `speed_defaults` entries are merged per class.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let ov: ConfigOverrides = toml::from_str(text)?;
        let mut cfg = Self::default();
        if let Some(a) = ov.allowlist {
            cfg.allowlist = a;
        }
        if let Some(f) = ov.fallback_speed {
            if !(f > 0.0) {
                return Err(Error::BadConfig(format!(
                    "fallback_speed must be positive, got {f}"
                )));
            }
            cfg.fallback_speed = f;
        }
        if let Some(u) = ov.allow_u_turns {
            cfg.allow_u_turns = u;
        }
        if let Some(s) = ov.speed_defaults {
            for (k, v) in s {
                if !(v > 0.0) {
                    return Err(Error::BadConfig(format!(
                        "speed default for '{k}' must be positive, got {v}"
                    )));
                }
                cfg.speed_defaults.insert(k, v);
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    fn is_drivable(&self, tags: &BTreeMap<String, String>) -> bool {
        tags.get("highway")
            .map(|v| self.allowlist.iter().any(|a| a == v))
            .unwrap_or(false)
    }

    fn default_speed_for(&self, highway: Option<&str>) -> f64 {
        let Some(h) = highway else {
            return self.fallback_speed;
        };
        if let Some(&v) = self.speed_defaults.get(h) {
            return v;
        }
        if let Some(base) = h.strip_suffix("_link") {
            if let Some(&v) = self.speed_defaults.get(base) {
                return v;
            }
        }
        self.fallback_speed
    }
}

#[derive(Debug, Clone, Default)]
pub struct OsmWay {
    pub nodes: Vec<i64>,
    pub tags: BTreeMap<String, String>,
}

/// Nodes and drivable ways of an OSM extract.
#[derive(Debug, Clone, Default)]
pub struct OsmExtract {
    pub nodes: BTreeMap<i64, [f64; 2]>,
    pub ways: BTreeMap<i64, OsmWay>,
}

fn line_col(xml: &[u8], offset: usize) -> (usize, usize) {
    let upto = &xml[..offset.min(xml.len())];
    let line = 1 + upto.iter().filter(|&&b| b == b'\n').count();
    let col = offset - upto.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1) + 1;
    (line, col)
}

fn xml_err(xml: &[u8], offset: usize, message: String) -> Error {
    let (line, col) = line_col(xml, offset);
    Error::XmlParse { line, col, message }
}

fn attr(e: &BytesStart, name: &str, xml: &[u8], offset: usize) -> Result<String> {
    match e.try_get_attribute(name) {
        Ok(Some(a)) => match a.unescape_value() {
            Ok(v) => Ok(v.into_owned()),
            Err(err) => Err(xml_err(xml, offset, err.to_string())),
        },
        Ok(None) => Err(xml_err(
            xml,
            offset,
            format!("<{}> missing attribute '{name}'", String::from_utf8_lossy(e.name().as_ref())),
        )),
        Err(err) => Err(xml_err(xml, offset, err.to_string())),
    }
}

fn attr_num<T: std::str::FromStr>(e: &BytesStart, name: &str, xml: &[u8], offset: usize) -> Result<T> {
    let raw = attr(e, name, xml, offset)?;
    raw.parse().map_err(|_| {
        xml_err(xml, offset, format!("attribute '{name}' is not a number: '{raw}'"))
    })
}

/// Parse OSM XML (node / way / nd / tag subset). All nodes are kept; only
/// ways whose `highway` tag is in the allowlist survive. Every node a kept
/// way references must resolve.
pub fn parse_osm(xml: &[u8], config: &IngestConfig) -> Result<OsmExtract> {
    let mut reader = Reader::from_reader(xml);
    let mut extract = OsmExtract::default();
    let mut buf = Vec::new();
    // (way id, way) while inside a <way> element
    let mut open_way: Option<(i64, OsmWay)> = None;

    loop {
        let offset = reader.buffer_position() as usize;
        let event = reader
            .read_event_into(&mut buf)
            .map_err(|e| xml_err(xml, reader.buffer_position() as usize, e.to_string()))?;
        match event {
            Event::Eof => break,
            Event::Start(ref e) | Event::Empty(ref e) => {
                let is_empty = matches!(event, Event::Empty(_));
                match e.name().as_ref() {
                    b"node" => {
                        let id: i64 = attr_num(e, "id", xml, offset)?;
                        let lat: f64 = attr_num(e, "lat", xml, offset)?;
                        let lon: f64 = attr_num(e, "lon", xml, offset)?;
                        extract.nodes.insert(id, [lat, lon]);
                    }
                    b"way" => {
                        let id: i64 = attr_num(e, "id", xml, offset)?;
                        let way = (id, OsmWay::default());
                        if is_empty {
                            // degenerate empty way; drop
                        } else {
                            open_way = Some(way);
                        }
                    }
                    b"nd" => {
                        if let Some((_, way)) = open_way.as_mut() {
                            way.nodes.push(attr_num(e, "ref", xml, offset)?);
                        }
                    }
                    b"tag" => {
                        if let Some((_, way)) = open_way.as_mut() {
                            let k = attr(e, "k", xml, offset)?;
                            let v = attr(e, "v", xml, offset)?;
                            way.tags.insert(k, v);
                        }
                    }
                    _ => {}
                }
            }
            Event::End(ref e) if e.name().as_ref() == b"way" => {
                if let Some((id, way)) = open_way.take() {
                    if config.is_drivable(&way.tags) && way.nodes.len() >= 2 {
                        extract.ways.insert(id, way);
                    }
                }
            }
            _ => {}
        }
        buf.clear();
    }

    for (&wid, way) in &extract.ways {
        for &nid in &way.nodes {
            if !extract.nodes.contains_key(&nid) {
                return Err(Error::MissingNode { way: wid, node: nid });
            }
        }
    }
    Ok(extract)
}

/// Collapse `highway=*` to the binary road type used by the road-type cue.
pub fn classify_road_type(tags: &BTreeMap<String, String>) -> RoadType {
    match tags.get("highway") {
        Some(v) if HIGHWAY_CLASSES.contains(&v.as_str()) => RoadType::Highway,
        _ => RoadType::NonHighway,
    }
}

fn parse_maxspeed(raw: &str) -> Option<f64> {
    let s = raw.trim();
    if let Some(num) = s.strip_suffix("mph") {
        num.trim().parse::<f64>().ok().map(|v| v * KMH_PER_MPH)
    } else {
        s.parse::<f64>().ok()
    }
}

/// Speed limit in km/h from `maxspeed`, with `N mph` converted; absent or
/// unparseable values fall back to the class default (logged as a warning).
pub fn resolve_speed_limit(tags: &BTreeMap<String, String>, config: &IngestConfig) -> f64 {
    let default = config.default_speed_for(tags.get("highway").map(String::as_str));
    match tags.get("maxspeed") {
        None => default,
        Some(raw) => match parse_maxspeed(raw) {
            Some(v) if v > 0.0 => v,
            _ => {
                log::warn!("unparseable maxspeed '{raw}', using class default {default} km/h");
                default
            }
        },
    }
}

/// Project (lat, lon) to local meters about `origin` (equirectangular).
pub fn project_to_local(origin: [f64; 2], lat: f64, lon: f64) -> [f64; 2] {
    let x = EARTH_RADIUS_M * (lon - origin[1]).to_radians() * origin[0].to_radians().cos();
    let y = EARTH_RADIUS_M * (lat - origin[0]).to_radians();
    [x, y]
}

/// Inverse of [`project_to_local`]; returns (lat, lon).
pub fn local_to_lat_lon(origin: [f64; 2], p: [f64; 2]) -> [f64; 2] {
    let lat = origin[0] + (p[1] / EARTH_RADIUS_M).to_degrees();
    let lon = origin[1] + (p[0] / (EARTH_RADIUS_M * origin[0].to_radians().cos())).to_degrees();
    [lat, lon]
}

/// Turn an extract into a directed graph: every consecutive node pair of a
/// way becomes one straight segment per driving direction (`oneway` tags
/// respected), wired together at shared nodes. The frame origin is the mean
/// of the referenced node coordinates.
pub fn build_graph(extract: &OsmExtract, config: &IngestConfig) -> Result<RoadGraph> {
    if extract.ways.is_empty() {
        return Err(Error::EmptyMap);
    }
    let mut used: BTreeSet<i64> = BTreeSet::new();
    for way in extract.ways.values() {
        used.extend(way.nodes.iter().copied());
    }
    let mut origin = [0.0, 0.0];
    for &nid in &used {
        let node = extract
            .nodes
            .get(&nid)
            .expect("checked during parse");
        origin[0] += node[0];
        origin[1] += node[1];
    }
    origin[0] /= used.len() as f64;
    origin[1] /= used.len() as f64;

    let local: BTreeMap<i64, [f64; 2]> = used
        .iter()
        .map(|&nid| {
            let n = extract.nodes[&nid];
            (nid, project_to_local(origin, n[0], n[1]))
        })
        .collect();

    let mut segments: Vec<StreetSegment> = Vec::new();
    let mut endpoints: Vec<(i64, i64)> = Vec::new(); // (from node, to node) per segment
    for (&wid, way) in &extract.ways {
        let road_type = classify_road_type(&way.tags);
        let speed = resolve_speed_limit(&way.tags, config);
        let (fwd, rev) = match way.tags.get("oneway").map(String::as_str) {
            Some("yes") | Some("true") | Some("1") => (true, false),
            Some("-1") | Some("reverse") => (false, true),
            _ => (true, true),
        };
        for pair in way.nodes.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            let (pa, pb) = (local[&a], local[&b]);
            let length = ((pb[0] - pa[0]).powi(2) + (pb[1] - pa[1]).powi(2)).sqrt();
            if length < 1e-9 {
                log::warn!("way {wid}: skipping zero-length hop {a} -> {b}");
                continue;
            }
            if fwd {
                let beta = (pb[1] - pa[1]).atan2(pb[0] - pa[0]);
                segments.push(StreetSegment::new_line(
                    SegmentId(segments.len() as u32),
                    pa,
                    beta,
                    length,
                    speed,
                    road_type,
                ));
                endpoints.push((a, b));
            }
            if rev {
                let beta = (pa[1] - pb[1]).atan2(pa[0] - pb[0]);
                segments.push(StreetSegment::new_line(
                    SegmentId(segments.len() as u32),
                    pb,
                    beta,
                    length,
                    speed,
                    road_type,
                ));
                endpoints.push((b, a));
            }
        }
    }
    if segments.is_empty() {
        return Err(Error::EmptyMap);
    }

    let mut outgoing: HashMap<i64, Vec<usize>> = HashMap::new();
    for (i, &(from, _)) in endpoints.iter().enumerate() {
        outgoing.entry(from).or_default().push(i);
    }
    for i in 0..segments.len() {
        let (from, to) = endpoints[i];
        if let Some(cands) = outgoing.get(&to) {
            for &j in cands {
                if j == i {
                    continue;
                }
                // do not wire the immediate turn-back onto the node we came from
                if !config.allow_u_turns && endpoints[j].1 == from && endpoints[j].0 == to {
                    continue;
                }
                let id = segments[j].id;
                segments[i].successors.push(id);
            }
        }
    }
    let links: Vec<(SegmentId, Vec<SegmentId>)> = segments
        .iter()
        .map(|s| (s.id, s.successors.clone()))
        .collect();
    for (id, succs) in links {
        for s in succs {
            segments[s.index()].predecessors.push(id);
        }
    }

    RoadGraph::new(segments, origin)
}

/// Full pipeline: parse, build, and apply intersection-visibility
/// partitioning. This is what `semloc ingest-map` writes out.
pub fn ingest(xml: &[u8], config: &IngestConfig) -> Result<RoadGraph> {
    let extract = parse_osm(xml, config)?;
    let raw = build_graph(&extract, config)?;
    partition_for_intersections(&raw, INTERSECTION_NEAR, INTERSECTION_FAR)
}
