//! File formats: observation / ground-truth / residual CSVs, the posterior
//! bin dump, and route files. Optional CSV fields travel with a sibling
//! `*_valid` flag column (1/0); invalid cells are written as 0.

use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::filter::Posterior;
use crate::observation::{IntersectionObs, ObservationFrame, ResidualRow};
use crate::road_map::{RoadGraph, RoadType, SegmentId};
use crate::sim::GroundTruthFrame;

/// Width of one posterior dump bin along a street, meters.
pub const BIN_WIDTH: f64 = 3.0;

const OBS_HEADER: &[&str] = &[
    "t", "phi", "phi_valid", "inter", "inter_valid", "rtype", "rtype_valid", "v", "v_valid",
    "od_d", "od_th", "od_valid",
];
const GT_HEADER: &[&str] = &["t", "segment_id", "d", "theta", "x", "y", "heading", "v"];
const RESIDUAL_HEADER: &[&str] = &[
    "t", "class", "res_d", "res_theta", "res_sun", "inter_pred", "inter_gt", "rtype_pred",
    "rtype_gt",
];
const DUMP_HEADER: &[&str] = &["t", "segment_id", "bin_start_m", "mass"];

fn bad_record(line: usize, message: impl Into<String>) -> Error {
    Error::BadRecord { line, message: message.into() }
}

fn parse_f64(field: &str, name: &str, line: usize) -> Result<f64> {
    field
        .trim()
        .parse()
        .map_err(|_| bad_record(line, format!("bad {name}: {field:?}")))
}

fn parse_flag(field: &str, name: &str, line: usize) -> Result<bool> {
    match field.trim() {
        "1" => Ok(true),
        "0" => Ok(false),
        other => Err(bad_record(line, format!("bad {name} flag: {other:?}"))),
    }
}

fn parse_inter(field: &str, line: usize) -> Result<IntersectionObs> {
    match field.trim() {
        "visible" => Ok(IntersectionObs::Visible),
        "not_visible" => Ok(IntersectionObs::NotVisible),
        other => Err(bad_record(line, format!("bad intersection label: {other:?}"))),
    }
}

fn parse_rtype(field: &str, line: usize) -> Result<RoadType> {
    match field.trim() {
        "highway" => Ok(RoadType::Highway),
        "non_highway" => Ok(RoadType::NonHighway),
        other => Err(bad_record(line, format!("bad road type: {other:?}"))),
    }
}

fn inter_str(i: IntersectionObs) -> &'static str {
    match i {
        IntersectionObs::Visible => "visible",
        IntersectionObs::NotVisible => "not_visible",
    }
}

fn rtype_str(r: RoadType) -> &'static str {
    match r {
        RoadType::Highway => "highway",
        RoadType::NonHighway => "non_highway",
    }
}

fn check_header(got: &csv::StringRecord, want: &[&str]) -> Result<()> {
    if got.len() != want.len() || got.iter().zip(want).any(|(g, w)| g.trim() != *w) {
        return Err(bad_record(1, format!("expected header {}", want.join(","))));
    }
    Ok(())
}

pub fn write_observations_csv<W: Write>(w: W, frames: &[ObservationFrame]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(OBS_HEADER)?;
    for f in frames {
        let (phi, phi_valid) = match f.phi {
            Some(v) => (v.to_string(), "1"),
            None => ("0".into(), "0"),
        };
        let (inter, inter_valid) = match f.inter {
            Some(i) => (inter_str(i), "1"),
            None => ("not_visible", "0"),
        };
        let (rtype, rtype_valid) = match f.rtype {
            Some(r) => (rtype_str(r), "1"),
            None => ("non_highway", "0"),
        };
        let (v, v_valid) = match f.velocity {
            Some(v) => (v.to_string(), "1"),
            None => ("0".into(), "0"),
        };
        let (od_d, od_th, od_valid) = match f.odom {
            Some(o) => (o[0].to_string(), o[1].to_string(), "1"),
            None => ("0".into(), "0".into(), "0"),
        };
        out.write_record([
            f.t.to_string().as_str(),
            &phi,
            phi_valid,
            inter,
            inter_valid,
            rtype,
            rtype_valid,
            &v,
            v_valid,
            &od_d,
            &od_th,
            od_valid,
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_observations_csv<R: std::io::Read>(r: R) -> Result<Vec<ObservationFrame>> {
    let mut rdr = csv::Reader::from_reader(r);
    check_header(rdr.headers()?, OBS_HEADER)?;
    let mut frames = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec?;
        if rec.len() != OBS_HEADER.len() {
            return Err(bad_record(line, format!("expected {} fields", OBS_HEADER.len())));
        }
        let t = parse_f64(&rec[0], "t", line)?;
        let phi = parse_flag(&rec[2], "phi", line)?
            .then(|| parse_f64(&rec[1], "phi", line))
            .transpose()?;
        let inter = parse_flag(&rec[4], "inter", line)?
            .then(|| parse_inter(&rec[3], line))
            .transpose()?;
        let rtype = parse_flag(&rec[6], "rtype", line)?
            .then(|| parse_rtype(&rec[5], line))
            .transpose()?;
        let velocity = parse_flag(&rec[8], "v", line)?
            .then(|| parse_f64(&rec[7], "v", line))
            .transpose()?;
        let odom = parse_flag(&rec[11], "od", line)?
            .then(|| -> Result<[f64; 2]> {
                Ok([parse_f64(&rec[9], "od_d", line)?, parse_f64(&rec[10], "od_th", line)?])
            })
            .transpose()?;
        frames.push(ObservationFrame { t, phi, inter, rtype, velocity, odom });
    }
    Ok(frames)
}

pub fn write_ground_truth_csv<W: Write>(w: W, frames: &[GroundTruthFrame]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(GT_HEADER)?;
    for f in frames {
        out.write_record([
            f.t.to_string(),
            f.pose.u.0.to_string(),
            f.pose.d.to_string(),
            f.pose.theta.to_string(),
            f.position[0].to_string(),
            f.position[1].to_string(),
            f.heading.to_string(),
            f.velocity.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_ground_truth_csv<R: std::io::Read>(r: R) -> Result<Vec<GroundTruthFrame>> {
    let mut rdr = csv::Reader::from_reader(r);
    check_header(rdr.headers()?, GT_HEADER)?;
    let mut frames = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec?;
        if rec.len() != GT_HEADER.len() {
            return Err(bad_record(line, format!("expected {} fields", GT_HEADER.len())));
        }
        let id: u32 = rec[1]
            .trim()
            .parse()
            .map_err(|_| bad_record(line, format!("bad segment_id: {:?}", &rec[1])))?;
        frames.push(GroundTruthFrame {
            t: parse_f64(&rec[0], "t", line)?,
            pose: crate::road_map::MapPose {
                u: SegmentId(id),
                d: parse_f64(&rec[2], "d", line)?,
                theta: parse_f64(&rec[3], "theta", line)?,
            },
            position: [parse_f64(&rec[4], "x", line)?, parse_f64(&rec[5], "y", line)?],
            heading: parse_f64(&rec[6], "heading", line)?,
            velocity: parse_f64(&rec[7], "v", line)?,
        });
    }
    Ok(frames)
}

pub fn write_residuals_csv<W: Write>(w: W, rows: &[ResidualRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(RESIDUAL_HEADER)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        out.write_record([
            r.t.to_string().as_str(),
            rtype_str(r.class),
            &opt(r.res_d),
            &opt(r.res_theta),
            &opt(r.res_sun),
            r.inter_pred.map(inter_str).unwrap_or_default(),
            r.inter_gt.map(inter_str).unwrap_or_default(),
            r.rtype_pred.map(rtype_str).unwrap_or_default(),
            r.rtype_gt.map(rtype_str).unwrap_or_default(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_residuals_csv<R: std::io::Read>(r: R) -> Result<Vec<ResidualRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    check_header(rdr.headers()?, RESIDUAL_HEADER)?;
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec?;
        if rec.len() != RESIDUAL_HEADER.len() {
            return Err(bad_record(line, format!("expected {} fields", RESIDUAL_HEADER.len())));
        }
        let opt_f = |idx: usize, name: &str| -> Result<Option<f64>> {
            let field = rec[idx].trim();
            if field.is_empty() {
                Ok(None)
            } else {
                parse_f64(field, name, line).map(Some)
            }
        };
        let opt_inter = |idx: usize| -> Result<Option<IntersectionObs>> {
            let field = rec[idx].trim();
            if field.is_empty() {
                Ok(None)
            } else {
                parse_inter(field, line).map(Some)
            }
        };
        let opt_rtype = |idx: usize| -> Result<Option<RoadType>> {
            let field = rec[idx].trim();
            if field.is_empty() {
                Ok(None)
            } else {
                parse_rtype(field, line).map(Some)
            }
        };
        rows.push(ResidualRow {
            t: parse_f64(&rec[0], "t", line)?,
            class: parse_rtype(&rec[1], line)?,
            res_d: opt_f(2, "res_d")?,
            res_theta: opt_f(3, "res_theta")?,
            res_sun: opt_f(4, "res_sun")?,
            inter_pred: opt_inter(5)?,
            inter_gt: opt_inter(6)?,
            rtype_pred: opt_rtype(7)?,
            rtype_gt: opt_rtype(8)?,
        });
    }
    Ok(rows)
}

/// One dump row: mass of a 3 m street bin at one time step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorBin {
    pub t: f64,
    pub segment: SegmentId,
    pub bin_start: f64,
    pub mass: f64,
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Project the posterior's along-street marginal onto 3 m bins. Component
/// tails beyond the street ends are clamped into the first and last bin, so
/// each segment's bins carry exactly its full weight.
pub fn posterior_bins(post: &Posterior, graph: &RoadGraph) -> Result<Vec<PosteriorBin>> {
    let mut bins = Vec::new();
    for (i, m) in post.segments.iter().enumerate() {
        if m.weight == 0.0 {
            continue;
        }
        let seg = graph.get(SegmentId(i as u32))?;
        let n_bins = (seg.length / BIN_WIDTH).ceil().max(1.0) as usize;
        let mut masses = vec![0.0f64; n_bins];
        for c in &m.components {
            let mu = c.mean[0];
            let sigma = c.cov[(0, 0)].max(1e-12).sqrt();
            let total = m.weight * c.pi;
            let mut cdf_lo = 0.0; // everything below the street start
            for (b, slot) in masses.iter_mut().enumerate() {
                let hi = ((b + 1) as f64 * BIN_WIDTH).min(seg.length);
                let cdf_hi = if b + 1 == n_bins {
                    1.0 // clamp the tail beyond the street end
                } else {
                    std_normal_cdf((hi - mu) / sigma)
                };
                *slot += total * (cdf_hi - cdf_lo).max(0.0);
                cdf_lo = cdf_hi;
            }
        }
        for (b, &mass) in masses.iter().enumerate() {
            if mass > 0.0 {
                bins.push(PosteriorBin {
                    t: post.t,
                    segment: SegmentId(i as u32),
                    bin_start: b as f64 * BIN_WIDTH,
                    mass,
                });
            }
        }
    }
    Ok(bins)
}

/// Incremental dump writer; call `frame` once per time step (including the
/// initial posterior before any observation).
pub struct PosteriorDumpWriter<W: Write> {
    out: csv::Writer<W>,
}

impl<W: Write> PosteriorDumpWriter<W> {
    pub fn new(w: W) -> Result<Self> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(DUMP_HEADER)?;
        Ok(Self { out })
    }

    pub fn frame(&mut self, post: &Posterior, graph: &RoadGraph) -> Result<()> {
        for b in posterior_bins(post, graph)? {
            self.out.write_record([
                b.t.to_string(),
                b.segment.0.to_string(),
                b.bin_start.to_string(),
                b.mass.to_string(),
            ])?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

/// Dump rows grouped by time step, in file order.
pub fn read_posterior_dump<R: std::io::Read>(r: R) -> Result<Vec<Vec<PosteriorBin>>> {
    let mut rdr = csv::Reader::from_reader(r);
    check_header(rdr.headers()?, DUMP_HEADER)?;
    let mut frames: Vec<Vec<PosteriorBin>> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec?;
        if rec.len() != DUMP_HEADER.len() {
            return Err(bad_record(line, format!("expected {} fields", DUMP_HEADER.len())));
        }
        let id: u32 = rec[1]
            .trim()
            .parse()
            .map_err(|_| bad_record(line, format!("bad segment_id: {:?}", &rec[1])))?;
        let bin = PosteriorBin {
            t: parse_f64(&rec[0], "t", line)?,
            segment: SegmentId(id),
            bin_start: parse_f64(&rec[2], "bin_start_m", line)?,
            mass: parse_f64(&rec[3], "mass", line)?,
        };
        match frames.last_mut() {
            Some(last) if last[0].t == bin.t => last.push(bin),
            _ => frames.push(vec![bin]),
        }
    }
    Ok(frames)
}

/// Route file: one segment id per line; blank lines and `#` comments allowed.
pub fn read_route<R: std::io::Read>(r: R) -> Result<Vec<SegmentId>> {
    let mut route = Vec::new();
    for (i, line) in std::io::BufReader::new(r).lines().enumerate() {
        let line = line?;
        let text = line.split('#').next().unwrap_or("").trim();
        if text.is_empty() {
            continue;
        }
        let id: u32 = text
            .parse()
            .map_err(|_| bad_record(i + 1, format!("bad segment id: {text:?}")))?;
        route.push(SegmentId(id));
    }
    if route.is_empty() {
        return Err(Error::BadRoute("route file contains no segments".into()));
    }
    Ok(route)
}

pub fn save_observations(path: &Path, frames: &[ObservationFrame]) -> Result<()> {
    write_observations_csv(std::fs::File::create(path)?, frames)
}

pub fn load_observations(path: &Path) -> Result<Vec<ObservationFrame>> {
    read_observations_csv(std::fs::File::open(path)?)
}

pub fn save_ground_truth(path: &Path, frames: &[GroundTruthFrame]) -> Result<()> {
    write_ground_truth_csv(std::fs::File::create(path)?, frames)
}

pub fn load_ground_truth(path: &Path) -> Result<Vec<GroundTruthFrame>> {
    read_ground_truth_csv(std::fs::File::open(path)?)
}

pub fn save_residuals(path: &Path, rows: &[ResidualRow]) -> Result<()> {
    write_residuals_csv(std::fs::File::create(path)?, rows)
}

pub fn load_residuals(path: &Path) -> Result<Vec<ResidualRow>> {
    read_residuals_csv(std::fs::File::open(path)?)
}

pub fn load_posterior_dump(path: &Path) -> Result<Vec<Vec<PosteriorBin>>> {
    read_posterior_dump(std::fs::File::open(path)?)
}

pub fn load_route(path: &Path) -> Result<Vec<SegmentId>> {
    read_route(std::fs::File::open(path)?)
}
