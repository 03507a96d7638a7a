//! Map-based vehicle self-localization.
//!
//! Fuses visual-odometry increments with weak semantic cues — sun direction,
//! intersection visibility, road type and speed limit — in a recursive
//! Bayesian filter over a directed road graph. Ships with an OpenStreetMap
//! ingestion path, a drive simulator, and evaluation metrics.

pub mod angles;
pub mod error;
pub mod filter;
pub mod io;
pub mod metrics;
pub mod observation;
pub mod osm;
pub mod road_map;
pub mod sim;
pub mod solar;

pub use error::{Error, Result};
pub use road_map::{
    IntersectionClass, MapPose, PoseReparam, RoadGraph, RoadType, SegmentId, StreetSegment,
};
