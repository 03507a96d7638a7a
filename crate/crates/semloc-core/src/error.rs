use thiserror::Error;

use crate::road_map::SegmentId;

/// Crate-wide error type. `kind()` gives a stable machine-readable tag used by
/// the CLI's JSON error output.
#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown segment id {}", (.0).0)]
    UnknownSegment(SegmentId),

    #[error("segment {}: {what} = {value} outside [{lo}, {hi}]", segment.0)]
    OutOfRange {
        segment: SegmentId,
        what: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("segment {} is not a successor of segment {}", to.0, from.0)]
    NotASuccessor { from: SegmentId, to: SegmentId },

    #[error("invalid road graph: {0}")]
    InvalidGraph(String),

    #[error("no drivable ways in extract")]
    EmptyMap,

    #[error("OSM parse error at line {line}, column {col}: {message}")]
    XmlParse {
        line: usize,
        col: usize,
        message: String,
    },

    #[error("way {way} references missing node {node}")]
    MissingNode { way: i64, node: i64 },

    #[error("invalid configuration: {0}")]
    BadConfig(String),

    #[error("parameter fitting failed: {0}")]
    Fit(String),

    #[error("posterior mass annihilated at t = {t}")]
    Diverged { t: f64 },

    #[error("{what} = {value} outside supported range")]
    BadCoordinate { what: &'static str, value: f64 },

    #[error("timestamp outside supported range 1950-2050: year {0}")]
    TimeOutOfRange(i32),

    #[error("bad record at line {line}: {message}")]
    BadRecord { line: usize, message: String },

    #[error("route error: {0}")]
    BadRoute(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("TOML error: {0}")]
    Toml(#[from] toml::de::Error),
}

impl Error {
    /// Stable snake_case tag for machine-readable error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::UnknownSegment(_) => "unknown_segment",
            Error::OutOfRange { .. } => "out_of_range",
            Error::NotASuccessor { .. } => "not_a_successor",
            Error::InvalidGraph(_) => "invalid_graph",
            Error::EmptyMap => "empty_map",
            Error::XmlParse { .. } => "xml_parse",
            Error::MissingNode { .. } => "missing_node",
            Error::BadConfig(_) => "bad_config",
            Error::Fit(_) => "fit",
            Error::Diverged { .. } => "diverged",
            Error::BadCoordinate { .. } => "bad_coordinate",
            Error::TimeOutOfRange(_) => "time_out_of_range",
            Error::BadRecord { .. } => "bad_record",
            Error::BadRoute(_) => "bad_route",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
            Error::Toml(_) => "toml",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
