use std::path::PathBuf;

use thiserror::Error;

use crate::hierarchy::NodeId;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    // hierarchy
    #[error("edge list is empty")]
    EmptyEdgeList,
    #[error("empty node name on line {line}")]
    EmptyName { line: usize },
    #[error("self-edge on node '{0}'")]
    SelfEdge(String),
    #[error("duplicate edge {child} -> {parent}")]
    DuplicateEdge { child: String, parent: String },
    #[error("cycle detected: {}", format_edges(.0))]
    CycleDetected(Vec<(String, String)>),
    #[error("{} node(s) unreachable from root: {}", .0.len(), .0.join(", "))]
    UnreachableNodes(Vec<String>),
    #[error("declared root '{0}' has parents")]
    RootHasParents(String),
    #[error("unknown node {0}")]
    UnknownNode(String),
    #[error("depth {depth} out of range 0..={max}")]
    DepthOutOfRange { depth: usize, max: usize },
    #[error("invalid class split: {0}")]
    InvalidSplit(String),

    // features
    #[error("zero vector for owner {0}")]
    ZeroVector(u64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("duplicate owner id {0}")]
    DuplicateOwner(u64),
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported feature file version {0}")]
    VersionUnsupported(u32),
    #[error("truncated feature file: {0}")]
    TruncatedFile(String),

    // sampling / loss / weights
    #[error("similarity sampling requires class embeddings")]
    MissingEmbeddings,
    #[error("ratio {0} outside [0, 1]")]
    InvalidRatio(f64),
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("{0} is the root and cannot be used as a label or anchor")]
    RootLabel(NodeId),
    #[error("empty batch")]
    EmptyBatch,
    #[error("adaptive weighting requires parameters")]
    MissingParams,
    #[error("inverse-frequency weighting requires per-depth class counts")]
    MissingCounts,
    #[error("zero class count at depth {0}")]
    ZeroCount(usize),

    // training / evaluation
    #[error("label {0} is not a seen class")]
    LabelNotSeen(String),
    #[error("class '{class}' has {have} images, needs {need}")]
    InsufficientImages {
        class: String,
        have: usize,
        need: usize,
    },
    #[error("no candidate classes")]
    EmptyCandidates,
    #[error("empty test set")]
    EmptyTestSet,

    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn format_edges(edges: &[(String, String)]) -> String {
    edges
        .iter()
        .map(|(c, p)| format!("({c},{p})"))
        .collect::<Vec<_>>()
        .join(" ")
}

impl Error {
    /// Stable short code printed as a prefix on the diagnostic stream.
    pub fn code(&self) -> &'static str {
        match self {
            Error::EmptyEdgeList => "E101",
            Error::EmptyName { .. } => "E102",
            Error::SelfEdge(_) => "E103",
            Error::DuplicateEdge { .. } => "E104",
            Error::CycleDetected(_) => "E105",
            Error::UnreachableNodes(_) => "E106",
            Error::RootHasParents(_) => "E107",
            Error::UnknownNode(_) => "E108",
            Error::DepthOutOfRange { .. } => "E109",
            Error::InvalidSplit(_) => "E110",
            Error::ZeroVector(_) => "E201",
            Error::DimMismatch { .. } => "E202",
            Error::DuplicateOwner(_) => "E203",
            Error::BadMagic => "E204",
            Error::VersionUnsupported(_) => "E205",
            Error::TruncatedFile(_) => "E206",
            Error::MissingEmbeddings => "E301",
            Error::InvalidRatio(_) => "E302",
            Error::NonPositiveTemperature(_) => "E303",
            Error::RootLabel(_) => "E304",
            Error::EmptyBatch => "E305",
            Error::MissingParams => "E306",
            Error::MissingCounts => "E307",
            Error::ZeroCount(_) => "E308",
            Error::LabelNotSeen(_) => "E401",
            Error::InsufficientImages { .. } => "E402",
            Error::EmptyCandidates => "E403",
            Error::EmptyTestSet => "E404",
            Error::Config(_) => "E501",
            Error::Parse { .. } => "E502",
            Error::Io(_) => "E503",
        }
    }
}
