use std::path::PathBuf;

use thiserror::Error;

use crate::grid::NodeId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("malformed grid: {0}")]
    Structure(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("path endpoints must differ, got {0} twice")]
    SameNode(NodeId),
    #[error("{0} is not a DG")]
    NotADg(NodeId),
    #[error("grid file line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GenError {
    #[error("invalid generation parameter: {0}")]
    Parameter(String),
    #[error("no connected graph after {0} attempts")]
    Disconnected(usize),
    #[error(transparent)]
    Grid(#[from] GridError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("invalid protocol parameter: {0}")]
    Parameter(String),
    #[error("{0} is not a smart node but must relay data")]
    NotSmart(NodeId),
    #[error(transparent)]
    Grid(#[from] GridError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("invalid controller input: {0}")]
    Input(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Csv { path: PathBuf, msg: String },
    #[error("empty loss series")]
    EmptySeries,
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Gen(#[from] GenError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Control(#[from] ControlError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
