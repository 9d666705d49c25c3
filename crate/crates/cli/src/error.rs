use std::fmt;

use sunformer::aggregate::AggregateError;
use sunformer::evaluate::EvalError;
use sunformer::geometry::GeometryError;
use sunformer::model::ModelError;
use sunformer::synth::dataset::DatasetError;
use sunformer::synth::SynthError;
use sunformer::train::{CheckpointError, TrainError};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

/// An error tagged with the process exit status it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub msg: String,
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, msg: msg.into() }
    }
    pub fn data(msg: impl Into<String>) -> Self {
        Self { code: EXIT_DATA, msg: msg.into() }
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Self { code: EXIT_NUMERIC, msg: msg.into() }
    }

    pub fn context(self, what: &str) -> Self {
        Self { msg: format!("{what}: {}", self.msg), ..self }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Exists(_) => Self::usage(e.to_string()),
            _ => Self::data(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Exists(_) => Self::usage(e.to_string()),
            _ => Self::data(e.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        Self::usage(e.to_string())
    }
}

impl From<GeometryError> for CliError {
    fn from(e: GeometryError) -> Self {
        match e {
            GeometryError::Range(_) => Self::usage(e.to_string()),
            _ => Self::numeric(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) | ModelError::Encoding(_) => Self::usage(e.to_string()),
            ModelError::NonFinite { .. } | ModelError::Tensor(_) => Self::numeric(e.to_string()),
            ModelError::Input(_) | ModelError::Weights(_) => Self::data(e.to_string()),
        }
    }
}

impl From<AggregateError> for CliError {
    fn from(e: AggregateError) -> Self {
        match e {
            AggregateError::Bandwidth(_) | AggregateError::OutlierSigma(_) => Self::usage(e.to_string()),
            AggregateError::Parse { .. } | AggregateError::Io(_) | AggregateError::Empty => Self::data(e.to_string()),
            _ => Self::numeric(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => Self::usage(e.to_string()),
            TrainError::Model(m) => m.into(),
            TrainError::Sink(_) => Self::data(e.to_string()),
            _ => Self::numeric(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Model { scene_id, source } => CliError::from(source).context(&format!("sequence {scene_id}")),
            EvalError::Aggregate { scene_id, source } => CliError::from(source).context(&format!("sequence {scene_id}")),
            EvalError::Checkpoint(c) => c.into(),
            EvalError::Geometry(g) => g.into(),
            EvalError::Exists(_) => Self::usage(e.to_string()),
            EvalError::TooFew(_) => Self::numeric(e.to_string()),
            EvalError::Empty | EvalError::Io { .. } => Self::data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::data(e.to_string())
    }
}
