use std::path::PathBuf;

use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl FieldError {
    pub fn new(field: &str, message: impl Into<String>) -> Self {
        Self { field: field.to_string(), message: message.into() }
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration")]
    Config(Vec<FieldError>),
    #[error("missing input {0}")]
    MissingInput(PathBuf),
    #[error("{path}: {detail}")]
    Io { path: PathBuf, detail: String },
    #[error("{stage}: {detail}")]
    Stage { stage: &'static str, detail: String },
    /// `--help` or `--version` output; not a failure.
    #[error("{0}")]
    Help(String),
}

impl CliError {
    pub fn stage(stage: &'static str, err: impl std::fmt::Display) -> Self {
        Self::Stage { stage, detail: err.to_string() }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::MissingInput(_) => 3,
            Self::Io { .. } => 4,
            Self::Stage { .. } => 1,
            Self::Help(_) => 0,
        }
    }

    /// Machine-readable form printed on stderr.
    pub fn to_json(&self) -> Value {
        match self {
            Self::Config(fields) => json!({"error": "invalid_config", "fields": fields}),
            Self::MissingInput(p) => json!({"error": "missing_input", "path": p}),
            Self::Io { path, detail } => json!({"error": "io", "path": path, "detail": detail}),
            Self::Stage { stage, detail } => json!({"error": "stage_failed", "stage": stage, "detail": detail}),
            Self::Help(text) => json!({"help": text}),
        }
    }
}
