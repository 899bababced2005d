//! Error categories and their exit codes.

use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    Internal,
    Usage,
    Io,
    Config,
    Input,
    Fit,
    Geometry,
}

impl Category {
    pub fn exit_code(self) -> i32 {
        match self {
            Category::Internal => 1,
            Category::Usage => 2,
            Category::Io => 3,
            Category::Config => 4,
            Category::Input => 5,
            Category::Fit => 6,
            Category::Geometry => 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CliError {
    pub category: Category,
    pub message: String,
}

impl CliError {
    pub fn new(category: Category, message: impl Into<String>) -> Self {
        Self {
            category,
            message: message.into(),
        }
    }

    /// Single-line JSON for stderr.
    pub fn to_json(&self) -> String {
        serde_json::to_string(&serde_json::json!({ "error": self })).expect("error serializes")
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}: {}", self.category, self.message)
    }
}

impl std::error::Error for CliError {}

pub trait ResultExt<T> {
    fn context(self, category: Category, what: &str) -> Result<T, CliError>;
}

impl<T, E: fmt::Display> ResultExt<T> for Result<T, E> {
    fn context(self, category: Category, what: &str) -> Result<T, CliError> {
        self.map_err(|e| CliError::new(category, format!("{what}: {e}")))
    }
}

impl From<vertplan_core::io::IoError> for CliError {
    fn from(e: vertplan_core::io::IoError) -> Self {
        use vertplan_core::io::IoError;
        let category = match e {
            IoError::Io { .. } => Category::Io,
            IoError::Parse { .. } | IoError::Version { .. } | IoError::Model { .. } => Category::Input,
        };
        CliError::new(category, e.to_string())
    }
}

impl From<vertplan_core::image::ImageError> for CliError {
    fn from(e: vertplan_core::image::ImageError) -> Self {
        use vertplan_core::image::ImageError;
        let category = match e {
            ImageError::Io { .. } => Category::Io,
            _ => Category::Input,
        };
        CliError::new(category, e.to_string())
    }
}
