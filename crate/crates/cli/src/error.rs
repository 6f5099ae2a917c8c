use serde::Serialize;
use thiserror::Error;

use crate::data::DataError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{0}")]
    Io(String),
    #[error("report {path} has schema version {found}, newer than {supported}; pass --force to overwrite")]
    NewerReport { path: String, found: u32, supported: u32 },
    #[error(transparent)]
    Core(#[from] structsearch::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use structsearch::Error as E;
        match self {
            CliError::Usage(_) | CliError::NewerReport { .. } => 1,
            CliError::Data(_) | CliError::Io(_) => 2,
            CliError::Core(e) => match e {
                E::Parse(_) | E::InvalidInput(_) => 1,
                E::TooSmall(_) => 2,
                _ => 3,
            },
        }
    }

    fn kind(&self) -> &'static str {
        match self.exit_code() {
            1 => "usage",
            2 => "data",
            _ => "numerical",
        }
    }

    /// One-line JSON error record.
    pub fn record(&self) -> String {
        #[derive(Serialize)]
        struct Record<'a> {
            code: i32,
            kind: &'a str,
            message: String,
        }
        let r = Record {
            code: self.exit_code(),
            kind: self.kind(),
            message: self.to_string(),
        };
        format!("{{\"error\":{}}}", serde_json::to_string(&r).expect("plain struct serializes"))
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
