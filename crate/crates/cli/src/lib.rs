//! Command-line tools and the rendering service.

pub mod cli;
pub mod model;
pub mod service;

use serde_json::json;
use stylefield::Error;

/// Short machine-readable name of an error's kind.
pub fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Config(_) => "config",
        Error::Argument(_) => "argument",
        Error::Domain(_) => "domain",
        Error::Numeric(_) => "numeric",
        Error::Data(_) => "data",
        Error::Version { .. } => "version",
        Error::Corrupt(_) => "corrupt",
        Error::Diverged(_) => "diverged",
        Error::Io(_) => "io",
        Error::Image(_) => "image",
    }
}

/// The one-line JSON written to stderr on failure.
pub fn error_report(e: &Error) -> String {
    json!({"error": error_kind(e), "message": e.to_string()}).to_string()
}
