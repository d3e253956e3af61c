//! Error-to-exit-code mapping and the one-line stderr format.

use cibi_core::Error;

/// Print a human-readable line, tolerating a closed stdout (`cibi ... | head`).
#[macro_export]
macro_rules! outln {
    ($($t:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn runtime(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_RUNTIME,
            message: message.into(),
        }
    }

    /// One line of JSON on stderr, valid for any message content.
    pub fn render_line(&self) -> String {
        let kind = match self.code {
            EXIT_USAGE => "usage",
            EXIT_VALIDATION => "validation",
            _ => "runtime",
        };
        format!(
            "{{\"error\":{},\"message\":{}}}",
            serde_json::to_string(kind).unwrap(),
            serde_json::to_string(&self.message).unwrap()
        )
    }
}

pub fn validation(message: impl Into<String>) -> CliError {
    CliError {
        code: EXIT_VALIDATION,
        message: message.into(),
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config { .. }
            | Error::Vocabulary { .. }
            | Error::Parse { .. }
            | Error::SchemaVersion { .. }
            | Error::Compatibility { .. }
            | Error::Shape { .. }
            | Error::AnswerOutOfRange { .. }
            | Error::UnstructuredQuestion { .. }
            | Error::MalformedQuestion { .. }
            | Error::NoKeyword { .. } => EXIT_VALIDATION,
            _ => EXIT_RUNTIME,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::runtime(e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stderr_line_is_json() {
        let e = validation("bad \"thing\"\nnewline");
        let line = e.render_line();
        assert!(!line.contains('\n'));
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert_eq!(v["error"], "validation");
    }

    #[test]
    fn config_errors_map_to_validation() {
        let e: CliError = cibi_core::Error::config("tau", "must be positive").into();
        assert_eq!(e.code, EXIT_VALIDATION);
        let e: CliError = CliError::from(std::io::Error::new(std::io::ErrorKind::NotFound, "gone"));
        assert_eq!(e.code, EXIT_RUNTIME);
    }
}
