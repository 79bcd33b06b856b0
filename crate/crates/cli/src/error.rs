use serde::Serialize;

/// Process exit codes.
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Clone, thiserror::Error, Serialize)]
#[error("{kind}: {message}")]
pub struct CliError {
    #[serde(skip)]
    pub code: i32,
    #[serde(rename = "error")]
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError { code: EXIT_USAGE, kind: "usage", message: message.into() }
    }

    pub fn input(message: impl Into<String>) -> Self {
        CliError { code: EXIT_VALIDATION, kind: "input", message: message.into() }
    }

    pub fn parse(message: impl Into<String>) -> Self {
        CliError { code: EXIT_VALIDATION, kind: "parse", message: message.into() }
    }

    pub fn validation(message: impl Into<String>) -> Self {
        CliError { code: EXIT_VALIDATION, kind: "validation", message: message.into() }
    }

    pub fn stale(message: impl Into<String>) -> Self {
        CliError { code: EXIT_VALIDATION, kind: "stale_model", message: message.into() }
    }

    pub fn adapter(message: impl Into<String>) -> Self {
        CliError { code: EXIT_RUNTIME, kind: "adapter", message: message.into() }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        CliError { code: EXIT_RUNTIME, kind: "runtime", message: message.into() }
    }
}

impl From<rnamf::Error> for CliError {
    fn from(e: rnamf::Error) -> Self {
        use rnamf::Error as E;
        match e {
            E::Simulator(m) => CliError::adapter(m),
            E::Fit { .. } | E::Conditioning { .. } => CliError::runtime(e.to_string()),
            other => CliError::validation(other.to_string()),
        }
    }
}
