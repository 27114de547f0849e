use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, config file contents or parameter values.
    #[error("{0}")]
    Config(String),
    /// Input data that could not be read or parsed.
    #[error("{0}")]
    Input(String),
    /// The analysis ran but produced no accepted result.
    #[error("{message}")]
    Rejected { reason: String, message: String },
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Serialize)]
struct ErrorBody<'a> {
    kind: &'a str,
    message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    reason: Option<&'a str>,
}

impl CliError {
    pub fn config(msg: impl std::fmt::Display) -> Self {
        Self::Config(msg.to_string())
    }

    pub fn input(msg: impl std::fmt::Display) -> Self {
        Self::Input(msg.to_string())
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::Config(_) => "config",
            Self::Input(_) => "input",
            Self::Rejected { .. } => "rejected",
            Self::Io(_) => "io",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Rejected { .. } => 3,
            Self::Input(_) | Self::Io(_) => 1,
        }
    }

    /// `{"error": {"kind": .., "message": .., "reason": ..}}` on one line.
    pub fn to_json(&self) -> String {
        let body = ErrorBody {
            kind: self.kind(),
            message: self.to_string(),
            reason: match self {
                Self::Rejected { reason, .. } => Some(reason.as_str()),
                _ => None,
            },
        };
        serde_json::json!({ "error": body }).to_string()
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
