use rtgen_core::Error as CoreError;
use serde::Serialize;
use thiserror::Error;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),

    #[error("{0}")]
    Data(String),

    #[error(transparent)]
    Core(#[from] CoreError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// The machine-readable line printed on failure.
#[derive(Debug, Serialize)]
pub struct ErrorLine {
    pub error: &'static str,
    pub message: String,
    pub exit_code: i32,
}

impl CliError {
    /// `config` errors exit with 2, everything touching data with 3.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Config(_) => "config",
            Self::Core(CoreError::Config(_) | CoreError::Usage(_) | CoreError::Vocabulary(_)) => "config",
            Self::Data(_) | Self::Io(_) | Self::Core(_) => "data",
        }
    }

    pub fn exit_code(&self) -> i32 {
        if self.kind() == "config" {
            EXIT_CONFIG
        } else {
            EXIT_DATA
        }
    }

    pub fn line(&self) -> String {
        let line = ErrorLine { error: self.kind(), message: self.to_string(), exit_code: self.exit_code() };
        serde_json::to_string(&line).expect("error line serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes_follow_kind() {
        assert_eq!(CliError::Config("x".into()).exit_code(), 2);
        assert_eq!(CliError::Core(CoreError::Config("x".into())).exit_code(), 2);
        assert_eq!(CliError::Data("x".into()).exit_code(), 3);
        assert_eq!(CliError::Core(CoreError::Checkpoint("x".into())).exit_code(), 3);
        let v: serde_json::Value = serde_json::from_str(&CliError::Data("bad image".into()).line()).unwrap();
        assert_eq!(v["error"], "data");
        assert_eq!(v["exit_code"], 3);
        assert_eq!(v["message"], "bad image");
    }
}
