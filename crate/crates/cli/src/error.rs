use ainet_core::CoreError;
use ainet_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{0}")]
    Parse(String),

    #[error("cannot write {0}")]
    Output(String),

    /// A suite ran to completion and some checks failed.
    #[error("{0}")]
    Failed(String),

    #[error(transparent)]
    Core(#[from] CoreError),

    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl CliError {
    /// Short category used in the one-line error report.
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Parse(_) => "parse",
            CliError::Output(_) => "output",
            CliError::Failed(_) => "failed",
            CliError::Core(CoreError::Config(_)) => "config",
            CliError::Core(CoreError::Json(_)) => "config",
            CliError::Core(CoreError::Diverged { .. }) => "diverged",
            CliError::Core(CoreError::Io(_)) | CliError::Io(_) => "io",
            CliError::Core(_) | CliError::Tensor(_) => "model",
            CliError::Csv(_) => "csv",
        }
    }

    /// `error kind=<kind> message=<json string>` on a single line.
    pub fn report_line(&self) -> String {
        let msg = self.to_string();
        let mut quoted = String::with_capacity(msg.len() + 2);
        quoted.push('"');
        for ch in msg.chars() {
            match ch {
                '"' => quoted.push_str("\\\""),
                '\\' => quoted.push_str("\\\\"),
                '\n' => quoted.push_str("\\n"),
                '\r' => quoted.push_str("\\r"),
                '\t' => quoted.push_str("\\t"),
                c if c.is_control() => quoted.push_str(&format!("\\u{:04x}", c as u32)),
                c => quoted.push(c),
            }
        }
        quoted.push('"');
        format!("error kind={} message={quoted}", self.kind())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_is_one_line() {
        let e = CliError::Parse("bad \"value\"\nsecond line".into());
        let line = e.report_line();
        assert!(!line.contains('\n'));
        assert_eq!(line, r#"error kind=parse message="bad \"value\"\nsecond line""#);
    }
}
