use std::fmt;

use specmatch::Error;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Lib(Error),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    /// 2 usage, 3 data, 4 numerical.
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Lib(e) if e.is_numerical() => 4,
            CliError::Lib(Error::InvalidArgument(_) | Error::SigmaOutOfRange { .. }) => 2,
            CliError::Lib(_) => 3,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "UsageError",
            CliError::Lib(e) => e.kind(),
        }
    }

    /// `error: kind=<kind> code=<n> msg="<text>"`
    pub fn line(&self) -> String {
        format!(
            "error: kind={} code={} msg={:?}",
            self.kind(),
            self.code(),
            self.to_string()
        )
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Lib(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Lib(e)
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Lib(Error::Format(e.to_string()))
    }
}
