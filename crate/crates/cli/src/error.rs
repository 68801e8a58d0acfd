use std::fmt;

/// Command failure, classified by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration: exit 1.
    Usage(String),
    /// Missing, malformed or mismatched inputs: exit 2.
    Data(String),
    /// Training stopped on a non-finite loss: exit 3.
    Abort(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Abort(_) => 3,
        }
    }

    /// Reclassifies argument errors from the library as data errors.
    pub fn data(e: urbanform::Error) -> Self {
        match CliError::from(e) {
            CliError::Usage(m) => CliError::Data(m),
            other => other,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Abort(m) => f.write_str(m),
        }
    }
}

impl From<urbanform::Error> for CliError {
    fn from(e: urbanform::Error) -> Self {
        match e {
            urbanform::Error::Training { .. } => CliError::Abort(e.to_string()),
            urbanform::Error::Argument(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}
