use std::fmt;

/// Failure of a command, carrying its process exit status.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, unreadable or unparsable input files.
    Usage(String),
    /// A well-formed request that failed on mathematical grounds.
    Domain(String),
    NotCertified(String),
    Learning(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Domain(_) => 1,
            CliError::Usage(_) => 2,
            CliError::NotCertified(_) => 3,
            CliError::Learning(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Domain(m) => write!(f, "{m}"),
            CliError::NotCertified(m) => write!(f, "not certified: {m}"),
            CliError::Learning(m) => write!(f, "learning failed: {m}"),
        }
    }
}

impl From<measure_mdp::Error> for CliError {
    fn from(e: measure_mdp::Error) -> Self {
        CliError::Domain(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
