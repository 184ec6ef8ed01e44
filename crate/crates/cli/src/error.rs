use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    User(String),
    #[error("{0}")]
    Internal(String),
    #[error("{0} verification check(s) failed")]
    Verify(usize),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::User(_) => 1,
            CliError::Internal(_) => 2,
            CliError::Verify(_) => 3,
        }
    }

    pub fn context(self, what: &str) -> Self {
        match self {
            CliError::User(m) => CliError::User(format!("{what}: {m}")),
            CliError::Internal(m) => CliError::Internal(format!("{what}: {m}")),
            v => v,
        }
    }
}

impl From<dcpg_core::Error> for CliError {
    fn from(e: dcpg_core::Error) -> Self {
        use dcpg_core::Error as E;
        match e {
            E::Config(_) | E::Format(_) | E::Io(_) | E::Json(_) => CliError::User(e.to_string()),
            _ => CliError::Internal(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::User(format!("io: {e}"))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Internal(format!("json: {e}"))
    }
}
