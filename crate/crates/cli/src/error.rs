use std::path::PathBuf;

/// Process exit codes.
pub mod exit {
    pub const OK: u8 = 0;
    pub const CONFIG: u8 = 2;
    pub const IO: u8 = 3;
    pub const FORMAT: u8 = 4;
    pub const NUMERIC: u8 = 5;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}:{line}: {msg}")]
    ConfigLine { path: String, line: usize, msg: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: u64, msg: String },
    #[error("{context}: {source}")]
    Core {
        context: String,
        #[source]
        source: lutmoe::Error,
    },
    #[error(transparent)]
    Lib(#[from] lutmoe::Error),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::ConfigLine { .. } => exit::CONFIG,
            CliError::Io { .. } => exit::IO,
            CliError::Parse { .. } => exit::FORMAT,
            CliError::Core { source, .. } | CliError::Lib(source) => core_code(source),
        }
    }
}

fn core_code(e: &lutmoe::Error) -> u8 {
    use lutmoe::Error as E;
    match e {
        E::Param(_) | E::Shape(_) => exit::CONFIG,
        E::Io { .. } => exit::IO,
        E::Format(_) | E::Size(_) | E::Metadata(_) => exit::FORMAT,
        E::Numeric(_) => exit::NUMERIC,
    }
}

/// Attach the failing item to a library error.
pub trait Context<T> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T>;
}

impl<T> Context<T> for lutmoe::Result<T> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|source| CliError::Core { context: what(), source })
    }
}
