use thiserror::Error;

/// Process exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;
pub const EXIT_PARTITION: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {message}")]
    ConfigParse { path: String, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{variant}, seed {seed}: {source}")]
    Cell {
        variant: String,
        seed: u64,
        #[source]
        source: fca_core::Error,
    },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {detail}")]
    Results { path: String, detail: String },

    #[error(transparent)]
    Core(#[from] fca_core::Error),
}

fn core_exit_code(e: &fca_core::Error) -> i32 {
    use fca_core::Error as E;
    match e {
        E::Config(_) | E::Schema(_) | E::CsvParse { .. } => EXIT_CONFIG,
        E::Divergence { .. } => EXIT_DIVERGED,
        E::Partition(_) => EXIT_PARTITION,
        E::Client { source, .. } => core_exit_code(source),
        _ => EXIT_OTHER,
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::ConfigParse { .. } | CliError::Config(_) => EXIT_CONFIG,
            CliError::Cell { source, .. } => core_exit_code(source),
            CliError::Core(e) => core_exit_code(e),
            CliError::Io { .. } | CliError::Results { .. } => EXIT_OTHER,
        }
    }

    pub(crate) fn io(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
        move |source| CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
