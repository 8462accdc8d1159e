use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("partition failed: {0}")]
    Partition(String),

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("non-finite loss at round {round}, client {client}: {loss}")]
    Divergence { round: usize, client: usize, loss: f64 },

    #[error("csv {path}: row {row}, column {column}: {detail}")]
    CsvParse {
        path: String,
        row: usize,
        column: String,
        detail: String,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("malformed parameter file: {0}")]
    Format(String),

    #[error("round {round}, client {client}: {source}")]
    Client {
        round: usize,
        client: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Wraps an error with the round/client it happened in, unless it
    /// already carries that context.
    pub fn in_client(self, round: usize, client: usize) -> Self {
        match self {
            e @ (Error::Client { .. } | Error::Divergence { .. }) => e,
            e => Error::Client {
                round,
                client,
                source: Box::new(e),
            },
        }
    }
}
