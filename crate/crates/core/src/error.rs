use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("structural error: {0}")]
    Shape(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(&'static str),

    #[error("round {round}: {message}")]
    Round { round: usize, message: String },

    #[error("round {round}, client {client}: {source}")]
    Client {
        round: usize,
        client: u64,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Process exit status for the command-line runner: 1 config, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::Json(_) => 1,
            Error::Data(_)
            | Error::Parse { .. }
            | Error::Evaluation(_)
            | Error::UndefinedMetric(_)
            | Error::Io(_)
            | Error::Csv(_) => 2,
            Error::Numerical(_) | Error::Shape(_) | Error::Round { .. } => 3,
            Error::Client { source, .. } => source.exit_code(),
        }
    }

    pub(crate) fn in_client(self, round: usize, client: u64) -> Self {
        Error::Client {
            round,
            client,
            source: Box::new(self),
        }
    }
}
