use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("symbol {symbol} at index {index} is outside the table range and not escaped")]
    SymbolOutOfRange { index: usize, symbol: i32 },
    #[error("escape value {0} does not fit in a signed 16-bit integer")]
    EscapeOverflow(i64),
    #[error("bitstream truncated: {0}")]
    Truncated(String),
    #[error("framing error: {0}")]
    Framing(String),
    #[error("crc mismatch: frame carries {expected:#010x}, computed {actual:#010x}")]
    Crc { expected: u32, actual: u32 },
    #[error("unsupported codec id {0}")]
    UnsupportedCodec(u8),
    #[error("transport: {0}")]
    Transport(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("csv: {0}")]
    Csv(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Csv(e.to_string())
    }
}
