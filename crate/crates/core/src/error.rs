use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("weight {0} outside the 4-bit range [-8, 7]")]
    WeightOutOfRange(i32),
    #[error("cell state {0} outside [0, 15]")]
    StateOutOfRange(i32),
    #[error("the erased state has no verify level")]
    ErasedStateHasNoVerifyLevel,
    #[error("invalid reference ladder: {0}")]
    InvalidLadder(String),
    #[error("invalid state mapping: {0}")]
    InvalidMapping(String),

    #[error("unknown bank {bank} (macro has {banks})")]
    UnknownBank { bank: usize, banks: usize },
    #[error("cell ({bank}, {row}, {col}) outside the array")]
    CellOutOfRange { bank: usize, row: usize, col: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("charge pump is not regulated; programming is not possible")]
    PumpNotReady,
    #[error("WL program mode requested while the pump is unregulated")]
    ProgramWhileUnregulated,
    #[error("WL driver cannot present {vref_mv} mV (limit {limit_mv} mV)")]
    UnreachableReference { vref_mv: f64, limit_mv: f64 },
    #[error("verify timeout at bank {bank} row {row} col {col} for state {state}")]
    VerifyTimeout {
        bank: usize,
        row: usize,
        col: usize,
        state: u8,
    },
    #[error("capacity exceeded: {needed} {unit} requested, {available} available")]
    CapacityExceeded {
        needed: usize,
        available: usize,
        unit: &'static str,
    },

    #[error("ping-pong buffer: {0}")]
    PingPong(String),
    #[error("input source is empty: {0}")]
    EmptySource(&'static str),
    #[error("layer descriptor: {0}")]
    Descriptor(String),
    #[error("row {0} has not been programmed")]
    UnprogrammedRow(usize),

    #[error("model {path}: {message}")]
    Model { path: String, message: String },
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("model has not been deployed")]
    NotDeployed,
    #[error("task mismatch: {0}")]
    TaskMismatch(String),

    #[error("config: {0}")]
    Config(String),
    #[error("state file: {0}")]
    StateFile(String),
    #[error("{context}: {message}")]
    Io { context: String, message: String },
}

impl Error {
    pub(crate) fn model(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Model {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(context: impl Into<String>, err: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            message: err.to_string(),
        }
    }
}
