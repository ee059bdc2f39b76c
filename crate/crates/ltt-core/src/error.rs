use thiserror::Error;

/// Errors produced by the library, grouped by how the CLI maps them to exit
/// codes: configuration/usage problems, data problems, and numeric failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("lex error at {line}:{col}: {msg}")]
    Lex { line: usize, col: usize, msg: String },

    #[error("syntax error at {line}:{col}: {msg}")]
    Syntax { line: usize, col: usize, msg: String },

    #[error("malformed tree at {path}: {msg}")]
    Structure { path: String, msg: String },

    #[error("AST document error at {path}: {msg}")]
    Schema { path: String, msg: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("modeling error: {0}")]
    Model(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("sample rejected: expansion cap of {cap} exceeded")]
    ExpansionCap { cap: usize },

    #[error("model file error: {0}")]
    ModelFile(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
