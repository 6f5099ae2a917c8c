use thiserror::Error;

use crate::components::ComponentError;
use crate::dims::DimsError;
use crate::eval::EvalError;
use crate::expr::ParseError;
use crate::grammar::GrammarError;
use crate::sop::SopError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Grammar(#[from] GrammarError),
    #[error(transparent)]
    Dims(#[from] DimsError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Sop(#[from] SopError),
    #[error(transparent)]
    Component(#[from] ComponentError),
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error("target is not representable by rule {rule}: {reason}")]
    NonRepresentable { rule: String, reason: String },
    #[error("holdout leaves too small an observed block: {0}")]
    TooSmall(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

impl Error {
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NumericalFailure(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
