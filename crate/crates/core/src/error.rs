use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Incompatible operand shapes.
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),
    /// Input data that cannot be processed (too short, empty, ...).
    #[error("invalid input: {0}")]
    Input(String),
    #[error("non-finite prediction from head {head}")]
    NonFinite { head: String },
    #[error("training diverged at step {step} (loss = {loss})")]
    Diverged { step: u64, loss: f64 },
    #[error("backward already ran on this tape")]
    BackwardTwice,
    #[error("parameter {0} has no gradient buffer")]
    MissingGrad(String),
    /// A statistic is undefined for the given data (e.g. zero variance).
    #[error("undefined: {0}")]
    Undefined(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
