use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite: pivot {pivot} is not strictly positive")]
    NotPositiveDefinite { pivot: usize },

    #[error("singular triangular system: non-positive diagonal at row {row}")]
    SingularTriangular { row: usize },

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("invalid value: {0}")]
    Invalid(String),

    #[error("no experts to fuse: class {class} has an empty member list")]
    EmptyExpertList { class: usize },

    #[error("class {class} has no members in this batch; draw class-complete groups")]
    IncompleteGroup { class: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("non-finite gradient for parameter {name}")]
    NonFiniteGrad { name: String },

    #[error("non-finite loss term {term}")]
    NonFiniteLoss { term: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
