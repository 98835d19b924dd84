use std::fmt;

/// Errors emitted by the library.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Two tensors were combined with incompatible shapes.
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// Constructor data does not match the requested shape.
    DataLength { expected: usize, got: usize },
    /// An operation required a scalar (single-element) tensor.
    NotScalar { shape: Vec<usize> },
    /// A class or column index was out of range.
    IndexOutOfRange { index: usize, bound: usize },
    /// A value that must be finite was NaN or infinite.
    NonFinite { context: String },
    /// Configuration violated one or more preconditions.
    Config(Vec<String>),
    /// A class had no samples in the probe split.
    Coverage { class: usize },
    /// A data file could not be parsed. `line` is 1-based and counts the header.
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    /// Filesystem failure, stringified to keep the error type comparable.
    Io(String),
    /// Training saw a non-finite loss and aborted.
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        loss_cls: f64,
        loss_ood: f64,
        loss_total: f64,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: shape mismatch {left:?} vs {right:?}")
            }
            Error::DataLength { expected, got } => {
                write!(
                    f,
                    "data length {got} does not match shape product {expected}"
                )
            }
            Error::NotScalar { shape } => {
                write!(f, "expected a scalar tensor, got shape {shape:?}")
            }
            Error::IndexOutOfRange { index, bound } => {
                write!(f, "index {index} out of range (bound {bound})")
            }
            Error::NonFinite { context } => write!(f, "non-finite value in {context}"),
            Error::Config(items) => {
                writeln!(f, "invalid configuration:")?;
                for item in items {
                    writeln!(f, "  - {item}")?;
                }
                Ok(())
            }
            Error::Coverage { class } => {
                write!(f, "class {class} has no samples in the probe split")
            }
            Error::Parse {
                path,
                line,
                message,
            } => write!(f, "{path}:{line}: {message}"),
            Error::Io(msg) => write!(f, "io error: {msg}"),
            Error::NonFiniteLoss {
                epoch,
                batch,
                loss_cls,
                loss_ood,
                loss_total,
            } => write!(
                f,
                "non-finite loss at epoch {epoch} batch {batch} \
                 (cls={loss_cls}, ood={loss_ood}, total={loss_total})"
            ),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
