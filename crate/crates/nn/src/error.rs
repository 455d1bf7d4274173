use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    BadLength { shape: Vec<usize>, len: usize },
    #[error("cannot normalize a vector with norm {0:e}")]
    ZeroNorm(f64),
    #[error("empty negative set for anchor {0}")]
    EmptyNegatives(usize),
    #[error("empty input to {0}")]
    Empty(&'static str),
    #[error("index {index} out of range for {len} rows")]
    RowIndex { index: usize, len: usize },
    #[error("backward requested for node {0} that was never recorded")]
    BackwardBeforeForward(usize),
    #[error("bad tensor blob: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
