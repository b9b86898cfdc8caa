//! Dense double-precision tensors, a reverse-mode tape, named parameter
//! groups and the AdamW optimizer.

mod graph;
mod optim;
mod params;
mod tensor;

pub use graph::{softmax_rows, Gradients, Graph, RowMask, Var};
pub use optim::{AdamW, AdamWConfig};
pub use params::{Bound, ParamGroup, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NumericsError {
    #[error("invalid shape {0:?}")]
    BadShape(Vec<usize>),
    #[error("shape {shape:?} needs {} values, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("ragged or empty input")]
    Ragged,
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{routes} routes for {rows} rows")]
    RouteCount { rows: usize, routes: usize },
    #[error("route {0} has no parameter")]
    BadRoute(usize),
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("column slice {start}+{len} exceeds {cols} columns")]
    BadSlice { start: usize, len: usize, cols: usize },
    #[error("empty attention row {0}")]
    EmptyAttentionRow(usize),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("unknown variable {0}")]
    UnknownVar(usize),
    #[error("backward called on a node that was never recorded")]
    NotRecorded,
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("unknown parameter '{0}'")]
    UnknownParam(String),
    #[error("duplicate parameter '{0}'")]
    DuplicateParam(String),
}
