use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("shape {shape:?} needs {} elements, got {len}", shape.iter().product::<usize>())]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("rows have different lengths")]
    RaggedRows,
    #[error("expected a single-element tensor, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GraphError {
    #[error("node #{node} ({op}): shape mismatch: {detail}")]
    ShapeMismatch {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("node #{node} ({op}) produced a non-finite value")]
    NonFinite { node: usize, op: &'static str },
    #[error("leaf `{name}` has no binding")]
    Unbound { name: String },
    #[error("leaf `{name}` bound with shape {got:?}, declared {declared:?}")]
    BindingShape {
        name: String,
        declared: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("backward called before forward_eval")]
    NotEvaluated,
    #[error("backward needs a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("graph has no nodes")]
    Empty,
    #[error("finite difference probe of `{name}`[{index}] is non-finite")]
    NonFiniteProbe { name: String, index: usize },
    #[error("finite difference step must be positive, got {0}")]
    BadStep(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
