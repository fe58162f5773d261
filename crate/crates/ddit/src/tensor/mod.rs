//! Dense f64 tensor with reverse-mode automatic differentiation.
//!
//! Values are immutable once created: every operation allocates a fresh node
//! that references its inputs through `Arc`s, so independent graphs never
//! interfere and values are safe to share read-only across threads. Reverse
//! mode walks the `Arc` graph from a scalar root (see [`backward`]).
//!
//! Layout is row-major with explicit shape lists. There is no implicit
//! broadcasting except scalar-with-tensor; mismatched shapes are errors, not
//! silent NaNs. Any operation that produces a NaN/Inf from finite inputs
//! reports [`Error::NonFinite`] immediately.

mod autodiff;
mod ops;
pub mod rng;

pub use autodiff::{backward, Gradients};
pub use rng::Rng;

use crate::error::{Error, Result};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Graph node. `op` records how the value was produced; leaves have
/// [`Op::Leaf`]. Non-differentiable results also store `Op::Leaf` so dead
/// subgraphs are freed as soon as the values go out of scope.
pub(crate) struct Node {
    pub id: u64,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad_enabled: bool,
    pub op: Op,
}

#[allow(clippy::enum_variant_names)]
pub(crate) enum Op {
    Leaf,
    Add(Arc<Node>, Arc<Node>),
    Sub(Arc<Node>, Arc<Node>),
    Mul(Arc<Node>, Arc<Node>),
    Div(Arc<Node>, Arc<Node>),
    AddScalar(Arc<Node>),
    MulScalar(Arc<Node>, f64),
    AddBias { x: Arc<Node>, bias: Arc<Node> },
    MatMul { a: Arc<Node>, b: Arc<Node> },
    Bmm { a: Arc<Node>, b: Arc<Node> },
    Transpose { x: Arc<Node>, ax0: usize, ax1: usize },
    Reshape(Arc<Node>),
    SumAxes { x: Arc<Node>, axes: Vec<usize>, scale: f64 },
    ConcatLast(Arc<Node>, Arc<Node>),
    SliceLast { x: Arc<Node>, start: usize, len: usize },
    IndexSelect0 { x: Arc<Node>, ids: Vec<usize> },
    SoftmaxLast(Arc<Node>),
    Silu(Arc<Node>),
    GeluTanh(Arc<Node>),
    Sqrt(Arc<Node>),
    Square(Arc<Node>),
    Abs(Arc<Node>),
    ClampMin(Arc<Node>, f64),
    MaxAll(Arc<Node>),
    LayerNorm { x: Arc<Node>, gain: Arc<Node>, bias: Arc<Node>, eps: f64 },
    L2NormalizeLast { x: Arc<Node>, eps: f64 },
    ExpandTokens { x: Arc<Node> },
}

impl Op {
    /// Parents in a fixed order (gradient routing relies on it).
    pub(crate) fn parents(&self) -> Vec<&Arc<Node>> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![a, b],
            Op::AddScalar(x) | Op::MulScalar(x, _) => vec![x],
            Op::AddBias { x, bias } => vec![x, bias],
            Op::MatMul { a, b } | Op::Bmm { a, b } => vec![a, b],
            Op::Transpose { x, .. } => vec![x],
            Op::Reshape(x) => vec![x],
            Op::SumAxes { x, .. } => vec![x],
            Op::ConcatLast(a, b) => vec![a, b],
            Op::SliceLast { x, .. } => vec![x],
            Op::IndexSelect0 { x, .. } => vec![x],
            Op::SoftmaxLast(x)
            | Op::Silu(x)
            | Op::GeluTanh(x)
            | Op::Sqrt(x)
            | Op::Square(x)
            | Op::Abs(x)
            | Op::ClampMin(x, _)
            | Op::MaxAll(x) => vec![x],
            Op::LayerNorm { x, gain, bias, .. } => vec![x, gain, bias],
            Op::L2NormalizeLast { x, .. } => vec![x],
            Op::ExpandTokens { x } => vec![x],
        }
    }
}

/// Dense row-major f64 array participating in a reverse-mode graph.
#[derive(Clone)]
pub struct TensorValue {
    pub(crate) node: Arc<Node>,
}

pub(crate) fn check_shape(shape: &[usize], data_len: usize) -> Result<()> {
    let expected: usize = shape.iter().product();
    if expected != data_len {
        return Err(Error::ShapeMismatch {
            op: "construct",
            details: format!("shape {shape:?} implies {expected} elements, got {data_len}"),
        });
    }
    Ok(())
}

pub(crate) fn ensure_finite(data: &[f64], context: &str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            context: context.to_string(),
        })
    }
}

impl TensorValue {
    fn leaf(shape: Vec<usize>, data: Vec<f64>, grad_enabled: bool) -> Result<Self> {
        check_shape(&shape, data.len())?;
        ensure_finite(&data, "tensor construction")?;
        Ok(TensorValue {
            node: Arc::new(Node {
                id: fresh_id(),
                shape,
                data,
                grad_enabled,
                op: Op::Leaf,
            }),
        })
    }

    /// Plain value; gradients do not flow into it.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Self::leaf(shape, data, false)
    }

    /// Trainable leaf; [`backward`] reports a gradient for it.
    pub fn param(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Self::leaf(shape, data, true)
    }

    pub fn scalar(v: f64) -> Result<Self> {
        Self::new(vec![], vec![v])
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::leaf(shape, vec![0.0; n], false).expect("zeros is always valid")
    }

    pub fn full(shape: Vec<usize>, v: f64) -> Result<Self> {
        let n = shape.iter().product();
        Self::leaf(shape, vec![v; n], false)
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        Self::full(shape, 1.0).expect("ones is always valid")
    }

    /// Standard-normal leaf; draw order is row-major.
    pub fn randn(shape: Vec<usize>, rng: &mut Rng) -> Self {
        let n = shape.iter().product();
        Self::leaf(shape, rng.fill_normal(n), false).expect("normal draws are finite")
    }

    /// Uniform leaf on [lo, hi).
    pub fn rand_uniform(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut Rng) -> Result<Self> {
        let n = shape.iter().product();
        Self::leaf(shape, rng.fill_uniform(n, lo, hi), false)
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.node.data
    }

    pub fn numel(&self) -> usize {
        self.node.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.grad_enabled
    }

    pub(crate) fn id(&self) -> u64 {
        self.node.id
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::ShapeMismatch {
                op: "item",
                details: format!("expected a scalar, got shape {:?}", self.shape()),
            });
        }
        Ok(self.node.data[0])
    }

    /// Element at a multi-index (row-major).
    pub fn get(&self, idx: &[usize]) -> f64 {
        assert_eq!(idx.len(), self.shape().len(), "index rank mismatch");
        let mut flat = 0;
        for (d, (&i, &ext)) in idx.iter().zip(self.shape()).enumerate() {
            assert!(i < ext, "index {i} out of bounds for axis {d} ({ext})");
            flat = flat * ext + i;
        }
        self.node.data[flat]
    }

    /// Copy of the value cut loose from any graph; gradients stop here.
    pub fn detach(&self) -> TensorValue {
        TensorValue {
            node: Arc::new(Node {
                id: fresh_id(),
                shape: self.node.shape.clone(),
                data: self.node.data.clone(),
                grad_enabled: false,
                op: Op::Leaf,
            }),
        }
    }

    /// Detached copy that is itself a trainable leaf.
    pub fn detach_as_param(&self) -> TensorValue {
        TensorValue {
            node: Arc::new(Node {
                id: fresh_id(),
                shape: self.node.shape.clone(),
                data: self.node.data.clone(),
                grad_enabled: true,
                op: Op::Leaf,
            }),
        }
    }
}

impl std::fmt::Debug for TensorValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TensorValue")
            .field("shape", &self.node.shape)
            .field("grad", &self.node.grad_enabled)
            .field(
                "data",
                &if self.numel() <= 8 {
                    format!("{:?}", self.node.data)
                } else {
                    format!("[{} elements]", self.numel())
                },
            )
            .finish()
    }
}
