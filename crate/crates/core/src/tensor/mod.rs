//! Dense row-major matrices with tape-free reverse-mode differentiation.
//!
//! Every [`Tensor`] is a `rows × cols` matrix of `f64` (scalars are `1×1`).
//! Operations on tensors that require gradients record their parents; calling
//! [`Tensor::backward`] on a scalar walks that graph once in reverse
//! topological order and accumulates `∂loss/∂t` into every leaf that
//! requires a gradient.

mod check;
mod ops;

pub use check::{grad_check, grad_check_coords, grad_check_params};

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: (usize, usize), rhs: (usize, usize) },
    #[error("{op}: invalid axis {axis}")]
    InvalidAxis { op: &'static str, axis: usize },
    #[error("{op}: produced a non-finite value")]
    NonFiniteValue { op: &'static str },
    #[error("backward needs a 1x1 loss, got {0:?}")]
    NonScalarLoss((usize, usize)),
    #[error("{op}: index {index} out of range for {len}")]
    IndexOutOfRange { op: &'static str, index: usize, len: usize },
    #[error("{op}: invalid argument: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording operations: results never require gradients.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

/// Recorded operation; parents are stored alongside in [`Node`].
pub(crate) enum Op {
    MatMul,
    Add,
    Sub,
    Mul,
    Scale(f64),
    Concat { axis: usize, sizes: Vec<usize> },
    Slice { axis: usize, start: usize },
    Transpose,
    Sum { axis: Option<usize> },
    Mean { axis: Option<usize> },
    Exp,
    Log,
    Sigmoid,
    Tanh,
    Elu(f64),
    LeakyRelu(f64),
    Pow(f64),
    Softmax { axis: usize },
    LogSoftmax { axis: usize },
    Mask(Vec<f64>),
    GatherRows(Rc<Vec<usize>>),
    ScatterAddRows(Rc<Vec<usize>>),
    SegmentSoftmax(Rc<Vec<usize>>),
    HeadDot { heads: usize },
    HeadScale { heads: usize },
    HeadMean { heads: usize },
}

pub(crate) struct Node {
    rows: usize,
    cols: usize,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    op: Option<Op>,
    parents: Vec<Tensor>,
}

/// Shared handle to a node of the computation graph.
#[derive(Clone)]
pub struct Tensor(pub(crate) Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.0.requires_grad)
            .field("data", &*self.0.data.borrow())
            .finish()
    }
}

impl Tensor {
    fn leaf(rows: usize, cols: usize, data: Vec<f64>, requires_grad: bool) -> Result<Tensor> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(TensorError::ShapeMismatch { op: "new", lhs: (rows, cols), rhs: (data.len(), 1) });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFiniteValue { op: "new" });
        }
        Ok(Tensor(Rc::new(Node {
            rows,
            cols,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            op: None,
            parents: Vec::new(),
        })))
    }

    /// Constant input; never receives a gradient.
    pub fn constant(rows: usize, cols: usize, data: Vec<f64>) -> Result<Tensor> {
        Tensor::leaf(rows, cols, data, false)
    }

    /// Trainable leaf.
    pub fn param(rows: usize, cols: usize, data: Vec<f64>) -> Result<Tensor> {
        Tensor::leaf(rows, cols, data, true)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::constant(1, 1, vec![v]).expect("finite scalar")
    }

    pub fn zeros(rows: usize, cols: usize) -> Tensor {
        Tensor::constant(rows, cols, vec![0.0; rows * cols]).expect("non-empty shape")
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Tensor> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(TensorError::InvalidArgument { op: "from_rows", reason: "ragged rows".into() });
        }
        Tensor::constant(r, c, rows.concat())
    }

    pub fn identity(n: usize) -> Tensor {
        let mut d = vec![0.0; n * n];
        for i in 0..n {
            d[i * n + i] = 1.0;
        }
        Tensor::constant(n, n, d).expect("non-empty shape")
    }

    /// Records an op result. Parents that do not require gradients are not
    /// retained.
    pub(crate) fn from_op(rows: usize, cols: usize, data: Vec<f64>, op: Op, parents: Vec<Tensor>, name: &'static str) -> Result<Tensor> {
        debug_assert_eq!(data.len(), rows * cols);
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFiniteValue { op: name });
        }
        let requires_grad = GRAD_ENABLED.with(Cell::get) && parents.iter().any(|p| p.0.requires_grad);
        let (op, parents) = if requires_grad { (Some(op), parents) } else { (None, Vec::new()) };
        Ok(Tensor(Rc::new(Node {
            rows,
            cols,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            op,
            parents,
        })))
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.0.rows, self.0.cols)
    }

    pub fn rows(&self) -> usize {
        self.0.rows
    }

    pub fn cols(&self) -> usize {
        self.0.cols
    }

    pub fn len(&self) -> usize {
        self.0.rows * self.0.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.0.data.borrow()
    }

    /// Mutable access to a leaf's values (optimizer updates, finite
    /// differences). Panics on op results.
    pub fn data_mut(&self) -> RefMut<'_, Vec<f64>> {
        assert!(self.0.op.is_none() && self.0.parents.is_empty(), "only leaves are mutable");
        self.0.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.borrow().clone()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.0.data.borrow()[r * self.0.cols + c]
    }

    /// Value of a `1×1` tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.shape(), (1, 1), "item() on a non-scalar");
        self.0.data.borrow()[0]
    }

    pub fn row(&self, r: usize) -> Vec<f64> {
        let c = self.0.cols;
        self.0.data.borrow()[r * c..(r + 1) * c].to_vec()
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::constant(self.0.rows, self.0.cols, self.to_vec()).expect("finite values")
    }

    pub fn ptr_eq(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    /// Accumulates `∂self/∂leaf` into every reachable leaf requiring a
    /// gradient. Calling it twice without [`Tensor::zero_grad`] sums.
    pub fn backward(&self) -> Result<()> {
        if self.shape() != (1, 1) {
            return Err(TensorError::NonScalarLoss(self.shape()));
        }
        if !self.0.requires_grad {
            return Ok(());
        }
        let order = self.topo_order();
        let mut grads: HashMap<*const Node, Vec<f64>> = HashMap::new();
        grads.insert(Rc::as_ptr(&self.0), vec![1.0]);
        for t in order.iter().rev() {
            let key = Rc::as_ptr(&t.0);
            let Some(g) = grads.remove(&key) else { continue };
            match &t.0.op {
                None => {
                    let mut slot = t.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
                Some(op) => {
                    let parent_grads = ops::backward(op, t, &g);
                    for (p, pg) in t.0.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !p.0.requires_grad {
                            continue;
                        }
                        match grads.get_mut(&Rc::as_ptr(&p.0)) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                            None => {
                                grads.insert(Rc::as_ptr(&p.0), pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Nodes requiring gradients reachable from `self`, parents first.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited: std::collections::HashSet<*const Node> = std::collections::HashSet::new();
        // Iterative DFS; deep LSTM/GAT stacks would overflow a recursive walk.
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            let key = Rc::as_ptr(&t.0);
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(key) {
                continue;
            }
            stack.push((t.clone(), true));
            for p in t.0.parents.iter().rev() {
                if p.0.requires_grad && !visited.contains(&Rc::as_ptr(&p.0)) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }
}
