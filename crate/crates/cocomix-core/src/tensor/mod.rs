//! Eager reverse-mode autodiff over dense f64 tensors.
//!
//! Every operation computes its values immediately and, when any input
//! requires gradients, records a node so [`backward`] can replay the graph in
//! reverse topological order. Tensors are rank 0 (scalar), 1 (vector) or 2
//! (row-major matrix).

use std::cell::{Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

use crate::error::{Error, Result};

mod gradcheck;
mod kernels;

pub use gradcheck::{finite_diff_check, GradCheckReport};

/// Closed set of differentiable kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KernelKind {
    Leaf,
    Matmul,
    Add,
    Mul,
    Scale,
    Gelu,
    LayerNorm,
    Softmax,
    EmbeddingGather,
    TopkMask,
    ConcatRows,
    SliceRows,
    ReduceMean,
    Log,
    Rsqrt,
}

impl KernelKind {
    pub fn name(self) -> &'static str {
        match self {
            KernelKind::Leaf => "leaf",
            KernelKind::Matmul => "matmul",
            KernelKind::Add => "add",
            KernelKind::Mul => "mul",
            KernelKind::Scale => "scale",
            KernelKind::Gelu => "gelu",
            KernelKind::LayerNorm => "layer_norm",
            KernelKind::Softmax => "softmax",
            KernelKind::EmbeddingGather => "embedding_gather",
            KernelKind::TopkMask => "topk_mask",
            KernelKind::ConcatRows => "concat_rows",
            KernelKind::SliceRows => "slice_rows",
            KernelKind::ReduceMean => "reduce_mean",
            KernelKind::Log => "log",
            KernelKind::Rsqrt => "rsqrt",
        }
    }
}

/// Per-kernel attributes fixed at node construction.
#[derive(Clone, Debug, PartialEq)]
pub enum Attrs {
    None,
    Matmul { transpose_a: bool, transpose_b: bool },
    Scale { factor: f64 },
    LayerNorm { eps: f64 },
    Gather { ids: Vec<usize> },
    TopK { k: usize },
    Slice { start: usize, end: usize },
    /// Inputs are clamped to `floor` before the log when floor > 0.
    Log { floor: f64 },
    /// y = 1/sqrt(x + eps).
    Rsqrt { eps: f64 },
}

pub(crate) struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    kind: KernelKind,
    attrs: Attrs,
    parents: Vec<Tensor>,
    requires_grad: bool,
}

/// Handle to a graph node. Cloning is cheap and aliases the same node.
#[derive(Clone)]
pub struct Tensor(Rc<RefCell<Node>>);

fn check_rank(shape: &[usize]) -> Result<()> {
    if shape.len() > 2 {
        return Err(Error::ShapeMismatch {
            kernel: "leaf",
            detail: format!("rank {} unsupported (max 2)", shape.len()),
        });
    }
    Ok(())
}

/// (rows, cols) view of a shape; scalars are 1x1, vectors a single row.
pub(crate) fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (1, *n),
        [r, c] => (*r, *c),
        _ => unreachable!("rank checked at construction"),
    }
}

impl Tensor {
    fn from_node(node: Node) -> Tensor {
        Tensor(Rc::new(RefCell::new(node)))
    }

    /// New leaf holding `values`; participates in backward iff `requires_grad`.
    pub fn leaf(shape: &[usize], values: Vec<f64>, requires_grad: bool) -> Result<Tensor> {
        check_rank(shape)?;
        let expect: usize = shape.iter().product();
        if values.len() != expect {
            return Err(Error::ShapeMismatch {
                kernel: "leaf",
                detail: format!("shape {shape:?} wants {expect} values, got {}", values.len()),
            });
        }
        Ok(Tensor::from_node(Node {
            shape: shape.to_vec(),
            values,
            grad: None,
            kind: KernelKind::Leaf,
            attrs: Attrs::None,
            parents: Vec::new(),
            requires_grad,
        }))
    }

    pub fn constant(shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        Tensor::leaf(shape, values, false)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::leaf(&[], vec![v], false).expect("scalar leaf")
    }

    pub fn zeros(shape: &[usize], requires_grad: bool) -> Result<Tensor> {
        let n = shape.iter().product();
        Tensor::leaf(shape, vec![0.0; n], requires_grad)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.borrow().shape.clone()
    }

    pub fn len(&self) -> usize {
        self.0.borrow().values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rows(&self) -> usize {
        rows_cols(&self.0.borrow().shape).0
    }

    pub fn cols(&self) -> usize {
        rows_cols(&self.0.borrow().shape).1
    }

    pub fn requires_grad(&self) -> bool {
        self.0.borrow().requires_grad
    }

    pub fn kind(&self) -> KernelKind {
        self.0.borrow().kind
    }

    pub fn values(&self) -> Vec<f64> {
        self.0.borrow().values.clone()
    }

    pub fn values_ref(&self) -> Ref<'_, [f64]> {
        Ref::map(self.0.borrow(), |n| n.values.as_slice())
    }

    /// Scalar payload; panics if not a single element.
    pub fn item(&self) -> f64 {
        let n = self.0.borrow();
        assert_eq!(n.values.len(), 1, "item() on non-scalar tensor");
        n.values[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.borrow().grad.clone()
    }

    /// Removes and returns the accumulated gradient.
    pub fn take_grad(&self) -> Option<Vec<f64>> {
        self.0.borrow_mut().grad.take()
    }

    pub fn clear_grad(&self) {
        self.0.borrow_mut().grad = None;
    }

    /// Overwrites leaf values in place (shape unchanged).
    pub fn set_values(&self, values: &[f64]) -> Result<()> {
        let mut n = self.0.borrow_mut();
        if values.len() != n.values.len() {
            return Err(Error::ShapeMismatch {
                kernel: "leaf",
                detail: format!("set_values wants {} values, got {}", n.values.len(), values.len()),
            });
        }
        n.values.copy_from_slice(values);
        Ok(())
    }

    pub fn set_value(&self, idx: usize, v: f64) {
        self.0.borrow_mut().values[idx] = v;
    }

    /// In-place mutation of the values buffer (optimizer updates).
    pub fn apply<F: FnOnce(&mut [f64])>(&self, f: F) {
        f(&mut self.0.borrow_mut().values);
    }

    /// Flips gradient participation. Only meaningful on leaves; interior
    /// nodes fix their flag at construction time.
    pub fn set_requires_grad(&self, requires_grad: bool) {
        self.0.borrow_mut().requires_grad = requires_grad;
    }

    fn ptr(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }

    // Sugar over forward(); all return Result because shapes are checked.

    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        forward(
            KernelKind::Matmul,
            &[self, rhs],
            Attrs::Matmul { transpose_a: false, transpose_b: false },
        )
    }

    /// self · rhsᵀ
    pub fn matmul_tb(&self, rhs: &Tensor) -> Result<Tensor> {
        forward(
            KernelKind::Matmul,
            &[self, rhs],
            Attrs::Matmul { transpose_a: false, transpose_b: true },
        )
    }

    /// selfᵀ · rhs
    pub fn matmul_ta(&self, rhs: &Tensor) -> Result<Tensor> {
        forward(
            KernelKind::Matmul,
            &[self, rhs],
            Attrs::Matmul { transpose_a: true, transpose_b: false },
        )
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        forward(KernelKind::Add, &[self, rhs], Attrs::None)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.add(&rhs.scale(-1.0)?)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        forward(KernelKind::Mul, &[self, rhs], Attrs::None)
    }

    pub fn scale(&self, factor: f64) -> Result<Tensor> {
        forward(KernelKind::Scale, &[self], Attrs::Scale { factor })
    }

    pub fn gelu(&self) -> Result<Tensor> {
        forward(KernelKind::Gelu, &[self], Attrs::None)
    }

    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        forward(KernelKind::LayerNorm, &[self, gamma, beta], Attrs::LayerNorm { eps })
    }

    pub fn softmax(&self) -> Result<Tensor> {
        forward(KernelKind::Softmax, &[self], Attrs::None)
    }

    /// Row gather: self is the table, `ids` select rows.
    pub fn gather(&self, ids: &[usize]) -> Result<Tensor> {
        forward(KernelKind::EmbeddingGather, &[self], Attrs::Gather { ids: ids.to_vec() })
    }

    pub fn topk_mask(&self, k: usize) -> Result<Tensor> {
        forward(KernelKind::TopkMask, &[self], Attrs::TopK { k })
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor> {
        forward(KernelKind::SliceRows, &[self], Attrs::Slice { start, end })
    }

    pub fn reduce_mean(&self) -> Result<Tensor> {
        forward(KernelKind::ReduceMean, &[self], Attrs::None)
    }

    /// Sum of all entries, built as mean times element count.
    pub fn reduce_sum(&self) -> Result<Tensor> {
        let n = self.len() as f64;
        self.reduce_mean()?.scale(n)
    }

    pub fn log(&self) -> Result<Tensor> {
        forward(KernelKind::Log, &[self], Attrs::Log { floor: 0.0 })
    }

    pub fn log_floored(&self, floor: f64) -> Result<Tensor> {
        forward(KernelKind::Log, &[self], Attrs::Log { floor })
    }

    pub fn rsqrt(&self, eps: f64) -> Result<Tensor> {
        forward(KernelKind::Rsqrt, &[self], Attrs::Rsqrt { eps })
    }
}

pub fn concat_rows(inputs: &[&Tensor]) -> Result<Tensor> {
    forward(KernelKind::ConcatRows, inputs, Attrs::None)
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let n = self.0.borrow();
        write!(f, "Tensor({:?}, {}, grad={})", n.shape, n.kind.name(), n.grad.is_some())
    }
}

/// Builds one graph node: validates shapes, rejects non-finite inputs,
/// computes values eagerly, and records parents when gradients are needed.
pub fn forward(kind: KernelKind, inputs: &[&Tensor], attrs: Attrs) -> Result<Tensor> {
    for t in inputs {
        let n = t.0.borrow();
        if !n.values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { kernel: kind.name() });
        }
    }

    let (shape, values) = kernels::compute(kind, inputs, &attrs)?;
    let requires_grad = inputs.iter().any(|t| t.requires_grad());
    let parents = if requires_grad {
        inputs.iter().map(|t| (*t).clone()).collect()
    } else {
        Vec::new()
    };
    Ok(Tensor::from_node(Node {
        shape,
        values,
        grad: None,
        kind,
        attrs,
        parents,
        requires_grad,
    }))
}

/// Stand-alone top-k index selection used by the masking kernel. Largest
/// absolute values win; ties go to the lowest index. Magnitude (not signed)
/// ordering is what makes the mask idempotent: masked-out zeros can never
/// outrank a kept negative entry on a second pass. Returned indices are
/// sorted ascending.
pub fn topk_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&i, &j| {
        row[j]
            .abs()
            .partial_cmp(&row[i].abs())
            .expect("finite values")
            .then(i.cmp(&j))
    });
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// −log softmax(logits)[target], stable under large logits.
pub fn cross_entropy(logits: &Tensor, target_index: usize) -> Result<Tensor> {
    let (rows, cols) = rows_cols(&logits.0.borrow().shape);
    if rows != 1 {
        return Err(Error::ShapeMismatch {
            kernel: "cross_entropy",
            detail: format!("expected a single row of logits, got {rows} rows"),
        });
    }
    if target_index >= cols {
        return Err(Error::IndexOutOfRange {
            context: "cross_entropy",
            index: target_index,
            bound: cols,
        });
    }
    let probs = logits.softmax()?;
    let logp = probs.log_floored(1e-300)?;
    let mut onehot = vec![0.0; cols];
    onehot[target_index] = 1.0;
    let mask = Tensor::constant(&[cols], onehot)?;
    // mean picks out logp[target]/cols; rescale to −logp[target].
    logp.mul(&mask)?.reduce_mean()?.scale(-(cols as f64))
}

/// Reverse topological order (parents before children), iterative so deep
/// graphs cannot overflow the stack. Only grad-requiring nodes are walked.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited: HashSet<usize> = HashSet::new();
    let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !visited.insert(t.ptr()) {
            continue;
        }
        stack.push((t.clone(), true));
        let n = t.0.borrow();
        for p in &n.parents {
            if p.requires_grad() && !visited.contains(&p.ptr()) {
                stack.push((p.clone(), false));
            }
        }
    }
    order
}

/// Accumulates d(root)/d(node) into every grad-requiring node reachable from
/// `root`. Each node is visited exactly once; fan-out adds contributions.
pub fn backward(root: &Tensor) -> Result<()> {
    if root.len() != 1 {
        return Err(Error::ShapeMismatch {
            kernel: "backward",
            detail: format!("root must be scalar, got shape {:?}", root.shape()),
        });
    }
    if !root.requires_grad() {
        return Err(Error::Other("backward root does not require grad".into()));
    }
    let order = topo_order(root);
    {
        let mut n = root.0.borrow_mut();
        let g = n.grad.get_or_insert_with(|| vec![0.0; 1]);
        g[0] += 1.0;
    }
    for t in order.iter().rev() {
        kernels::backprop(t)?;
    }
    Ok(())
}

pub(crate) fn accumulate_grad(t: &Tensor, delta: &[f64]) {
    let mut n = t.0.borrow_mut();
    let len = n.values.len();
    debug_assert_eq!(len, delta.len());
    let g = n.grad.get_or_insert_with(|| vec![0.0; len]);
    for (gi, di) in g.iter_mut().zip(delta) {
        *gi += di;
    }
}

pub(crate) fn node_ref(t: &Tensor) -> Ref<'_, Node> {
    t.0.borrow()
}

impl Node {
    pub(crate) fn shape(&self) -> &[usize] {
        &self.shape
    }
    pub(crate) fn values(&self) -> &[f64] {
        &self.values
    }
    pub(crate) fn grad_slice(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }
    pub(crate) fn kind(&self) -> KernelKind {
        self.kind
    }
    pub(crate) fn attrs(&self) -> &Attrs {
        &self.attrs
    }
    pub(crate) fn parents(&self) -> &[Tensor] {
        &self.parents
    }
}
