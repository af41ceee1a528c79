use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use ndarray::Array2;

use super::ops::{self, Activation, Dim, OpKind, Reduce};
use crate::error::{Error, Result};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Key identifying one parameter of one parameter store.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamKey {
    pub store: u64,
    pub index: usize,
}

/// Reference to a node on a specific tape generation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId {
    tape: u64,
    generation: u64,
    index: usize,
}

/// A dense value plus optional linkage to the tape that produced it.
///
/// Values are immutable and shared; cloning a tensor is cheap.
#[derive(Clone, Debug)]
pub struct Tensor {
    value: Arc<Array2<f64>>,
    node: Option<NodeId>,
}

impl Tensor {
    /// An untracked constant.
    pub fn constant(value: Array2<f64>) -> Self {
        Tensor {
            value: Arc::new(value),
            node: None,
        }
    }

    pub fn from_shared(value: Arc<Array2<f64>>) -> Self {
        Tensor { value, node: None }
    }

    pub fn scalar(v: f64) -> Self {
        Self::constant(Array2::from_elem((1, 1), v))
    }

    pub fn value(&self) -> &Array2<f64> {
        &self.value
    }

    pub fn shared(&self) -> Arc<Array2<f64>> {
        Arc::clone(&self.value)
    }

    pub fn node_id(&self) -> Option<NodeId> {
        self.node
    }

    /// True when the tensor is linked to a tape node and gradients can reach it.
    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.dim()
    }

    /// The single entry of a 1x1 tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.shape(), (1, 1));
        self.value[[0, 0]]
    }
}

#[derive(Debug)]
enum NodeKind {
    Leaf(Option<ParamKey>),
    Op(OpKind),
}

#[derive(Debug)]
struct Node {
    kind: NodeKind,
    inputs: Vec<Option<usize>>,
    saved: Vec<Arc<Array2<f64>>>,
    output: Arc<Array2<f64>>,
}

#[derive(Debug)]
struct Inner {
    generation: u64,
    nodes: Vec<Node>,
    recording: bool,
    op_count: usize,
    peak: usize,
    params: HashMap<ParamKey, usize>,
}

/// Live and peak number of recorded operations since the last reset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct GraphMetrics {
    pub node_count: usize,
    pub peak_node_count: usize,
}

/// Reverse-mode tape. Parameter leaves are registered once per generation
/// and are not counted as operations.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    inner: RefCell<Inner>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Result of a backward pass.
#[derive(Debug, Default)]
pub struct Gradients {
    params: HashMap<ParamKey, Array2<f64>>,
    watched: HashMap<NodeId, Array2<f64>>,
}

impl Gradients {
    pub fn param(&self, key: ParamKey) -> Option<&Array2<f64>> {
        self.params.get(&key)
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn params(&self) -> impl Iterator<Item = (&ParamKey, &Array2<f64>)> {
        self.params.iter()
    }

    /// Adjoint of a tensor passed to [`Tape::backward_with`].
    pub fn wrt(&self, t: &Tensor) -> Option<&Array2<f64>> {
        t.node.and_then(|n| self.watched.get(&n))
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            inner: RefCell::new(Inner {
                generation: 0,
                nodes: Vec::new(),
                recording: true,
                op_count: 0,
                peak: 0,
                params: HashMap::new(),
            }),
        }
    }

    /// Drop every node. Tensors linked to the old generation become stale.
    pub fn reset(&self) {
        let mut inner = self.inner.borrow_mut();
        inner.generation += 1;
        inner.nodes.clear();
        inner.op_count = 0;
        inner.peak = 0;
        inner.params.clear();
    }

    /// Drop nodes without resetting the peak counter.
    pub fn clear(&self) {
        let mut inner = self.inner.borrow_mut();
        inner.generation += 1;
        inner.nodes.clear();
        inner.op_count = 0;
        inner.params.clear();
    }

    pub fn metrics(&self) -> GraphMetrics {
        let inner = self.inner.borrow();
        GraphMetrics {
            node_count: inner.op_count,
            peak_node_count: inner.peak,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.inner.borrow().recording
    }

    /// Returns the previous setting.
    pub fn set_recording(&self, on: bool) -> bool {
        std::mem::replace(&mut self.inner.borrow_mut().recording, on)
    }

    /// Run `f` with recording disabled.
    pub fn no_grad<R>(&self, f: impl FnOnce() -> R) -> R {
        let prev = self.set_recording(false);
        let out = f();
        self.set_recording(prev);
        out
    }

    /// Value-preserving copy with no tape linkage.
    pub fn stop_gradient(&self, x: &Tensor) -> Tensor {
        Tensor {
            value: Arc::clone(&x.value),
            node: None,
        }
    }

    /// Bind a parameter value as a tracked leaf (memoized per key).
    pub fn param(&self, key: ParamKey, value: &Arc<Array2<f64>>) -> Tensor {
        let mut inner = self.inner.borrow_mut();
        if !inner.recording {
            return Tensor::from_shared(Arc::clone(value));
        }
        let index = match inner.params.get(&key) {
            Some(&i) => i,
            None => {
                let i = inner.nodes.len();
                inner.nodes.push(Node {
                    kind: NodeKind::Leaf(Some(key)),
                    inputs: Vec::new(),
                    saved: Vec::new(),
                    output: Arc::clone(value),
                });
                inner.params.insert(key, i);
                i
            }
        };
        Tensor {
            value: Arc::clone(&inner.nodes[index].output),
            node: Some(NodeId {
                tape: self.id,
                generation: inner.generation,
                index,
            }),
        }
    }

    /// Make an untracked value a leaf so its adjoint can be read back.
    pub fn watch(&self, x: &Tensor) -> Tensor {
        let mut inner = self.inner.borrow_mut();
        if !inner.recording {
            return self.stop_gradient(x);
        }
        let index = inner.nodes.len();
        inner.nodes.push(Node {
            kind: NodeKind::Leaf(None),
            inputs: Vec::new(),
            saved: Vec::new(),
            output: Arc::clone(&x.value),
        });
        Tensor {
            value: Arc::clone(&x.value),
            node: Some(NodeId {
                tape: self.id,
                generation: inner.generation,
                index,
            }),
        }
    }

    fn resolve(&self, inner: &Inner, t: &Tensor) -> Result<Option<usize>> {
        match t.node {
            None => Ok(None),
            Some(n) if n.tape == self.id && n.generation == inner.generation => Ok(Some(n.index)),
            Some(_) => Err(Error::StaleTensor),
        }
    }

    /// Apply one operation, recording it when any input is tracked and
    /// recording is enabled.
    pub fn apply(&self, kind: OpKind, inputs: &[&Tensor]) -> Result<Tensor> {
        let values: Vec<&Array2<f64>> = inputs.iter().map(|t| t.value()).collect();
        let out = Arc::new(ops::forward(&kind, &values)?);
        let mut inner = self.inner.borrow_mut();
        if !inner.recording {
            return Ok(Tensor::from_shared(out));
        }
        let links = inputs
            .iter()
            .map(|t| self.resolve(&inner, t))
            .collect::<Result<Vec<_>>>()?;
        if links.iter().all(Option::is_none) {
            return Ok(Tensor::from_shared(out));
        }
        let index = inner.nodes.len();
        inner.nodes.push(Node {
            kind: NodeKind::Op(kind),
            inputs: links,
            saved: inputs.iter().map(|t| t.shared()).collect(),
            output: Arc::clone(&out),
        });
        inner.op_count += 1;
        inner.peak = inner.peak.max(inner.op_count);
        Ok(Tensor {
            value: out,
            node: Some(NodeId {
                tape: self.id,
                generation: inner.generation,
                index,
            }),
        })
    }

    /// Backpropagate from a scalar root. A detached root yields no gradients.
    pub fn backward(&self, root: &Tensor) -> Result<Gradients> {
        self.backward_with(root, &[])
    }

    /// Backpropagate and additionally return adjoints of `watch` tensors.
    pub fn backward_with(&self, root: &Tensor, watch: &[&Tensor]) -> Result<Gradients> {
        let (rows, cols) = root.shape();
        if (rows, cols) != (1, 1) {
            return Err(Error::NonScalarRoot { rows, cols });
        }
        let inner = self.inner.borrow();
        let Some(root_index) = self.resolve(&inner, root)? else {
            return Ok(Gradients::default());
        };
        let mut watched_index = HashMap::new();
        for t in watch {
            if let Some(i) = self.resolve(&inner, t)? {
                watched_index.insert(i, t.node.expect("resolved"));
            }
        }

        let mut adjoint: Vec<Option<Array2<f64>>> = vec![None; root_index + 1];
        adjoint[root_index] = Some(Array2::from_elem((1, 1), 1.0));
        let mut grads = Gradients::default();

        for i in (0..=root_index).rev() {
            let Some(g) = adjoint[i].take() else { continue };
            let node = &inner.nodes[i];
            if let Some(id) = watched_index.get(&i) {
                grads.watched.insert(*id, g.clone());
            }
            match &node.kind {
                NodeKind::Leaf(Some(key)) => {
                    grads.params.insert(*key, g);
                }
                NodeKind::Leaf(None) => {}
                NodeKind::Op(kind) => {
                    let needs: Vec<bool> = node.inputs.iter().map(Option::is_some).collect();
                    let parts = ops::backward(kind, &node.saved, &node.output, &g, &needs);
                    for (link, part) in node.inputs.iter().zip(parts) {
                        if let (Some(j), Some(p)) = (link, part) {
                            match &mut adjoint[*j] {
                                Some(acc) => *acc += &p,
                                slot @ None => *slot = Some(p),
                            }
                        }
                    }
                }
            }
        }
        Ok(grads)
    }

    // Convenience wrappers.

    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply(OpKind::MatMul, &[a, b])
    }

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply(OpKind::Add, &[a, b])
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply(OpKind::Sub, &[a, b])
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply(OpKind::Mul, &[a, b])
    }

    pub fn div(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply(OpKind::Div, &[a, b])
    }

    pub fn scale(&self, a: &Tensor, k: f64) -> Result<Tensor> {
        self.apply(OpKind::Scale(k), &[a])
    }

    pub fn offset(&self, a: &Tensor, k: f64) -> Result<Tensor> {
        self.apply(OpKind::Offset(k), &[a])
    }

    pub fn act(&self, a: &Tensor, act: Activation) -> Result<Tensor> {
        self.apply(OpKind::Activation(act), &[a])
    }

    pub fn tanh(&self, a: &Tensor) -> Result<Tensor> {
        self.act(a, Activation::Tanh)
    }

    pub fn exp(&self, a: &Tensor) -> Result<Tensor> {
        self.act(a, Activation::Exp)
    }

    pub fn concat(&self, parts: &[&Tensor], dim: Dim) -> Result<Tensor> {
        self.apply(OpKind::Concat(dim), parts)
    }

    pub fn slice_cols(&self, a: &Tensor, start: usize, len: usize) -> Result<Tensor> {
        self.apply(
            OpKind::Slice {
                dim: Dim::Cols,
                start,
                len,
            },
            &[a],
        )
    }

    pub fn slice_rows(&self, a: &Tensor, start: usize, len: usize) -> Result<Tensor> {
        self.apply(
            OpKind::Slice {
                dim: Dim::Rows,
                start,
                len,
            },
            &[a],
        )
    }

    pub fn reduce(&self, a: &Tensor, r: Reduce) -> Result<Tensor> {
        self.apply(OpKind::Reduce(r), &[a])
    }

    pub fn sum(&self, a: &Tensor) -> Result<Tensor> {
        self.reduce(a, Reduce::Sum)
    }

    pub fn mean(&self, a: &Tensor) -> Result<Tensor> {
        self.reduce(a, Reduce::Mean)
    }

    pub fn reshape(&self, a: &Tensor, rows: usize, cols: usize) -> Result<Tensor> {
        self.apply(OpKind::Reshape { rows, cols }, &[a])
    }

    pub fn transpose(&self, a: &Tensor) -> Result<Tensor> {
        self.apply(OpKind::Transpose, &[a])
    }

    pub fn gather(&self, table: &Tensor, rows: &[usize]) -> Result<Tensor> {
        self.apply(OpKind::Gather(rows.into()), &[table])
    }

    pub fn repeat_rows(&self, a: &Tensor, n: usize) -> Result<Tensor> {
        self.apply(OpKind::RepeatRows(n), &[a])
    }
}
