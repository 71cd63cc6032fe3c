//! Dense tensors with tape-based reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable node in a dynamically built computation
//! graph. Forward ops allocate fresh nodes that hold reference-counted
//! handles to their inputs plus whatever context the backward pass needs;
//! [`Tensor::backward`] then walks the graph once in reverse topological
//! order, accumulating gradients into each tracked node's grad cell.
//!
//! Gradients accumulate across repeated `backward` calls until explicitly
//! zeroed, which is what makes gradient accumulation over micro-batches
//! work. Inside [`no_grad`] no graph edges are recorded, so long-lived
//! evaluation loops free intermediates as soon as they go out of scope.

pub mod ops;

#[cfg(test)]
mod tests;

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::Elem;

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

struct NoGradGuard(bool);

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        let prev = self.0;
        GRAD_ENABLED.with(|c| c.set(prev));
    }
}

/// Run `f` with gradient recording disabled. Ops called inside build no
/// graph edges, so intermediates are freed as soon as they drop.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let _guard = GRAD_ENABLED.with(|c| {
        let g = NoGradGuard(c.get());
        c.set(false);
        g
    });
    f()
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|c| c.get())
}

pub(crate) struct Node {
    pub(crate) id: u64,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<Elem>,
    pub(crate) requires_grad: bool,
    pub(crate) grad: RefCell<Option<Vec<Elem>>>,
    pub(crate) parents: Vec<Tensor>,
    pub(crate) back: Option<ops::BackOp>,
}

/// A dense row-major tensor, cheaply cloneable (the clone shares the node).
#[derive(Clone)]
pub struct Tensor {
    pub(crate) node: Rc<Node>,
}

impl Tensor {
    pub(crate) fn from_parts(
        data: Vec<Elem>,
        shape: Vec<usize>,
        requires_grad: bool,
        parents: Vec<Tensor>,
        back: Option<ops::BackOp>,
    ) -> Tensor {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        Tensor {
            node: Rc::new(Node {
                id: next_id(),
                shape,
                data,
                requires_grad,
                grad: RefCell::new(None),
                parents,
                back,
            }),
        }
    }

    /// Wrap `data` as a constant (non-tracked) tensor.
    pub fn new(data: Vec<Elem>, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dim(format!(
                "tensor: shape {:?} implies {} elements but {} were provided",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor::from_parts(data, shape.to_vec(), false, Vec::new(), None))
    }

    /// A constant tensor filled with `v`.
    pub fn full(v: Elem, shape: &[usize]) -> Tensor {
        Tensor::from_parts(
            vec![v; shape.iter().product()],
            shape.to_vec(),
            false,
            Vec::new(),
            None,
        )
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::full(0.0, shape)
    }

    /// A rank-0 scalar.
    pub fn scalar(v: Elem) -> Tensor {
        Tensor::from_parts(vec![v], Vec::new(), false, Vec::new(), None)
    }

    /// A gradient-tracked leaf (used by [`Parameter`]).
    pub fn leaf(data: Vec<Elem>, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::new(data, shape)?;
        Ok(Tensor {
            node: Rc::new(Node {
                id: next_id(),
                shape: t.node.shape.clone(),
                data: t.node.data.clone(),
                requires_grad: true,
                grad: RefCell::new(None),
                parents: Vec::new(),
                back: None,
            }),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn numel(&self) -> usize {
        self.node.data.len()
    }

    pub fn data(&self) -> &[Elem] {
        &self.node.data
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Elem {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar");
        self.node.data[0]
    }

    /// Clone of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<Elem>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Copy the values into a fresh constant tensor with no graph history.
    pub fn detach(&self) -> Tensor {
        Tensor::from_parts(self.node.data.clone(), self.node.shape.clone(), false, Vec::new(), None)
    }

    pub(crate) fn accum_grad(&self, g: &[Elem]) {
        debug_assert_eq!(g.len(), self.numel());
        let mut slot = self.node.grad.borrow_mut();
        match slot.as_mut() {
            Some(buf) => {
                for (b, &v) in buf.iter_mut().zip(g) {
                    *b += v;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Reverse-mode sweep from a scalar. Gradients accumulate into every
    /// reachable gradient-tracked node; call repeatedly to sum gradients
    /// from several losses.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.node.requires_grad {
            return Err(Error::Contract(
                "backward on a tensor that tracks no gradients (built under no_grad, \
                 or with no tracked inputs)"
                    .into(),
            ));
        }
        let order = self.topo_order();
        self.accum_grad(&[1.0]);
        for t in order.iter().rev() {
            let Some(back) = &t.node.back else { continue };
            let g = match t.node.grad.borrow().as_ref() {
                Some(g) => g.clone(),
                None => continue,
            };
            let parent_grads = back.backward(&t.node, &g);
            debug_assert_eq!(parent_grads.len(), t.node.parents.len());
            for (p, pg) in t.node.parents.iter().zip(parent_grads) {
                if let Some(pg) = pg {
                    p.accum_grad(&pg);
                }
            }
        }
        Ok(())
    }

    /// Post-order over the tracked subgraph (parents before consumers).
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        while let Some((t, ci)) = stack.pop() {
            if ci == 0 && !visited.insert(t.node.id) {
                continue;
            }
            if ci < t.node.parents.len() {
                let p = t.node.parents[ci].clone();
                stack.push((t, ci + 1));
                if p.node.requires_grad && !visited.contains(&p.node.id) {
                    stack.push((p, 0));
                }
            } else {
                order.push(t);
            }
        }
        order
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .finish()
    }
}

// ---------------------------------------------------------------------------
// Parameters and buffers
// ---------------------------------------------------------------------------

struct ParamInner {
    name: String,
    value: RefCell<Tensor>,
}

/// A named trainable tensor. The handle is shared: the forward pass snapshots
/// the current leaf with [`Parameter::tensor`], the optimizer swaps in fresh
/// data with [`Parameter::set_data`].
#[derive(Clone)]
pub struct Parameter {
    inner: Rc<ParamInner>,
}

impl Parameter {
    pub fn new(name: impl Into<String>, data: Vec<Elem>, shape: &[usize]) -> Result<Parameter> {
        Ok(Parameter {
            inner: Rc::new(ParamInner {
                name: name.into(),
                value: RefCell::new(Tensor::leaf(data, shape)?),
            }),
        })
    }

    pub fn name(&self) -> String {
        self.inner.name.clone()
    }

    /// Handle to the current leaf tensor (cheap; shares storage).
    pub fn tensor(&self) -> Tensor {
        self.inner.value.borrow().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.value.borrow().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.inner.value.borrow().numel()
    }

    /// Copy of the current values.
    pub fn snapshot(&self) -> Vec<Elem> {
        self.inner.value.borrow().data().to_vec()
    }

    /// Replace the values with a fresh leaf (clears any recorded gradient).
    pub fn set_data(&self, data: Vec<Elem>) -> Result<()> {
        let shape = self.shape();
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::Dim(format!(
                "parameter {}: set_data with {} values into shape {:?}",
                self.inner.name,
                data.len(),
                shape
            )));
        }
        *self.inner.value.borrow_mut() = Tensor::leaf(data, &shape)?;
        Ok(())
    }

    /// Gradient accumulated on the current leaf, if any.
    pub fn grad(&self) -> Option<Vec<Elem>> {
        self.inner.value.borrow().grad()
    }

    pub fn zero_grad(&self) {
        self.inner.value.borrow().zero_grad();
    }
}

impl fmt::Debug for Parameter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Parameter")
            .field("name", &self.inner.name)
            .field("shape", &self.shape())
            .finish()
    }
}

struct BufInner {
    name: String,
    shape: Vec<usize>,
    data: RefCell<Vec<Elem>>,
}

/// A named non-trainable state vector (batch-norm running statistics).
#[derive(Clone)]
pub struct Buffer {
    inner: Rc<BufInner>,
}

impl Buffer {
    pub fn new(name: impl Into<String>, data: Vec<Elem>, shape: &[usize]) -> Buffer {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        Buffer {
            inner: Rc::new(BufInner {
                name: name.into(),
                shape: shape.to_vec(),
                data: RefCell::new(data),
            }),
        }
    }

    pub fn name(&self) -> String {
        self.inner.name.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.shape.clone()
    }

    pub fn snapshot(&self) -> Vec<Elem> {
        self.inner.data.borrow().clone()
    }

    pub fn set(&self, data: Vec<Elem>) {
        debug_assert_eq!(data.len(), self.inner.data.borrow().len());
        *self.inner.data.borrow_mut() = data;
    }

    /// Mutate the buffer in place.
    pub fn update(&self, f: impl FnOnce(&mut [Elem])) {
        f(&mut self.inner.data.borrow_mut());
    }
}

/// Ordered collection of a model's parameters and buffers with unique names.
#[derive(Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
    buffers: Vec<Buffer>,
    names: HashSet<String>,
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet::default()
    }

    pub fn add_param(&mut self, p: &Parameter) {
        assert!(self.names.insert(p.name()), "duplicate parameter name {}", p.name());
        self.params.push(p.clone());
    }

    pub fn add_buffer(&mut self, b: &Buffer) {
        assert!(self.names.insert(b.name()), "duplicate buffer name {}", b.name());
        self.buffers.push(b.clone());
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn buffers(&self) -> &[Buffer] {
        &self.buffers
    }

    /// Total trainable scalar count (buffers excluded).
    pub fn total_params(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    pub fn find(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name() == name)
    }

    pub fn zero_grad(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }
}
