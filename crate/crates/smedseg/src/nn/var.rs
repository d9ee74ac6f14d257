//! Reverse-mode autodiff over [`Tensor`] values.
//!
//! `Var` is a reference-counted node in a dynamically built computation
//! graph. Operations (see [`super::ops`]) produce new `Var`s that remember
//! their parents and a backward closure. Calling [`Var::backward`] on a
//! scalar runs a topological sweep, accumulating gradients into every node
//! that requires them.
//!
//! Graph construction is single-threaded by design; the heavy inner loops
//! of individual ops may still use data parallelism internally.

use std::cell::{Cell, Ref, RefCell};
use std::rc::Rc;

use super::tensor::Tensor;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static NO_GRAD_DEPTH: Cell<u32> = const { Cell::new(0) };
}

/// While a `NoGradGuard` is alive, newly created ops do not record parents
/// or backward closures. Inference over large volumes uses this to avoid
/// retaining activations.
pub struct NoGradGuard(());

impl NoGradGuard {
    pub fn new() -> Self {
        NO_GRAD_DEPTH.with(|d| d.set(d.get() + 1));
        NoGradGuard(())
    }
}

impl Default for NoGradGuard {
    fn default() -> Self {
        Self::new()
    }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        NO_GRAD_DEPTH.with(|d| d.set(d.get() - 1));
    }
}

fn grad_suppressed() -> bool {
    NO_GRAD_DEPTH.with(|d| d.get() > 0)
}

/// Context handed to backward closures.
pub struct BackwardCtx<'a> {
    /// Gradient of the loss with respect to this node's output.
    pub grad_out: &'a Tensor,
    /// This node's forward value.
    pub out: &'a Tensor,
    /// Parent nodes, in the order given to `Var::from_op`.
    pub parents: &'a [Var],
}

type BackwardFn = Box<dyn Fn(&BackwardCtx) -> Vec<Option<Tensor>>>;

struct VarNode {
    id: u64,
    value: RefCell<Tensor>,
    grad: RefCell<Option<Tensor>>,
    requires_grad: bool,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
}

/// A node in the autodiff graph. Cloning is cheap (shared reference).
#[derive(Clone)]
pub struct Var(Rc<VarNode>);

impl Var {
    fn fresh_id() -> u64 {
        NEXT_ID.with(|c| {
            let id = c.get();
            c.set(id + 1);
            id
        })
    }

    /// A leaf node. Parameters pass `requires_grad = true`; inputs and
    /// constants pass `false`.
    pub fn leaf(value: Tensor, requires_grad: bool) -> Var {
        Var(Rc::new(VarNode {
            id: Self::fresh_id(),
            value: RefCell::new(value),
            grad: RefCell::new(None),
            requires_grad,
            parents: Vec::new(),
            backward: None,
        }))
    }

    pub fn parameter(value: Tensor) -> Var {
        Var::leaf(value, true)
    }

    pub fn constant(value: Tensor) -> Var {
        Var::leaf(value, false)
    }

    /// An interior node produced by an op. The backward closure receives the
    /// upstream gradient and returns one optional gradient per parent, in
    /// order. When no parent requires gradients (or a `NoGradGuard` is
    /// active) the edge information is dropped and the node becomes a
    /// constant leaf.
    pub fn from_op(value: Tensor, parents: &[&Var], backward: BackwardFn) -> Var {
        let needs = !grad_suppressed() && parents.iter().any(|p| p.0.requires_grad);
        if !needs {
            return Var::constant(value);
        }
        Var(Rc::new(VarNode {
            id: Self::fresh_id(),
            value: RefCell::new(value),
            grad: RefCell::new(None),
            requires_grad: true,
            parents: parents.iter().map(|p| (*p).clone()).collect(),
            backward: Some(backward),
        }))
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn value(&self) -> Ref<'_, Tensor> {
        self.0.value.borrow()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.value.borrow().shape().to_vec()
    }

    /// Replaces the stored value. Only meaningful for leaves (the optimizer
    /// updates parameters through this).
    pub fn set_value(&self, value: Tensor) {
        debug_assert!(self.0.parents.is_empty(), "set_value on interior node");
        *self.0.value.borrow_mut() = value;
    }

    /// Applies an in-place update to the stored value.
    pub fn update_value(&self, f: impl FnOnce(&mut Tensor)) {
        f(&mut self.0.value.borrow_mut());
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    fn accumulate_grad(&self, g: Tensor) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => acc.add_assign(&g),
            None => *slot = Some(g),
        }
    }

    /// Reverse-mode sweep from a scalar output. Gradients accumulate into
    /// every reachable node with `requires_grad`; leaves keep theirs until
    /// `zero_grad`.
    pub fn backward(&self) {
        assert_eq!(
            self.value().numel(),
            1,
            "backward() requires a scalar output, got shape {:?}",
            self.shape()
        );
        let order = self.topo_order();
        self.accumulate_grad(Tensor::full(&self.value().shape().to_vec(), 1.0));
        for node in order.iter().rev() {
            let Some(backward) = node.0.backward.as_ref() else {
                continue;
            };
            let grad_out = node
                .0
                .grad
                .borrow()
                .clone()
                .expect("topological order guarantees an accumulated gradient");
            let out = node.0.value.borrow();
            let ctx = BackwardCtx {
                grad_out: &grad_out,
                out: &out,
                parents: &node.0.parents,
            };
            let parent_grads = backward(&ctx);
            drop(out);
            assert_eq!(parent_grads.len(), node.0.parents.len());
            for (parent, grad) in node.0.parents.iter().zip(parent_grads) {
                if let Some(g) = grad {
                    if parent.0.requires_grad {
                        parent.accumulate_grad(g);
                    }
                }
            }
            // Interior gradients are not needed once propagated.
            *node.0.grad.borrow_mut() = None;
        }
    }

    /// Iterative post-order over the graph (children before parents in the
    /// returned list means parents-last; we reverse when sweeping).
    fn topo_order(&self) -> Vec<Var> {
        let mut order: Vec<Var> = Vec::new();
        let mut visited: std::collections::HashSet<u64> = std::collections::HashSet::new();
        // Stack of (node, next child index to visit).
        let mut stack: Vec<(Var, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.0.id);
        while let Some((node, child_idx)) = stack.pop() {
            if child_idx < node.0.parents.len() {
                let child = node.0.parents[child_idx].clone();
                stack.push((node, child_idx + 1));
                if child.0.requires_grad && visited.insert(child.0.id) {
                    stack.push((child, 0));
                }
            } else {
                order.push(node);
            }
        }
        order
    }
}
