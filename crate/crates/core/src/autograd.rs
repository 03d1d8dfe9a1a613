//! Define-by-run reverse-mode differentiation.
//!
//! Every primitive applied to a [`Var`] that depends on a trainable leaf
//! records its parents and a local vector-Jacobian closure. Calling
//! [`Var::backward`] linearises the reachable graph into a [`Tape`]
//! (topological order) and replays it in reverse. Values that do not depend
//! on any trainable leaf carry no history, so inference keeps no graph alive.

use std::cell::RefCell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use crate::error::{NomError, Result};
use crate::tensor::Tensor;

/// Maps the upstream gradient of a node to one gradient per parent.
/// `None` marks a parent that receives no contribution.
pub type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: &'static str,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
    grad: RefCell<Option<Tensor>>,
}

/// A tensor participating in (or excluded from) gradient recording.
#[derive(Clone)]
pub struct Var(Rc<Node>);

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("op", &self.0.op)
            .field("shape", &self.0.value.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl Var {
    fn leaf(value: Tensor, requires_grad: bool) -> Self {
        Var(Rc::new(Node {
            value,
            requires_grad,
            op: "leaf",
            parents: Vec::new(),
            backward: None,
            grad: RefCell::new(None),
        }))
    }

    /// A value that never receives a gradient.
    pub fn constant(value: Tensor) -> Self {
        Var::leaf(value, false)
    }

    /// A trainable leaf; after `backward` it holds `d loss / d self`.
    pub fn parameter(value: Tensor) -> Self {
        Var::leaf(value, true)
    }

    /// Records the result of a primitive. History is kept only when some
    /// parent requires a gradient.
    pub fn from_op(
        op: &'static str,
        value: Tensor,
        parents: Vec<Var>,
        backward: BackwardFn,
    ) -> Self {
        let requires_grad = parents.iter().any(Var::requires_grad);
        if !requires_grad {
            return Var(Rc::new(Node {
                value,
                requires_grad: false,
                op,
                parents: Vec::new(),
                backward: None,
                grad: RefCell::new(None),
            }));
        }
        Var(Rc::new(Node {
            value,
            requires_grad,
            op,
            parents,
            backward: Some(backward),
            grad: RefCell::new(None),
        }))
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn op_name(&self) -> &'static str {
        self.0.op
    }

    pub fn is_leaf(&self) -> bool {
        self.0.backward.is_none()
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Overwrites the accumulated gradient, e.g. after clipping.
    pub fn set_grad(&self, grad: Tensor) {
        *self.0.grad.borrow_mut() = Some(grad);
    }

    /// Same value, no history.
    pub fn detach(&self) -> Var {
        Var::constant(self.0.value.clone())
    }

    fn key(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }

    /// Accumulates `d self / d leaf` into every trainable leaf reachable from
    /// `self`. Accumulation is additive, so repeated calls sum.
    pub fn backward(&self) -> Result<()> {
        if self.value().numel() != 1 {
            return Err(NomError::invalid_shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape()),
            ));
        }
        let tape = Tape::record(self);
        tape.run(self, Tensor::ones(self.shape()));
        Ok(())
    }
}

/// Topologically ordered record of the primitives reachable from a loss.
pub struct Tape {
    order: Vec<Var>,
}

impl Tape {
    /// Post-order DFS: parents precede children, each node appears once.
    pub fn record(root: &Var) -> Tape {
        let mut order = Vec::new();
        let mut seen = HashSet::new();
        if !root.requires_grad() {
            return Tape { order };
        }
        let mut stack: Vec<(Var, bool)> = vec![(root.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !seen.insert(node.key()) {
                continue;
            }
            stack.push((node.clone(), true));
            for p in node.0.parents.iter().rev() {
                if p.requires_grad() && !seen.contains(&p.key()) {
                    stack.push((p.clone(), false));
                }
            }
        }
        Tape { order }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Operation names in execution order.
    pub fn ops(&self) -> Vec<&'static str> {
        self.order.iter().map(Var::op_name).collect()
    }

    fn run(self, root: &Var, seed: Tensor) {
        let mut grads: HashMap<usize, Tensor> = HashMap::new();
        grads.insert(root.key(), seed);
        for node in self.order.iter().rev() {
            let Some(g) = grads.remove(&node.key()) else {
                continue;
            };
            match &node.0.backward {
                None => {
                    let mut slot = node.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.add_assign(&g),
                        None => *slot = Some(g),
                    }
                }
                Some(f) => {
                    let parent_grads = f(&g);
                    debug_assert_eq!(parent_grads.len(), node.0.parents.len());
                    for (p, pg) in node.0.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !p.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.shape(), p.shape(), "grad shape for {}", p.op_name());
                        match grads.get_mut(&p.key()) {
                            Some(acc) => acc.add_assign(&pg),
                            None => {
                                grads.insert(p.key(), pg);
                            }
                        }
                    }
                }
            }
        }
    }
}
