//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Var`] is a node in a dynamically built graph. Operations record a
//! backward closure only while gradients are enabled and at least one input
//! requires a gradient, so inference under [`no_grad`] keeps no history.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use crate::element::Element;
use crate::tensor::Tensor;

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Disables graph recording until dropped.
pub struct NoGradGuard {
    prev: bool,
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.prev));
    }
}

pub fn no_grad() -> NoGradGuard {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    NoGradGuard { prev }
}

pub type GradSlot<T> = Rc<RefCell<Option<Tensor<T>>>>;

/// Computes parent gradients from the output gradient. The flag slice tells
/// which parents need one; entries for the others may be `None`.
pub type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Element> {
    value: Tensor<T>,
    requires_grad: bool,
    parents: Vec<Var<T>>,
    backward: Option<BackwardFn<T>>,
    sink: Option<GradSlot<T>>,
}

#[derive(Clone)]
pub struct Var<T: Element>(Rc<Node<T>>);

impl<T: Element> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({:?}, requires_grad={})", self.0.value, self.0.requires_grad)
    }
}

impl<T: Element> Var<T> {
    /// A value that never receives gradients.
    pub fn constant(value: Tensor<T>) -> Self {
        Self(Rc::new(Node { value, requires_grad: false, parents: Vec::new(), backward: None, sink: None }))
    }

    /// A leaf whose gradient is retained and readable via [`Var::grad`].
    pub fn leaf(value: Tensor<T>) -> Self {
        Self::with_sink(value, Rc::new(RefCell::new(None)))
    }

    pub(crate) fn with_sink(value: Tensor<T>, sink: GradSlot<T>) -> Self {
        if !is_grad_enabled() {
            return Self::constant(value);
        }
        Self(Rc::new(Node { value, requires_grad: true, parents: Vec::new(), backward: None, sink: Some(sink) }))
    }

    /// Records the result of a custom operation.
    pub fn from_op(value: Tensor<T>, parents: Vec<Var<T>>, backward: BackwardFn<T>) -> Self {
        let requires_grad = is_grad_enabled() && parents.iter().any(|p| p.requires_grad());
        if !requires_grad {
            return Self::constant(value);
        }
        Self(Rc::new(Node { value, requires_grad: true, parents, backward: Some(backward), sink: None }))
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Accumulated gradient of a leaf after [`Var::backward`].
    pub fn grad(&self) -> Option<Tensor<T>> {
        self.0.sink.as_ref().and_then(|s| s.borrow().clone())
    }

    pub fn detach(&self) -> Self {
        Self::constant(self.0.value.clone())
    }

    pub fn item(&self) -> T {
        self.0.value.item()
    }

    /// Back-propagates from a scalar.
    pub fn backward(&self) {
        assert_eq!(self.value().numel(), 1, "backward() needs a scalar; use backward_with");
        self.backward_with(Tensor::ones(self.shape()));
    }

    pub fn backward_with(&self, seed: Tensor<T>) {
        assert_eq!(seed.shape(), self.shape(), "seed gradient shape mismatch");
        if !self.requires_grad() {
            return;
        }
        let order = self.topological_order();
        let mut grads: HashMap<*const Node<T>, Tensor<T>> = HashMap::new();
        grads.insert(Rc::as_ptr(&self.0), seed);
        for var in order.iter().rev() {
            let key = Rc::as_ptr(&var.0);
            let Some(g) = grads.remove(&key) else { continue };
            if let Some(sink) = &var.0.sink {
                let mut slot = sink.borrow_mut();
                match slot.as_mut() {
                    Some(acc) => acc.add_assign(&g),
                    None => *slot = Some(g.clone()),
                }
            }
            if let Some(backward) = &var.0.backward {
                let needs: Vec<bool> = var.0.parents.iter().map(|p| p.requires_grad()).collect();
                let parent_grads = backward(&g, &needs);
                debug_assert_eq!(parent_grads.len(), var.0.parents.len());
                for ((parent, pg), need) in var.0.parents.iter().zip(parent_grads).zip(needs) {
                    let Some(pg) = pg else { continue };
                    if !need {
                        continue;
                    }
                    assert_eq!(pg.shape(), parent.shape(), "gradient shape mismatch in backward");
                    let pk = Rc::as_ptr(&parent.0);
                    match grads.get_mut(&pk) {
                        Some(acc) => acc.add_assign(&pg),
                        None => {
                            grads.insert(pk, pg);
                        }
                    }
                }
            }
        }
    }

    /// Post-order over nodes that require gradients (parents first).
    fn topological_order(&self) -> Vec<Var<T>> {
        let mut order = Vec::new();
        let mut visited: std::collections::HashSet<*const Node<T>> = std::collections::HashSet::new();
        let mut stack: Vec<(Var<T>, bool)> = vec![(self.clone(), false)];
        while let Some((var, expanded)) = stack.pop() {
            if expanded {
                order.push(var);
                continue;
            }
            if !visited.insert(Rc::as_ptr(&var.0)) {
                continue;
            }
            stack.push((var.clone(), true));
            for p in &var.0.parents {
                if p.requires_grad() && !visited.contains(&Rc::as_ptr(&p.0)) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }
}

/// Trainable tensor with an accumulated gradient.
#[derive(Clone)]
pub struct Param<T: Element>(Rc<ParamInner<T>>);

struct ParamInner<T: Element> {
    value: RefCell<Tensor<T>>,
    grad: GradSlot<T>,
}

impl<T: Element> std::fmt::Debug for Param<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Param{:?}", self.shape())
    }
}

impl<T: Element> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        Self(Rc::new(ParamInner { value: RefCell::new(value), grad: Rc::new(RefCell::new(None)) }))
    }

    /// Graph leaf bound to this parameter's gradient slot.
    pub fn var(&self) -> Var<T> {
        Var::with_sink(self.0.value.borrow().clone(), self.0.grad.clone())
    }

    pub fn value(&self) -> Tensor<T> {
        self.0.value.borrow().clone()
    }

    pub fn set_value(&self, value: Tensor<T>) {
        assert_eq!(value.shape(), self.shape().as_slice(), "parameter shape is fixed");
        *self.0.value.borrow_mut() = value;
    }

    /// In-place update of the parameter data.
    pub fn update(&self, f: impl FnOnce(&mut [T])) {
        f(self.0.value.borrow_mut().data_mut());
    }

    pub fn grad(&self) -> Option<Tensor<T>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.value.borrow().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.0.value.borrow().numel()
    }

    /// Identity of the underlying storage, for aliasing checks.
    pub fn id(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }
}
