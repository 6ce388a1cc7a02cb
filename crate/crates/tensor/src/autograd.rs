//! Reverse-mode automatic differentiation.
//!
//! A [`Var`] is a reference-counted graph node holding its forward value and,
//! when gradients are being recorded, the backward closure plus handles to
//! its inputs. Node ids are allocated monotonically, so sorting reachable
//! nodes by descending id is a valid reverse topological order.

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Result, TensorError};
use crate::param::{Param, ParamId};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

static NEXT_NODE: AtomicU64 = AtomicU64::new(1);

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Runs `f` without recording a backward graph.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

/// Backward closure: `(grad_out, inputs, output) -> grad per input`.
pub(crate) type BackwardFn<T> =
    Box<dyn Fn(&Tensor<T>, &[&Tensor<T>], &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>>>;

struct Op<T: Scalar> {
    name: &'static str,
    parents: Vec<Var<T>>,
    backward: BackwardFn<T>,
}

struct Node<T: Scalar> {
    id: u64,
    value: Rc<Tensor<T>>,
    requires_grad: bool,
    param: Option<ParamId>,
    op: Option<Op<T>>,
}

impl<T: Scalar> Drop for Node<T> {
    // Deep graphs would otherwise recurse once per layer on drop.
    fn drop(&mut self) {
        let mut stack: Vec<Var<T>> = match self.op.take() {
            Some(op) => op.parents,
            None => return,
        };
        while let Some(v) = stack.pop() {
            if let Ok(mut node) = Rc::try_unwrap(v.0) {
                if let Some(op) = node.op.take() {
                    stack.extend(op.parents);
                }
            }
        }
    }
}

/// Differentiable tensor handle.
pub struct Var<T: Scalar>(Rc<Node<T>>);

impl<T: Scalar> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var(Rc::clone(&self.0))
    }
}

impl<T: Scalar> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Var#{}({:?}, grad={})",
            self.0.id, self.0.value, self.0.requires_grad
        )
    }
}

fn next_id() -> u64 {
    NEXT_NODE.fetch_add(1, Ordering::Relaxed)
}

impl<T: Scalar> Var<T> {
    /// A value that never receives gradients.
    pub fn constant(value: Tensor<T>) -> Self {
        Self::make(Rc::new(value), false, None, None)
    }

    /// A leaf that receives gradients while recording is enabled.
    pub fn leaf(value: Tensor<T>) -> Self {
        Self::make(Rc::new(value), is_grad_enabled(), None, None)
    }

    pub(crate) fn from_param(value: Rc<Tensor<T>>, id: ParamId, trainable: bool) -> Self {
        let rg = trainable && is_grad_enabled();
        Self::make(value, rg, Some(id), None)
    }

    fn make(value: Rc<Tensor<T>>, requires_grad: bool, param: Option<ParamId>, op: Option<Op<T>>) -> Self {
        Var(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad,
            param,
            op,
        }))
    }

    /// Records an operation node; the closure is kept only if some input
    /// requires gradients.
    pub(crate) fn from_op(
        value: Tensor<T>,
        name: &'static str,
        parents: &[&Var<T>],
        backward: BackwardFn<T>,
    ) -> Self {
        let rg = is_grad_enabled() && parents.iter().any(|p| p.requires_grad());
        let op = rg.then(|| Op {
            name,
            parents: parents.iter().map(|p| (*p).clone()).collect(),
            backward,
        });
        Self::make(Rc::new(value), rg, None, op)
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.0.value.dim(axis)
    }

    pub fn rank(&self) -> usize {
        self.0.value.rank()
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn op_name(&self) -> Option<&'static str> {
        self.0.op.as_ref().map(|o| o.name)
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::make(Rc::clone(&self.0.value), false, None, None)
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        (*self.0.value).clone()
    }

    /// Gradients of this scalar with respect to every reachable leaf.
    pub fn backward(&self) -> Result<Gradients<T>> {
        if self.value().numel() != 1 {
            return Err(TensorError::NotScalar(self.shape().to_vec()));
        }
        let mut order: Vec<Var<T>> = Vec::new();
        let mut seen = HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(v) = stack.pop() {
            if !v.requires_grad() || !seen.insert(v.id()) {
                continue;
            }
            if let Some(op) = &v.0.op {
                stack.extend(op.parents.iter().cloned());
            }
            order.push(v);
        }
        order.sort_unstable_by_key(|v| std::cmp::Reverse(v.id()));

        let mut pending: HashMap<u64, Tensor<T>> = HashMap::new();
        pending.insert(self.id(), Tensor::ones(self.shape()));
        let mut out = Gradients::default();
        for node in &order {
            let Some(grad) = pending.remove(&node.id()) else {
                continue;
            };
            match &node.0.op {
                None => {
                    if let Some(pid) = node.0.param {
                        accumulate(&mut out.by_param, pid, grad)?;
                    } else {
                        out.by_node.insert(node.id(), grad);
                    }
                }
                Some(op) => {
                    let inputs: Vec<&Tensor<T>> = op.parents.iter().map(|p| p.value()).collect();
                    let grads = (op.backward)(&grad, &inputs, node.value())?;
                    debug_assert_eq!(grads.len(), op.parents.len(), "{}", op.name);
                    for (parent, g) in op.parents.iter().zip(grads) {
                        let Some(g) = g else { continue };
                        if !parent.requires_grad() {
                            continue;
                        }
                        if g.shape() != parent.shape() {
                            return Err(TensorError::ShapeMismatch {
                                op: op.name,
                                lhs: parent.shape().to_vec(),
                                rhs: g.shape().to_vec(),
                            });
                        }
                        accumulate(&mut pending, parent.id(), g)?;
                    }
                }
            }
        }
        Ok(out)
    }
}

fn accumulate<K: std::hash::Hash + Eq, T: Scalar>(
    map: &mut HashMap<K, Tensor<T>>,
    key: K,
    g: Tensor<T>,
) -> Result<()> {
    match map.get_mut(&key) {
        Some(acc) => acc.add_assign(&g),
        None => {
            map.insert(key, g);
            Ok(())
        }
    }
}

/// Result of [`Var::backward`].
pub struct Gradients<T> {
    by_node: HashMap<u64, Tensor<T>>,
    by_param: HashMap<ParamId, Tensor<T>>,
}

impl<T> Default for Gradients<T> {
    fn default() -> Self {
        Self {
            by_node: HashMap::new(),
            by_param: HashMap::new(),
        }
    }
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a non-parameter leaf created with [`Var::leaf`].
    pub fn get(&self, v: &Var<T>) -> Option<&Tensor<T>> {
        self.by_node.get(&v.id())
    }

    pub fn param(&self, p: &Param<T>) -> Option<&Tensor<T>> {
        self.by_param.get(&p.id())
    }

    pub fn by_id(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.by_param.get(&id)
    }

    pub fn len(&self) -> usize {
        self.by_param.len() + self.by_node.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
