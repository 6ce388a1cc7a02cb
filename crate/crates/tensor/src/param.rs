use std::cell::RefCell;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::autograd::Var;
use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

static NEXT_PARAM: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

/// A named-by-position model tensor.
///
/// Trainable parameters receive gradients and optimizer updates; buffers
/// (running statistics) do not, but are checkpointed alongside them.
pub struct Param<T> {
    id: ParamId,
    trainable: bool,
    value: RefCell<Rc<Tensor<T>>>,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        Self::with_kind(value, true)
    }

    pub fn buffer(value: Tensor<T>) -> Self {
        Self::with_kind(value, false)
    }

    fn with_kind(value: Tensor<T>, trainable: bool) -> Self {
        Self {
            id: ParamId(NEXT_PARAM.fetch_add(1, Ordering::Relaxed)),
            trainable,
            value: RefCell::new(Rc::new(value)),
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        Rc::clone(&self.value.borrow())
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value.borrow().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.value.borrow().numel()
    }

    /// Graph handle for the current value.
    pub fn var(&self) -> Var<T> {
        Var::from_param(self.value(), self.id, self.trainable)
    }

    /// Replaces the value; the shape must not change.
    pub fn set(&self, value: Tensor<T>) -> Result<()> {
        let mut slot = self.value.borrow_mut();
        if slot.shape() != value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "Param::set",
                lhs: slot.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        *slot = Rc::new(value);
        Ok(())
    }

    /// In-place update; copies only if a live graph still holds the value.
    pub fn update(&self, f: impl FnOnce(&mut Tensor<T>)) {
        let mut slot = self.value.borrow_mut();
        f(Rc::make_mut(&mut slot));
    }
}

impl<T: Scalar> std::fmt::Debug for Param<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Param({:?}, {:?})", self.id, self.shape())
    }
}

/// Anything that owns parameters, visited with dotted path names.
pub trait HasParams<T: Scalar> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Param<T>));

    fn named_params(&self) -> Vec<(String, &Param<T>)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, p| out.push((name.to_string(), p)));
        out
    }

    /// Number of trainable scalars.
    fn count_parameters(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| {
            if p.is_trainable() {
                n += p.numel()
            }
        });
        n
    }
}

pub fn join_path(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<T: Scalar> HasParams<T> for Param<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Param<T>)) {
        f(prefix, self)
    }
}

impl<T: Scalar, M: HasParams<T>> HasParams<T> for Vec<M> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Param<T>)) {
        for (i, m) in self.iter().enumerate() {
            m.visit(&join_path(prefix, &i.to_string()), f);
        }
    }
}

impl<T: Scalar, M: HasParams<T>> HasParams<T> for Option<M> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Param<T>)) {
        if let Some(m) = self {
            m.visit(prefix, f);
        }
    }
}

impl<T: Scalar, M: HasParams<T>> HasParams<T> for Box<M> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Param<T>)) {
        (**self).visit(prefix, f)
    }
}

/// Implements [`HasParams`] for a struct generic over `T: Scalar` by visiting
/// the listed fields in order.
#[macro_export]
macro_rules! impl_params {
    ($ty:ident { $($field:ident),* $(,)? }) => {
        impl<T: $crate::Scalar> $crate::HasParams<T> for $ty<T> {
            fn visit<'a>(
                &'a self,
                prefix: &str,
                f: &mut dyn FnMut(&str, &'a $crate::Param<T>),
            ) {
                $( $crate::HasParams::visit(&self.$field, &$crate::join_path(prefix, stringify!($field)), f); )*
            }
        }
    };
}
