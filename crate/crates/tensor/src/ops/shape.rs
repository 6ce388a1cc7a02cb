use crate::autograd::Var;
use crate::error::{invalid, Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::{check_axes, numel, Tensor};

impl<T: Scalar> Var<T> {
    pub fn reshape(&self, shape: &[usize]) -> Result<Var<T>> {
        if numel(shape) != self.value().numel() {
            return Err(TensorError::Reshape {
                from: self.shape().to_vec(),
                to: shape.to_vec(),
            });
        }
        let out = self.value().clone().reshape(shape)?;
        Ok(Var::from_op(
            out,
            "reshape",
            &[self],
            Box::new(|g, x, _| Ok(vec![Some(g.clone().reshape(x[0].shape())?)])),
        ))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Var<T>> {
        check_axes(axes, self.rank())?;
        let out = self.value().permute(axes)?;
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        Ok(Var::from_op(
            out,
            "permute",
            &[self],
            Box::new(move |g, _, _| Ok(vec![Some(g.permute(&inverse)?)])),
        ))
    }

    /// Swaps the last two axes.
    pub fn t(&self) -> Result<Var<T>> {
        let r = self.rank();
        if r < 2 {
            return Err(invalid("t", "rank < 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(&axes)
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<T>> {
        let out = self.value().narrow(axis, start, len)?;
        Ok(Var::from_op(
            out,
            "narrow",
            &[self],
            Box::new(move |g, x, _| {
                let shape = x[0].shape();
                let outer: usize = shape[..axis].iter().product();
                let full = shape[axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let mut d = vec![T::zero(); x[0].numel()];
                let gd = g.data();
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    let src = o * len * inner;
                    d[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
                }
                Ok(vec![Some(Tensor::new(shape, d)?)])
            }),
        ))
    }

    pub fn cat(parts: &[Var<T>], axis: usize) -> Result<Var<T>> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|p| p.value()).collect();
        let out = Tensor::cat(&values, axis)?;
        let refs: Vec<&Var<T>> = parts.iter().collect();
        Ok(Var::from_op(
            out,
            "cat",
            &refs,
            Box::new(move |g, x, _| {
                let mut start = 0;
                let mut grads = Vec::with_capacity(x.len());
                for xi in x {
                    let len = xi.dim(axis);
                    grads.push(Some(g.narrow(axis, start, len)?));
                    start += len;
                }
                Ok(grads)
            }),
        ))
    }

    /// Gathers rows of a 2-D tensor: `out[i] = self[indices[i]]`.
    pub fn index_rows(&self, indices: &[usize]) -> Result<Var<T>> {
        if self.rank() != 2 {
            return Err(invalid("index_rows", "expected a 2-D tensor"));
        }
        let (rows, cols) = (self.dim(0), self.dim(1));
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(invalid("index_rows", format!("index {bad} >= {rows}")));
        }
        let src = self.value().data();
        let mut d = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            d.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let out = Tensor::new(&[indices.len(), cols], d)?;
        let indices = indices.to_vec();
        Ok(Var::from_op(
            out,
            "index_rows",
            &[self],
            Box::new(move |g, x, _| {
                let mut d = vec![T::zero(); x[0].numel()];
                for (r, &i) in indices.iter().enumerate() {
                    let src = &g.data()[r * cols..(r + 1) * cols];
                    for (a, &b) in d[i * cols..(i + 1) * cols].iter_mut().zip(src) {
                        *a += b;
                    }
                }
                Ok(vec![Some(Tensor::new(x[0].shape(), d)?)])
            }),
        ))
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Var<T>> {
        let out = self.value().broadcast_to(shape)?;
        Ok(Var::from_op(
            out,
            "broadcast_to",
            &[self],
            Box::new(|g, x, _| Ok(vec![Some(g.sum_to_shape(x[0].shape())?)])),
        ))
    }
}
