use std::fmt;

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;

/// Dense row-major n-dimensional array.
///
/// Storage is always contiguous; layout-changing operations copy.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i] = acc;
        acc *= shape[i];
    }
    strides
}

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(TensorError::Broadcast {
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

/// Strides that read a tensor of `shape` as if it had `target` shape
/// (zero stride along broadcast axes). `shape` must broadcast to `target`.
pub fn broadcast_strides(shape: &[usize], target: &[usize]) -> Vec<usize> {
    let own = contiguous_strides(shape);
    let offset = target.len() - shape.len();
    (0..target.len())
        .map(|i| {
            if i < offset || shape[i - offset] == 1 {
                0
            } else {
                own[i - offset]
            }
        })
        .collect()
}

/// Visits every element of `shape` in row-major order, handing the callback
/// the strided source offset of the start of each innermost run.
fn for_each_run(shape: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n = shape.len();
    if n == 0 {
        f(0, 1, 0);
        return;
    }
    if shape.contains(&0) {
        return;
    }
    let inner = shape[n - 1];
    let istride = strides[n - 1];
    let mut idx = vec![0usize; n - 1];
    let mut base = 0usize;
    loop {
        f(base, inner, istride);
        let mut d = n - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            base += strides[d];
            if idx[d] < shape[d] {
                break;
            }
            base -= strides[d] * shape[d];
            idx[d] = 0;
        }
    }
}

/// Gathers `src` read through `strides` into a contiguous buffer of `shape`.
pub(crate) fn strided_gather<T: Copy>(shape: &[usize], strides: &[usize], src: &[T]) -> Vec<T> {
    let mut out = Vec::with_capacity(numel(shape));
    for_each_run(shape, strides, |base, inner, istride| {
        if istride == 1 {
            out.extend_from_slice(&src[base..base + inner]);
        } else {
            out.extend((0..inner).map(|j| src[base + j * istride]));
        }
    });
    out
}

/// Adjoint of [`strided_gather`]: adds contiguous `src` of `shape` into `dst`
/// at strided positions.
pub(crate) fn strided_scatter_add<T: Scalar>(
    shape: &[usize],
    strides: &[usize],
    src: &[T],
    dst: &mut [T],
) {
    let mut pos = 0;
    for_each_run(shape, strides, |base, inner, istride| {
        let run = &src[pos..pos + inner];
        if istride == 1 {
            for (d, &s) in dst[base..base + inner].iter_mut().zip(run) {
                *d += s;
            }
        } else if istride == 0 {
            let mut acc = T::zero();
            for &s in run {
                acc += s;
            }
            dst[base] += acc;
        } else {
            for (j, &s) in run.iter().enumerate() {
                dst[base + j * istride] += s;
            }
        }
        pos += inner;
    });
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: (0..numel(shape)).map(f).collect(),
        }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    /// Single element access by multi-index.
    pub fn at(&self, index: &[usize]) -> T {
        debug_assert_eq!(index.len(), self.shape.len());
        let strides = contiguous_strides(&self.shape);
        let off: usize = index.iter().zip(&strides).map(|(i, s)| i * s).sum();
        self.data[off]
    }

    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(TensorError::NotScalar(self.shape.clone()));
        }
        Ok(self.data[0])
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(TensorError::Reshape {
                from: self.shape,
                to: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        check_axes(axes, self.rank())?;
        let strides = contiguous_strides(&self.shape);
        let shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let src_strides: Vec<usize> = axes.iter().map(|&a| strides[a]).collect();
        Ok(Self {
            data: strided_gather(&shape, &src_strides, &self.data),
            shape,
        })
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Self> {
        let target = broadcast_shape(&self.shape, shape)?;
        if target != shape {
            return Err(TensorError::Broadcast {
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let strides = broadcast_strides(&self.shape, shape);
        Ok(Self {
            data: strided_gather(shape, &strides, &self.data),
            shape: shape.to_vec(),
        })
    }

    /// Sums over broadcast axes so the result has `shape`; inverse of
    /// [`Tensor::broadcast_to`] for gradients.
    pub fn sum_to_shape(&self, shape: &[usize]) -> Result<Self> {
        if self.shape == shape {
            return Ok(self.clone());
        }
        let target = broadcast_shape(shape, &self.shape)?;
        if target != self.shape {
            return Err(TensorError::Broadcast {
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let strides = broadcast_strides(shape, &self.shape);
        let mut out = vec![T::zero(); numel(shape)];
        strided_scatter_add(&self.shape, &strides, &self.data, &mut out);
        Ok(Self {
            shape: shape.to_vec(),
            data: out,
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn map_inplace(&mut self, f: impl Fn(T) -> T) {
        for v in &mut self.data {
            *v = f(*v);
        }
    }

    /// Broadcasting elementwise combination.
    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape == other.shape {
            return Ok(Self {
                shape: self.shape.clone(),
                data: self
                    .data
                    .iter()
                    .zip(&other.data)
                    .map(|(&a, &b)| f(a, b))
                    .collect(),
            });
        }
        let shape = broadcast_shape(&self.shape, &other.shape)?;
        let sa = broadcast_strides(&self.shape, &shape);
        let sb = broadcast_strides(&other.shape, &shape);
        let n = shape.len();
        let mut data = Vec::with_capacity(numel(&shape));
        // Walk the output once, tracking both operand offsets.
        if shape.contains(&0) {
            return Ok(Self { shape, data });
        }
        let inner = shape[n - 1];
        let (ia, ib) = (sa[n - 1], sb[n - 1]);
        let mut idx = vec![0usize; n - 1];
        let (mut ba, mut bb) = (0usize, 0usize);
        loop {
            for j in 0..inner {
                data.push(f(self.data[ba + j * ia], other.data[bb + j * ib]));
            }
            let mut d = n - 1;
            let done = loop {
                if d == 0 {
                    break true;
                }
                d -= 1;
                idx[d] += 1;
                ba += sa[d];
                bb += sb[d];
                if idx[d] < shape[d] {
                    break false;
                }
                ba -= sa[d] * shape[d];
                bb -= sb[d] * shape[d];
                idx[d] = 0;
            };
            if done {
                break;
            }
        }
        Ok(Self { shape, data })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// In-place `self += other` for identical shapes.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op: "add_assign",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs().as_f64())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Sum along one axis.
    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Self> {
        if axis >= self.rank() {
            return Err(TensorError::Axis {
                axis,
                rank: self.rank(),
            });
        }
        let outer: usize = self.shape[..axis].iter().product();
        let len = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &self.data[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = self.shape.clone();
        if keepdim {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        Ok(Self { shape, data: out })
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        if axis >= self.rank() || start + len > self.shape[axis] {
            return Err(TensorError::Narrow {
                shape: self.shape.clone(),
                axis,
                start,
                len,
            });
        }
        let outer: usize = self.shape[..axis].iter().product();
        let full = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let off = (o * full + start) * inner;
            data.extend_from_slice(&self.data[off..off + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(Self { shape, data })
    }

    pub fn cat(parts: &[&Self], axis: usize) -> Result<Self> {
        let first = parts.first().ok_or(TensorError::Empty("cat"))?;
        if axis >= first.rank() {
            return Err(TensorError::Axis {
                axis,
                rank: first.rank(),
            });
        }
        let mut shape = first.shape.clone();
        shape[axis] = 0;
        for p in parts {
            let mut a = p.shape.clone();
            let mut b = first.shape.clone();
            if a.len() != b.len() {
                return Err(TensorError::ShapeMismatch {
                    op: "cat",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            shape[axis] += a[axis];
            a[axis] = 0;
            b[axis] = 0;
            if a != b {
                return Err(TensorError::ShapeMismatch {
                    op: "cat",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        Ok(Self { shape, data })
    }

    /// Index of the maximum along the last axis; ties go to the lowest index.
    pub fn argmax_last(&self) -> Vec<usize> {
        let c = *self.shape.last().unwrap_or(&1);
        self.data
            .chunks(c.max(1))
            .map(|row| {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }
}

pub(crate) fn check_axes(axes: &[usize], rank: usize) -> Result<()> {
    let mut seen = vec![false; rank];
    if axes.len() != rank {
        return Err(TensorError::Permutation(axes.to_vec()));
    }
    for &a in axes {
        if a >= rank || seen[a] {
            return Err(TensorError::Permutation(axes.to_vec()));
        }
        seen[a] = true;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_matches_manual_transpose() {
        let t = Tensor::<f64>::from_fn(&[2, 3], |i| i as f64);
        let p = t.permute(&[1, 0]).unwrap();
        assert_eq!(p.shape(), &[3, 2]);
        assert_eq!(p.data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    }

    #[test]
    fn broadcast_and_reduce_are_adjoint() {
        let b = Tensor::<f64>::from_fn(&[1, 3, 1], |i| i as f64 + 1.0);
        let big = b.broadcast_to(&[2, 3, 4]).unwrap();
        assert_eq!(big.at(&[1, 2, 3]), 3.0);
        let back = big.sum_to_shape(&[1, 3, 1]).unwrap();
        assert_eq!(back.data(), &[8.0, 16.0, 24.0]);
    }

    #[test]
    fn zip_map_broadcasts_channels() {
        let x = Tensor::<f32>::ones(&[2, 3, 2, 2]);
        let c = Tensor::<f32>::from_fn(&[3, 1, 1], |i| i as f32);
        let y = x.add(&c).unwrap();
        assert_eq!(y.at(&[1, 2, 1, 0]), 3.0);
        assert!(broadcast_shape(&[2, 3], &[4]).is_err());
    }

    #[test]
    fn narrow_and_cat_roundtrip() {
        let t = Tensor::<f64>::from_fn(&[2, 5, 3], |i| i as f64);
        let a = t.narrow(1, 0, 2).unwrap();
        let b = t.narrow(1, 2, 3).unwrap();
        assert_eq!(Tensor::cat(&[&a, &b], 1).unwrap(), t);
    }

    #[test]
    fn argmax_ties_go_low() {
        let t = Tensor::<f32>::new(&[2, 3], vec![0.2, 0.5, 0.5, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(t.argmax_last(), vec![1, 0]);
    }
}
