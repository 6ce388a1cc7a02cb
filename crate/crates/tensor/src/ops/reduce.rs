use crate::autograd::Var;
use crate::error::{invalid, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn last_dim<T: Scalar>(v: &Var<T>, op: &'static str) -> Result<usize> {
    match v.shape().last() {
        Some(&n) if n > 0 => Ok(n),
        _ => Err(invalid(op, "needs a non-empty last axis")),
    }
}

impl<T: Scalar> Var<T> {
    pub fn sum_all(&self) -> Result<Var<T>> {
        let out = Tensor::scalar(self.value().sum());
        Ok(Var::from_op(
            out,
            "sum_all",
            &[self],
            Box::new(|g, x, _| Ok(vec![Some(Tensor::full(x[0].shape(), g.data()[0]))])),
        ))
    }

    pub fn mean_all(&self) -> Result<Var<T>> {
        let n = self.value().numel().max(1) as f64;
        Ok(self.sum_all()?.scale(1.0 / n))
    }

    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Var<T>> {
        let out = self.value().sum_axis(axis, keepdim)?;
        Ok(Var::from_op(
            out,
            "sum_axis",
            &[self],
            Box::new(move |g, x, _| {
                let mut kept = x[0].shape().to_vec();
                kept[axis] = 1;
                let g = g.clone().reshape(&kept)?;
                Ok(vec![Some(g.broadcast_to(x[0].shape())?)])
            }),
        ))
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Result<Var<T>> {
        let n = self.shape().get(axis).copied().unwrap_or(1).max(1) as f64;
        Ok(self.sum_axis(axis, keepdim)?.scale(1.0 / n))
    }

    pub fn softmax_last(&self) -> Result<Var<T>> {
        let n = last_dim(self, "softmax")?;
        let mut out = self.value().clone();
        for row in out.data_mut().chunks_mut(n) {
            softmax_row(row);
        }
        Ok(Var::from_op(
            out,
            "softmax",
            &[self],
            Box::new(move |g, _, y| {
                let mut d = Vec::with_capacity(y.numel());
                for (gr, yr) in g.data().chunks(n).zip(y.data().chunks(n)) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    d.extend(gr.iter().zip(yr).map(|(&a, &b)| b * (a - dot)));
                }
                Ok(vec![Some(Tensor::new(y.shape(), d)?)])
            }),
        ))
    }

    pub fn log_softmax_last(&self) -> Result<Var<T>> {
        let n = last_dim(self, "log_softmax")?;
        let mut out = self.value().clone();
        for row in out.data_mut().chunks_mut(n) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        Ok(Var::from_op(
            out,
            "log_softmax",
            &[self],
            Box::new(move |g, _, y| {
                let mut d = Vec::with_capacity(y.numel());
                for (gr, yr) in g.data().chunks(n).zip(y.data().chunks(n)) {
                    let gs: T = gr.iter().copied().sum();
                    d.extend(gr.iter().zip(yr).map(|(&a, &b)| a - b.exp() * gs));
                }
                Ok(vec![Some(Tensor::new(y.shape(), d)?)])
            }),
        ))
    }

    /// Zero-mean, unit-variance normalisation of each last-axis row
    /// (biased variance).
    pub fn normalize_last(&self, eps: f64) -> Result<Var<T>> {
        let n = last_dim(self, "normalize")?;
        let eps = T::of(eps);
        let nf = T::of(n as f64);
        let mut out = self.value().clone();
        let mut inv_std = Vec::with_capacity(out.numel() / n);
        for row in out.data_mut().chunks_mut(n) {
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let is = T::one() / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        Ok(Var::from_op(
            out,
            "normalize",
            &[self],
            Box::new(move |g, _, y| {
                let mut d = Vec::with_capacity(y.numel());
                for ((gr, yr), &is) in g.data().chunks(n).zip(y.data().chunks(n)).zip(&inv_std) {
                    let gm = gr.iter().copied().sum::<T>() / nf;
                    let gym = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / nf;
                    d.extend(gr.iter().zip(yr).map(|(&a, &b)| is * (a - gm - b * gym)));
                }
                Ok(vec![Some(Tensor::new(y.shape(), d)?)])
            }),
        ))
    }
}

/// Numerically stable in-place softmax; `-inf` entries get exactly zero.
pub fn softmax_row<T: Scalar>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}
