use crate::autograd::Var;
use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

struct MatmulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_rhs: bool,
    out_shape: Vec<usize>,
}

fn dims(a: &[usize], b: &[usize], trans_b: bool) -> Result<MatmulDims> {
    let mismatch = || TensorError::ShapeMismatch {
        op: "matmul",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() < 2 || b.len() < 2 {
        return Err(mismatch());
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (bk, n) = if trans_b {
        (b[b.len() - 1], b[b.len() - 2])
    } else {
        (b[b.len() - 2], b[b.len() - 1])
    };
    if bk != k {
        return Err(mismatch());
    }
    let shared_rhs = b.len() == 2;
    if !shared_rhs && b[..b.len() - 2] != a[..a.len() - 2] {
        return Err(mismatch());
    }
    let batch = a[..a.len() - 2].iter().product();
    let mut out_shape = a[..a.len() - 2].to_vec();
    out_shape.extend([m, n]);
    Ok(MatmulDims {
        batch,
        m,
        k,
        n,
        shared_rhs,
        out_shape,
    })
}

impl<T: Scalar> Var<T> {
    /// Batched `self @ rhs`; a 2-D `rhs` is shared across the batch.
    pub fn matmul(&self, rhs: &Var<T>) -> Result<Var<T>> {
        self.matmul_impl(rhs, false)
    }

    /// Batched `self @ rhs^T` (transpose of the last two axes of `rhs`).
    pub fn matmul_t(&self, rhs: &Var<T>) -> Result<Var<T>> {
        self.matmul_impl(rhs, true)
    }

    fn matmul_impl(&self, rhs: &Var<T>, trans_b: bool) -> Result<Var<T>> {
        let d = dims(self.shape(), rhs.shape(), trans_b)?;
        let (batch, m, k, n, shared) = (d.batch, d.m, d.k, d.n, d.shared_rhs);
        let (a, b) = (self.value().data(), rhs.value().data());
        // b element (kk, j) strides
        let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        let mut c = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            let bi = if shared { b } else { &b[i * k * n..(i + 1) * k * n] };
            T::gemm(
                m,
                k,
                n,
                T::one(),
                &a[i * m * k..(i + 1) * m * k],
                k as isize,
                1,
                bi,
                rsb,
                csb,
                T::zero(),
                &mut c[i * m * n..(i + 1) * m * n],
                n as isize,
                1,
            );
        }
        let out = Tensor::new(&d.out_shape, c)?;
        Ok(Var::from_op(
            out,
            "matmul",
            &[self, rhs],
            Box::new(move |g, x, _| {
                let (a, b, gd) = (x[0].data(), x[1].data(), g.data());
                let mut da = vec![T::zero(); a.len()];
                let mut db = vec![T::zero(); b.len()];
                // op(B)^T element (j, kk) strides
                let (rs_bt, cs_bt) = if trans_b { (k as isize, 1) } else { (1, n as isize) };
                for i in 0..batch {
                    let gi = &gd[i * m * n..(i + 1) * m * n];
                    let ai = &a[i * m * k..(i + 1) * m * k];
                    let bi = if shared { b } else { &b[i * k * n..(i + 1) * k * n] };
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        gi,
                        n as isize,
                        1,
                        bi,
                        rs_bt,
                        cs_bt,
                        T::zero(),
                        &mut da[i * m * k..(i + 1) * m * k],
                        k as isize,
                        1,
                    );
                    let (dbi, beta) = if shared {
                        (&mut db[..], if i == 0 { T::zero() } else { T::one() })
                    } else {
                        (&mut db[i * k * n..(i + 1) * k * n], T::zero())
                    };
                    if trans_b {
                        // dB [n,k] = dC^T [n,m] @ A [m,k]
                        T::gemm(n, m, k, T::one(), gi, 1, n as isize, ai, k as isize, 1, beta, dbi, k as isize, 1);
                    } else {
                        // dB [k,n] = A^T [k,m] @ dC [m,n]
                        T::gemm(k, m, n, T::one(), ai, 1, k as isize, gi, n as isize, 1, beta, dbi, n as isize, 1);
                    }
                }
                Ok(vec![
                    Some(Tensor::new(x[0].shape(), da)?),
                    Some(Tensor::new(x[1].shape(), db)?),
                ])
            }),
        ))
    }

    /// `x @ weight^T + bias` over the last axis; `weight` is `[out, in]`.
    pub fn linear(&self, weight: &Var<T>, bias: Option<&Var<T>>) -> Result<Var<T>> {
        let in_f = *self.shape().last().unwrap_or(&0);
        let lead: Vec<usize> = self.shape()[..self.rank().saturating_sub(1)].to_vec();
        let rows: usize = lead.iter().product();
        let y = self.reshape(&[rows, in_f])?.matmul_t(weight)?;
        let y = match bias {
            Some(b) => y.add(b)?,
            None => y,
        };
        let mut shape = lead;
        shape.push(weight.dim(0));
        y.reshape(&shape)
    }
}
