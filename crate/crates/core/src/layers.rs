//! Building blocks shared by both branches.

use latefuse_tensor::nn::{trunc_normal, BatchNorm, Conv2d, Mode};
use latefuse_tensor::{impl_params, ConvOpts, Param, Result, Scalar, Tensor, Var};
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Act {
    None,
    Relu,
    Relu6,
    Gelu,
}

impl Act {
    pub fn apply<T: Scalar>(self, x: Var<T>) -> Var<T> {
        match self {
            Act::None => x,
            Act::Relu => x.relu(),
            Act::Relu6 => x.relu6(),
            Act::Gelu => x.gelu(),
        }
    }
}

pub fn silu<T: Scalar>(x: &Var<T>) -> Result<Var<T>> {
    x.mul(&x.sigmoid())
}

/// Spatial mean keeping singleton axes: `[B, C, H, W] -> [B, C, 1, 1]`.
pub fn global_avg<T: Scalar>(x: &Var<T>) -> Result<Var<T>> {
    x.mean_axis(3, true)?.mean_axis(2, true)
}

/// Convolution, batch norm, activation.
pub struct ConvBn<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm<T>,
    act: Act,
}
impl_params!(ConvBn { conv, bn });

impl<T: Scalar> ConvBn<T> {
    pub fn new(cin: usize, cout: usize, k: usize, opts: ConvOpts, bias: bool, act: Act, rng: &mut impl Rng) -> Self {
        Self {
            conv: Conv2d::new(cin, cout, k, opts, bias, rng),
            bn: BatchNorm::new(cout),
            act,
        }
    }

    pub fn forward(&self, x: &Var<T>, mode: Mode) -> Result<Var<T>> {
        Ok(self.act.apply(self.bn.forward(&self.conv.forward(x)?, mode)?))
    }
}

/// Depthwise `k × k` conv, batch norm, pointwise conv. No biases.
pub struct SeparableConvBn<T> {
    pub depthwise: Conv2d<T>,
    pub bn: BatchNorm<T>,
    pub pointwise: Conv2d<T>,
}
impl_params!(SeparableConvBn { depthwise, bn, pointwise });

impl<T: Scalar> SeparableConvBn<T> {
    pub fn new(cin: usize, cout: usize, k: usize, rng: &mut impl Rng) -> Self {
        let dw = ConvOpts::default().padding((k - 1) / 2).groups(cin);
        Self {
            depthwise: Conv2d::new(cin, cin, k, dw, false, rng),
            bn: BatchNorm::new(cin),
            pointwise: Conv2d::new(cin, cout, 1, ConvOpts::default(), false, rng),
        }
    }

    pub fn forward(&self, x: &Var<T>, mode: Mode) -> Result<Var<T>> {
        let y = self.bn.forward(&self.depthwise.forward(x)?, mode)?;
        self.pointwise.forward(&y)
    }
}

/// Learned bias per head and relative offset inside a square window.
pub struct RelPosBias<T> {
    pub table: Param<T>,
    window: usize,
    heads: usize,
}
impl_params!(RelPosBias { table });

impl<T: Scalar> RelPosBias<T> {
    pub fn new(window: usize, heads: usize, rng: &mut impl Rng) -> Self {
        let side = 2 * window - 1;
        Self {
            table: Param::new(trunc_normal(&[side * side, heads], 0.02, rng)),
            window,
            heads,
        }
    }

    /// `[heads, N, N]` for a `p × p` window, `p <= window`.
    pub fn forward(&self, p: usize) -> Result<Var<T>> {
        assert!(p <= self.window, "window {p} exceeds bias table for {}", self.window);
        let side = 2 * self.window - 1;
        let n = p * p;
        let mut index = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                let dy = (i / p) as isize - (j / p) as isize + self.window as isize - 1;
                let dx = (i % p) as isize - (j % p) as isize + self.window as isize - 1;
                index.push(dy as usize * side + dx as usize);
            }
        }
        self.table.var().index_rows(&index)?.t()?.reshape(&[self.heads, n, n])
    }
}

/// Scaled dot-product attention over `[.., heads, N, d]` with an optional
/// additive `[heads, N, N]` bias.
pub fn attention<T: Scalar>(q: &Var<T>, k: &Var<T>, v: &Var<T>, bias: Option<&Var<T>>) -> Result<Var<T>> {
    let d = *q.shape().last().expect("rank >= 2");
    let mut s = q.matmul_t(k)?.scale(1.0 / (d as f64).sqrt());
    if let Some(b) = bias {
        s = s.add(b)?;
    }
    s.softmax_last()?.matmul(v)
}

/// Splits `[Bw, N, 3C]` into per-head q, k, v of shape `[Bw, heads, N, C/heads]`.
pub fn split_qkv<T: Scalar>(qkv: &Var<T>, heads: usize) -> Result<[Var<T>; 3]> {
    let (bw, n, c3) = (qkv.dim(0), qkv.dim(1), qkv.dim(2));
    let d = c3 / 3 / heads;
    let x = qkv.reshape(&[bw, n, 3, heads, d])?.permute(&[2, 0, 3, 1, 4])?;
    let part = |i| x.narrow(0, i, 1)?.reshape(&[bw, heads, n, d]);
    Ok([part(0)?, part(1)?, part(2)?])
}

/// `[Bw, heads, N, d] -> [Bw, N, heads * d]`.
pub fn merge_heads<T: Scalar>(x: &Var<T>) -> Result<Var<T>> {
    let (bw, h, n, d) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    x.permute(&[0, 2, 1, 3])?.reshape(&[bw, n, h * d])
}

/// Non-overlapping `p × p` windows of a channels-last map:
/// `[B, H, W, C] -> [B * H/p * W/p, p*p, C]`.
pub fn window_partition<T: Scalar>(x: &Var<T>, p: usize) -> Result<Var<T>> {
    let (b, h, w, c) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    x.reshape(&[b, h / p, p, w / p, p, c])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape(&[b * (h / p) * (w / p), p * p, c])
}

pub fn window_reverse<T: Scalar>(x: &Var<T>, p: usize, b: usize, h: usize, w: usize) -> Result<Var<T>> {
    let c = x.dim(2);
    x.reshape(&[b, h / p, w / p, p, p, c])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape(&[b, h, w, c])
}

/// Dilated `g × g` grid: each group gathers positions spaced `H/g` apart.
pub fn grid_partition<T: Scalar>(x: &Var<T>, g: usize) -> Result<Var<T>> {
    let (b, h, w, c) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    x.reshape(&[b, g, h / g, g, w / g, c])?
        .permute(&[0, 2, 4, 1, 3, 5])?
        .reshape(&[b * (h / g) * (w / g), g * g, c])
}

pub fn grid_reverse<T: Scalar>(x: &Var<T>, g: usize, b: usize, h: usize, w: usize) -> Result<Var<T>> {
    let c = x.dim(2);
    x.reshape(&[b, h / g, w / g, g, g, c])?
        .permute(&[0, 3, 1, 4, 2, 5])?
        .reshape(&[b, h, w, c])
}

pub fn to_channels_last<T: Scalar>(x: &Var<T>) -> Result<Var<T>> {
    x.permute(&[0, 2, 3, 1])
}

pub fn to_channels_first<T: Scalar>(x: &Var<T>) -> Result<Var<T>> {
    x.permute(&[0, 3, 1, 2])
}

/// A constant depthwise kernel averaging `kh × kw` taps, for pooling via conv.
pub fn box_kernel<T: Scalar>(channels: usize, kh: usize, kw: usize) -> Var<T> {
    Var::constant(Tensor::full(&[channels, 1, kh, kw], T::of(1.0 / (kh * kw) as f64)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: &[usize]) -> Var<f64> {
        Var::constant(Tensor::from_fn(shape, |i| i as f64))
    }

    #[test]
    fn partitions_round_trip_and_group_the_right_pixels() {
        let (b, h, w, c) = (2, 8, 8, 3);
        let x = ramp(&[b, h, w, c]);
        let win = window_partition(&x, 4).unwrap();
        assert_eq!(win.shape(), &[8, 16, 3]);
        assert_eq!(window_reverse(&win, 4, b, h, w).unwrap().value(), x.value());
        // second window of the first image starts at column 4
        assert_eq!(win.value().at(&[1, 0, 0]), x.value().at(&[0, 0, 4, 0]));

        let grid = grid_partition(&x, 4).unwrap();
        assert_eq!(grid.shape(), &[8, 16, 3]);
        assert_eq!(grid_reverse(&grid, 4, b, h, w).unwrap().value(), x.value());
        // members of one grid group are 2 pixels apart
        assert_eq!(grid.value().at(&[0, 1, 0]), x.value().at(&[0, 0, 2, 0]));
        assert_eq!(grid.value().at(&[0, 4, 0]), x.value().at(&[0, 2, 0, 0]));
    }

    #[test]
    fn relative_bias_depends_only_on_offset() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let rel = RelPosBias::<f64>::new(3, 2, &mut rng);
        let b = rel.forward(3).unwrap();
        let v = b.value();
        // (0,0)->(1,1) and (1,1)->(2,2) share the offset (-1,-1)
        assert_eq!(v.at(&[1, 0, 4]), v.at(&[1, 4, 8]));
        assert_ne!(v.at(&[1, 0, 4]), v.at(&[1, 4, 0]));
        assert_eq!(rel.forward(2).unwrap().shape(), &[2, 4, 4]);
    }
}
