use latefuse_tensor::nn::{trunc_normal, BatchNorm, GroupNorm, Linear, Mode};
use latefuse_tensor::{impl_params, Param, Result, Scalar, Tensor, Var};
use rand::Rng;

/// Sinusoidal encoding of day-of-year, `d` features repeated `repeat` times.
pub fn positional_encoding<T: Scalar>(days: &[u16], d: usize, period: f64, repeat: usize) -> Tensor<T> {
    let mut out = Vec::with_capacity(days.len() * d * repeat);
    for &day in days {
        let row: Vec<T> = (0..d)
            .map(|i| {
                let angle = day as f64 / period.powf(2.0 * (i / 2) as f64 / d as f64);
                T::of(if i % 2 == 0 { angle.sin() } else { angle.cos() })
            })
            .collect();
        for _ in 0..repeat {
            out.extend_from_slice(&row);
        }
    }
    Tensor::new(&[days.len(), d * repeat], out).expect("sized above")
}

/// Additive attention mask: 0 on valid steps, `-inf` on padding.
pub fn mask_bias<T: Scalar>(validity: &[bool]) -> Vec<T> {
    validity
        .iter()
        .map(|&v| if v { T::zero() } else { T::neg_infinity() })
        .collect()
}

/// Lightweight temporal attention encoder: one learned master query per head
/// attends over the time axis of every pixel.
pub struct Ltae<T> {
    pub in_norm: GroupNorm<T>,
    pub inconv: Linear<T>,
    pub query: Param<T>,
    pub fc1_k: Linear<T>,
    pub mlp: Linear<T>,
    pub mlp_norm: BatchNorm<T>,
    pub out_norm: GroupNorm<T>,
    heads: usize,
    d_k: usize,
    d_model: usize,
    period: f64,
}
impl_params!(Ltae { in_norm, inconv, query, fc1_k, mlp, mlp_norm, out_norm });

pub struct LtaeOutput<T: Scalar> {
    /// `[B, C, h, w]`
    pub map: Var<T>,
    /// `[heads, B, T, h, w]`
    pub attention: Var<T>,
}

impl<T: Scalar> Ltae<T> {
    pub fn new(in_channels: usize, d_model: usize, heads: usize, d_k: usize, period: f64, rng: &mut impl Rng) -> Self {
        let std = (2.0 / d_k as f64).sqrt();
        let mut fc1_k = Linear::new(d_model, heads * d_k, true, rng);
        fc1_k.weight = Param::new(trunc_normal(&[heads * d_k, d_model], std, rng));
        Self {
            in_norm: GroupNorm::new(heads, in_channels),
            inconv: Linear::new(in_channels, d_model, true, rng),
            query: Param::new(trunc_normal(&[heads, d_k], std, rng)),
            fc1_k,
            mlp: Linear::new(d_model, in_channels, true, rng),
            mlp_norm: BatchNorm::new(in_channels),
            out_norm: GroupNorm::new(heads, in_channels),
            heads,
            d_k,
            d_model,
            period,
        }
    }

    /// `x` is `[B, T, C, h, w]`; `days` and `validity` are `[B * T]`.
    pub fn forward(&self, x: &Var<T>, days: &[u16], validity: &[bool], mode: Mode) -> Result<LtaeOutput<T>> {
        let (b, t, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3), x.dim(4));
        let (p, heads, dm) = (h * w, self.heads, self.d_model);
        let tokens = x.permute(&[0, 3, 4, 1, 2])?.reshape(&[b, p, t, c])?;
        let normed = masked_group_norm(&tokens, &self.in_norm, heads, validity)?.reshape(&[b * p * t, c])?;
        let tokens = self.inconv.forward(&normed)?.reshape(&[b, p, t, dm])?;
        let pe = positional_encoding::<T>(days, dm / heads, self.period, heads).reshape(&[b, 1, t, dm])?;
        let v = tokens.add(&Var::constant(pe))?;

        let keys = self
            .fc1_k
            .forward(&v)?
            .reshape(&[b, p, t, heads, self.d_k])?
            .permute(&[0, 1, 3, 2, 4])?;
        let q = self.query.var().reshape(&[heads, 1, self.d_k])?;
        let scores = keys.mul(&q)?.sum_axis(4, false)?.scale(1.0 / (self.d_k as f64).sqrt());
        let mask = Tensor::new(&[b, 1, 1, t], mask_bias(validity))?;
        let attn = scores.add(&Var::constant(mask))?.softmax_last()?;

        let values = v.reshape(&[b, p, t, heads, dm / heads])?.permute(&[0, 1, 3, 2, 4])?;
        let out = attn
            .reshape(&[b, p, heads, 1, t])?
            .matmul(&values)?
            .reshape(&[b * p, dm])?;
        let out = self.mlp_norm.forward(&self.mlp.forward(&out)?, mode)?.relu();
        let map = self
            .out_norm
            .forward(&out)?
            .reshape(&[b, h, w, c])?
            .permute(&[0, 3, 1, 2])?;
        let attention = attn.reshape(&[b, h, w, heads, t])?.permute(&[3, 0, 4, 1, 2])?;
        Ok(LtaeOutput { map, attention })
    }
}

/// Group norm of `[B, P, T, C]` tokens with statistics taken per pixel over
/// each channel group and the valid steps only. Padded steps come out as
/// the affine bias.
pub fn masked_group_norm<T: Scalar>(x: &Var<T>, norm: &GroupNorm<T>, groups: usize, validity: &[bool]) -> Result<Var<T>> {
    let (b, p, t, c) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let g = x.reshape(&[b, p, t, groups, c / groups])?;
    let m = Var::constant(Tensor::from_fn(&[b, 1, t, 1, 1], |i| if validity[i] { T::one() } else { T::zero() }));
    let inv = Var::constant(Tensor::from_fn(&[b, 1, 1, 1, 1], |i| {
        let n = validity[i * t..(i + 1) * t].iter().filter(|&&v| v).count().max(1);
        T::of(1.0 / (n * (c / groups)) as f64)
    }));
    let pooled = |v: &Var<T>| -> Result<Var<T>> { v.sum_axis(2, true)?.sum_axis(4, true)?.mul(&inv) };
    let mean = pooled(&g.mul(&m)?)?;
    let d = g.sub(&mean)?.mul(&m)?;
    let var = pooled(&d.square())?;
    let y = d.div(&var.affine(1.0, 1e-5).sqrt())?.reshape(&[b, p, t, c])?;
    y.mul(&norm.weight.var())?.add(&norm.bias.var())
}

/// Collapses `[B, T, C, H, W]` with per-head attention `[heads, B, T, h, w]`,
/// each head weighting its own channel group.
pub fn aggregate<T: Scalar>(x: &Var<T>, attention: &Var<T>, validity: &[bool]) -> Result<Var<T>> {
    let (b, t, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3), x.dim(4));
    let heads = attention.dim(0);
    let mut a = attention.reshape(&[heads * b, t, attention.dim(3), attention.dim(4)])?;
    if attention.dim(3) < h {
        a = a.resize_bilinear(h, w)?;
    } else if attention.dim(3) > h {
        a = a.avg_pool(attention.dim(3) / h)?;
    }
    let valid = Tensor::from_fn(&[1, b, t, 1, 1], |i| if validity[i] { T::one() } else { T::zero() });
    let a = a.reshape(&[heads, b, t, h, w])?.mul(&Var::constant(valid))?;
    let groups = x.reshape(&[b, t, heads, c / heads, h, w])?.permute(&[2, 0, 1, 3, 4, 5])?;
    a.reshape(&[heads, b, t, 1, h, w])?
        .mul(&groups)?
        .sum_axis(2, false)?
        .permute(&[1, 0, 2, 3, 4])?
        .reshape(&[b, c, h, w])
}
