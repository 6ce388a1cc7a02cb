//! Parameterised layers built on [`Var`] ops.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{no_grad, Var};
use crate::error::{invalid, Result};
use crate::impl_params;
use crate::ops::ConvOpts;
use crate::param::Param;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Normal samples truncated to `[-2σ, 2σ]`.
pub fn trunc_normal<T: Scalar>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            break T::of(z * std);
        }
    })
}

/// He-style initialisation for a weight whose fan-in is `fan_in`.
pub fn kaiming<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    trunc_normal(shape, (2.0 / fan_in.max(1) as f64).sqrt(), rng)
}

pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
}
impl_params!(Linear { weight, bias });

impl<T: Scalar> Linear<T> {
    pub fn new(input: usize, output: usize, bias: bool, rng: &mut impl Rng) -> Self {
        Self {
            weight: Param::new(trunc_normal(&[output, input], 0.02, rng)),
            bias: bias.then(|| Param::new(Tensor::zeros(&[output]))),
        }
    }

    pub fn forward(&self, x: &Var<T>) -> Result<Var<T>> {
        let b = self.bias.as_ref().map(|b| b.var());
        x.linear(&self.weight.var(), b.as_ref())
    }
}

pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    opts: ConvOpts,
}
impl_params!(Conv2d { weight, bias });

impl<T: Scalar> Conv2d<T> {
    pub fn new(cin: usize, cout: usize, kernel: usize, opts: ConvOpts, bias: bool, rng: &mut impl Rng) -> Self {
        let per_group = cin / opts.groups.max(1);
        let fan_in = per_group * kernel * kernel;
        Self {
            weight: Param::new(kaiming(&[cout, per_group, kernel, kernel], fan_in, rng)),
            bias: bias.then(|| Param::new(Tensor::zeros(&[cout]))),
            opts,
        }
    }

    pub fn opts(&self) -> ConvOpts {
        self.opts
    }

    pub fn forward(&self, x: &Var<T>) -> Result<Var<T>> {
        let y = x.conv2d(&self.weight.var(), self.opts)?;
        match &self.bias {
            Some(b) => y.add(&channel_view(&b.var(), 2)?),
            None => Ok(y),
        }
    }
}

pub struct ConvTranspose2d<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    stride: usize,
    padding: usize,
}
impl_params!(ConvTranspose2d { weight, bias });

impl<T: Scalar> ConvTranspose2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(cin: usize, cout: usize, kernel: usize, stride: usize, padding: usize, bias: bool, rng: &mut impl Rng) -> Self {
        Self {
            weight: Param::new(kaiming(&[cin, cout, kernel, kernel], cin * kernel * kernel / (stride * stride).max(1), rng)),
            bias: bias.then(|| Param::new(Tensor::zeros(&[cout]))),
            stride,
            padding,
        }
    }

    pub fn forward(&self, x: &Var<T>) -> Result<Var<T>> {
        let y = x.conv_transpose2d(&self.weight.var(), self.stride, self.padding)?;
        match &self.bias {
            Some(b) => y.add(&channel_view(&b.var(), 2)?),
            None => Ok(y),
        }
    }
}

/// Reshapes a `[C]` vector so it broadcasts over `[B, C, <trailing>...]`.
pub fn channel_view<T: Scalar>(v: &Var<T>, trailing: usize) -> Result<Var<T>> {
    let mut shape = vec![v.dim(0)];
    shape.extend(std::iter::repeat_n(1, trailing));
    v.reshape(&shape)
}

fn affine<T: Scalar>(y: Var<T>, weight: &Param<T>, bias: &Param<T>, trailing: usize) -> Result<Var<T>> {
    y.mul(&channel_view(&weight.var(), trailing)?)?
        .add(&channel_view(&bias.var(), trailing)?)
}

/// Batch normalisation over `[B, C]` or `[B, C, H, W]`.
pub struct BatchNorm<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    eps: f64,
    momentum: f64,
}
impl_params!(BatchNorm { weight, bias, running_mean, running_var });

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            weight: Param::new(Tensor::ones(&[channels])),
            bias: Param::new(Tensor::zeros(&[channels])),
            running_mean: Param::buffer(Tensor::zeros(&[channels])),
            running_var: Param::buffer(Tensor::ones(&[channels])),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn forward(&self, x: &Var<T>, mode: Mode) -> Result<Var<T>> {
        let shape = x.shape().to_vec();
        let c = self.weight.numel();
        if shape.len() < 2 || shape[1] != c {
            return Err(invalid("batch_norm", format!("expected {c} channels, got {shape:?}")));
        }
        let trailing = shape.len() - 2;
        let spatial: usize = shape[2..].iter().product();
        let normed = match mode {
            Mode::Train => {
                // [B, C, S] -> [C, B*S]
                let cm = x.reshape(&[shape[0], c, spatial])?.permute(&[1, 0, 2])?;
                let flat = cm.reshape(&[c, shape[0] * spatial])?;
                self.update_running(flat.value());
                let y = flat.normalize_last(self.eps)?;
                y.reshape(&[c, shape[0], spatial])?.permute(&[1, 0, 2])?.reshape(&shape)?
            }
            Mode::Eval => {
                let mean = self.running_mean.value();
                let var = self.running_var.value();
                let eps = T::of(self.eps);
                let inv = var.map(|v| T::one() / (v + eps).sqrt());
                let shift = mean.mul(&inv)?.map(|v| -v);
                let inv = Var::constant(inv);
                let shift = Var::constant(shift);
                x.mul(&channel_view(&inv, trailing)?)?
                    .add(&channel_view(&shift, trailing)?)?
            }
        };
        affine(normed, &self.weight, &self.bias, trailing)
    }

    fn update_running(&self, rows: &Tensor<T>) {
        no_grad(|| {
            let n = rows.dim(1);
            if n == 0 {
                return;
            }
            let m = T::of(self.momentum);
            let nf = T::of(n as f64);
            let unbias = T::of(n as f64 / (n.max(2) - 1) as f64);
            let stats: Vec<(T, T)> = rows
                .data()
                .chunks(n)
                .map(|r| {
                    let mean = r.iter().copied().sum::<T>() / nf;
                    let var = r.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
                    (mean, var * unbias)
                })
                .collect();
            self.running_mean.update(|t| {
                for (v, s) in t.data_mut().iter_mut().zip(&stats) {
                    *v = (T::one() - m) * *v + m * s.0;
                }
            });
            self.running_var.update(|t| {
                for (v, s) in t.data_mut().iter_mut().zip(&stats) {
                    *v = (T::one() - m) * *v + m * s.1;
                }
            });
        })
    }
}

/// Group normalisation over `[B, C, ...]`, statistics per sample and group.
pub struct GroupNorm<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    groups: usize,
    eps: f64,
}
impl_params!(GroupNorm { weight, bias });

impl<T: Scalar> GroupNorm<T> {
    pub fn new(groups: usize, channels: usize) -> Self {
        assert!(groups > 0 && channels % groups == 0, "{channels} channels not divisible into {groups} groups");
        Self {
            weight: Param::new(Tensor::ones(&[channels])),
            bias: Param::new(Tensor::zeros(&[channels])),
            groups,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Var<T>) -> Result<Var<T>> {
        let shape = x.shape().to_vec();
        let c = self.weight.numel();
        if shape.len() < 2 || shape[1] != c {
            return Err(invalid("group_norm", format!("expected {c} channels, got {shape:?}")));
        }
        let rest = x.value().numel() / (shape[0] * self.groups);
        let y = x
            .reshape(&[shape[0], self.groups, rest])?
            .normalize_last(self.eps)?
            .reshape(&shape)?;
        affine(y, &self.weight, &self.bias, shape.len() - 2)
    }
}

/// Layer normalisation over the last axis.
pub struct LayerNorm<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    eps: f64,
}
impl_params!(LayerNorm { weight, bias });

impl<T: Scalar> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            weight: Param::new(Tensor::ones(&[dim])),
            bias: Param::new(Tensor::zeros(&[dim])),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Var<T>) -> Result<Var<T>> {
        x.normalize_last(self.eps)?
            .mul(&self.weight.var())?
            .add(&self.bias.var())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_param_gradients;
    use crate::HasParams;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn norm_layers_have_correct_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let conv = Conv2d::<f64>::new(3, 4, 3, ConvOpts::same(3), true, &mut rng);
        let bn = BatchNorm::<f64>::new(4);
        let gn = GroupNorm::<f64>::new(2, 4);
        let ln = LayerNorm::<f64>::new(4);
        let lin = Linear::<f64>::new(4, 3, true, &mut rng);
        let x = Var::constant(trunc_normal(&[2, 3, 4, 4], 1.0, &mut rng));
        let target = Var::constant(trunc_normal(&[2, 4, 4, 3], 1.0, &mut rng));
        // Perturb affine params away from their identity init.
        for p in [&bn.weight, &gn.weight, &ln.weight] {
            p.set(trunc_normal(&[4], 1.0, &mut rng)).unwrap();
        }
        let loss = || {
            let y = conv.forward(&x)?;
            let y = bn.forward(&y, Mode::Train)?.gelu();
            let y = gn.forward(&y)?.permute(&[0, 2, 3, 1])?;
            let y = lin.forward(&ln.forward(&y)?)?;
            y.sub(&target)?.square().mean_all()
        };
        let params: Vec<&Param<f64>> = [conv.named_params(), bn.named_params(), gn.named_params(), ln.named_params(), lin.named_params()]
            .into_iter()
            .flatten()
            .filter(|(_, p)| p.is_trainable())
            .map(|(_, p)| p)
            .collect();
        let coords: Vec<(usize, usize)> = params
            .iter()
            .enumerate()
            .flat_map(|(i, p)| (0..p.numel().min(6)).map(move |j| (i, j)))
            .collect();
        let report = check_param_gradients(&params, &coords, 1e-6, 1e-8, loss).unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }

    #[test]
    fn batch_norm_eval_uses_running_stats() {
        let bn = BatchNorm::<f64>::new(2);
        let x = Var::constant(Tensor::from_fn(&[4, 2], |i| i as f64));
        for _ in 0..200 {
            bn.forward(&x, Mode::Train).unwrap();
        }
        // column means 3 and 4, unbiased variance 20/3
        let rm = bn.running_mean.value();
        assert!((rm.data()[0] - 3.0).abs() < 1e-6 && (rm.data()[1] - 4.0).abs() < 1e-6);
        let train = bn.forward(&x, Mode::Train).unwrap();
        let eval = bn.forward(&x, Mode::Eval).unwrap();
        let ratio = (20.0f64 / 3.0 / 5.0).sqrt();
        let t = train.value().data()[0];
        let e = eval.value().data()[0];
        assert!((t / e - ratio).abs() < 1e-4, "{t} {e}");
        assert_eq!(bn.count_parameters(), 4);
    }
}
