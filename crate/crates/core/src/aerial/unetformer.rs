use latefuse_tensor::nn::{BatchNorm, Conv2d, Mode};
use latefuse_tensor::{impl_params, ConvOpts, PadMode, Param, Result, Scalar, Tensor, Var};
use rand::Rng;

use super::AerialBranchConfig;
use crate::layers::{attention, box_kernel, global_avg, Act, ConvBn, RelPosBias, SeparableConvBn};

fn conv_bn<T: Scalar>(cin: usize, cout: usize, k: usize, act: Act, rng: &mut impl Rng) -> ConvBn<T> {
    ConvBn::new(cin, cout, k, ConvOpts::same(k), false, act, rng)
}

/// Windowed self-attention with strip pooling, summed with a conv path.
pub struct GlobalLocalAttention<T> {
    pub qkv: Conv2d<T>,
    pub rel_pos: RelPosBias<T>,
    pub local1: ConvBn<T>,
    pub local2: ConvBn<T>,
    pub proj: SeparableConvBn<T>,
    heads: usize,
    window: usize,
    global_path: bool,
}
impl_params!(GlobalLocalAttention { qkv, rel_pos, local1, local2, proj });

impl<T: Scalar> GlobalLocalAttention<T> {
    fn new(dim: usize, heads: usize, window: usize, global_path: bool, rng: &mut impl Rng) -> Self {
        Self {
            qkv: Conv2d::new(dim, 3 * dim, 1, ConvOpts::default(), false, rng),
            rel_pos: RelPosBias::new(window, heads, rng),
            local1: conv_bn(dim, dim, 3, Act::None, rng),
            local2: conv_bn(dim, dim, 1, Act::None, rng),
            proj: SeparableConvBn::new(dim, dim, window, rng),
            heads,
            window,
            global_path,
        }
    }

    fn global(&self, x: &Var<T>, ws: usize) -> Result<Var<T>> {
        let (b, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (nh, nw, d) = (h / ws, w / ws, c / self.heads);
        let qkv = self
            .qkv
            .forward(x)?
            .reshape(&[b, 3, self.heads, d, nh, ws, nw, ws])?
            .permute(&[1, 0, 4, 6, 2, 5, 7, 3])?
            .reshape(&[3, b * nh * nw, self.heads, ws * ws, d])?;
        let part = |i| qkv.narrow(0, i, 1)?.reshape(&[b * nh * nw, self.heads, ws * ws, d]);
        let bias = self.rel_pos.forward(ws)?;
        let attn = attention(&part(0)?, &part(1)?, &part(2)?, Some(&bias))?
            .reshape(&[b, nh, nw, self.heads, ws, ws, d])?
            .permute(&[0, 3, 6, 1, 4, 2, 5])?
            .reshape(&[b, c, h, w])?;
        let half = ws / 2 - 1;
        let ax = attn
            .pad2d([0, 1, 0, 0], PadMode::Reflect)?
            .pad2d([half, half, 0, 0], PadMode::Zeros)?
            .conv2d(&box_kernel(c, ws, 1), ConvOpts::default().groups(c))?;
        let ay = attn
            .pad2d([0, 0, 0, 1], PadMode::Reflect)?
            .pad2d([0, 0, half, half], PadMode::Zeros)?
            .conv2d(&box_kernel(c, 1, ws), ConvOpts::default().groups(c))?;
        ax.add(&ay)
    }

    fn forward(&self, x: &Var<T>, mode: Mode) -> Result<Var<T>> {
        let (h, w) = (x.dim(2), x.dim(3));
        let ws = self.window.min(h);
        let mut out = self.local2.forward(x, mode)?.add(&self.local1.forward(x, mode)?)?;
        if self.global_path {
            out = self.global(x, ws)?.add(&out)?;
        }
        let out = self.proj.forward(&out.pad2d([0, 1, 0, 1], PadMode::Reflect)?, mode)?;
        out.narrow(2, 0, h)?.narrow(3, 0, w)
    }
}

pub struct Mlp<T> {
    pub fc1: Conv2d<T>,
    pub fc2: Conv2d<T>,
}
impl_params!(Mlp { fc1, fc2 });

impl<T: Scalar> Mlp<T> {
    fn new(dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            fc1: Conv2d::new(dim, hidden, 1, ConvOpts::default(), true, rng),
            fc2: Conv2d::new(hidden, dim, 1, ConvOpts::default(), true, rng),
        }
    }

    fn forward(&self, x: &Var<T>) -> Result<Var<T>> {
        self.fc2.forward(&self.fc1.forward(x)?.relu6())
    }
}

/// Global-local transformer block.
pub struct Gltb<T> {
    pub norm1: BatchNorm<T>,
    pub attn: GlobalLocalAttention<T>,
    pub norm2: BatchNorm<T>,
    pub mlp: Mlp<T>,
}
impl_params!(Gltb { norm1, attn, norm2, mlp });

impl<T: Scalar> Gltb<T> {
    fn new(dim: usize, heads: usize, window: usize, global_path: bool, rng: &mut impl Rng) -> Self {
        Self {
            norm1: BatchNorm::new(dim),
            attn: GlobalLocalAttention::new(dim, heads, window, global_path, rng),
            norm2: BatchNorm::new(dim),
            mlp: Mlp::new(dim, 4 * dim, rng),
        }
    }

    fn forward(&self, x: &Var<T>, mode: Mode) -> Result<Var<T>> {
        let x = x.add(&self.attn.forward(&self.norm1.forward(x, mode)?, mode)?)?;
        x.add(&self.mlp.forward(&self.norm2.forward(&x, mode)?)?)
    }
}

/// Upsamples the decoder map and blends in a skip map with learned weights.
pub struct WeightedFuse<T> {
    pub pre_conv: Conv2d<T>,
    pub weights: Param<T>,
}
impl_params!(WeightedFuse { pre_conv, weights });

impl<T: Scalar> WeightedFuse<T> {
    fn new(skip: usize, dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            pre_conv: Conv2d::new(skip, dim, 1, ConvOpts::default(), false, rng),
            weights: Param::new(Tensor::ones(&[2])),
        }
    }

    fn forward(&self, x: &Var<T>, skip: &Var<T>) -> Result<Var<T>> {
        let x = x.resize_bilinear(2 * x.dim(2), 2 * x.dim(3))?;
        let w = self.weights.var().relu();
        let f = w.div(&w.sum_all()?.affine(1.0, 1e-8))?;
        self.pre_conv
            .forward(skip)?
            .mul(&f.narrow(0, 0, 1)?)?
            .add(&x.mul(&f.narrow(0, 1, 1)?)?)
    }
}

pub struct FuseBlock<T> {
    pub fuse: WeightedFuse<T>,
    pub post_conv: ConvBn<T>,
}
impl_params!(FuseBlock { fuse, post_conv });

impl<T: Scalar> FuseBlock<T> {
    fn new(skip: usize, dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            fuse: WeightedFuse::new(skip, dim, rng),
            post_conv: conv_bn(dim, dim, 3, Act::Relu6, rng),
        }
    }

    fn forward(&self, x: &Var<T>, skip: &Var<T>, mode: Mode) -> Result<Var<T>> {
        self.post_conv.forward(&self.fuse.forward(x, skip)?, mode)
    }
}

/// Last fusion stage with spatial and channel attention refinement.
pub struct RefinementHead<T> {
    pub fuse: FuseBlock<T>,
    pub pa: Conv2d<T>,
    pub ca_reduce: Conv2d<T>,
    pub ca_expand: Conv2d<T>,
    pub shortcut: ConvBn<T>,
    pub proj: SeparableConvBn<T>,
}
impl_params!(RefinementHead { fuse, pa, ca_reduce, ca_expand, shortcut, proj });

impl<T: Scalar> RefinementHead<T> {
    fn new(skip: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let rd = (dim / 16).max(1);
        Self {
            fuse: FuseBlock::new(skip, dim, rng),
            pa: Conv2d::new(dim, dim, 3, ConvOpts::same(3).groups(dim), true, rng),
            ca_reduce: Conv2d::new(dim, rd, 1, ConvOpts::default(), false, rng),
            ca_expand: Conv2d::new(rd, dim, 1, ConvOpts::default(), false, rng),
            shortcut: conv_bn(dim, dim, 1, Act::None, rng),
            proj: SeparableConvBn::new(dim, dim, 3, rng),
        }
    }

    fn forward(&self, x: &Var<T>, skip: &Var<T>, mode: Mode) -> Result<Var<T>> {
        let x = self.fuse.forward(x, skip, mode)?;
        let short = self.shortcut.forward(&x, mode)?;
        let pa = self.pa.forward(&x)?.sigmoid().mul(&x)?;
        let ca = self.ca_reduce.forward(&global_avg(&x)?)?.relu6();
        let ca = self.ca_expand.forward(&ca)?.sigmoid().mul(&x)?;
        Ok(self.proj.forward(&pa.add(&ca)?, mode)?.add(&short)?.relu6())
    }
}

pub struct UNetFormerDecoder<T> {
    pub pre_conv: ConvBn<T>,
    pub b4: Gltb<T>,
    pub p3: FuseBlock<T>,
    pub b3: Gltb<T>,
    pub p2: FuseBlock<T>,
    pub b2: Gltb<T>,
    pub p1: RefinementHead<T>,
    pub head: ConvBn<T>,
    pub classifier: Conv2d<T>,
}
impl_params!(UNetFormerDecoder { pre_conv, b4, p3, b3, p2, b2, p1, head, classifier });

impl<T: Scalar> UNetFormerDecoder<T> {
    pub fn new(cfg: &AerialBranchConfig, rng: &mut impl Rng) -> Self {
        let (d, e) = (cfg.decoder_channels, &cfg.stage_channels);
        let block = |rng: &mut _| Gltb::new(d, cfg.decoder_heads, cfg.decoder_window, cfg.global_path, rng);
        Self {
            pre_conv: conv_bn(e[3], d, 1, Act::None, rng),
            b4: block(rng),
            p3: FuseBlock::new(e[2], d, rng),
            b3: block(rng),
            p2: FuseBlock::new(e[1], d, rng),
            b2: block(rng),
            p1: RefinementHead::new(e[0], d, rng),
            head: conv_bn(d, d, 3, Act::Relu6, rng),
            classifier: Conv2d::new(d, cfg.n_classes, 1, ConvOpts::default(), false, rng),
        }
    }

    pub fn forward(&self, maps: &[Var<T>], out_size: usize, mode: Mode) -> Result<Var<T>> {
        let x = self.b4.forward(&self.pre_conv.forward(&maps[3], mode)?, mode)?;
        let x = self.b3.forward(&self.p3.forward(&x, &maps[2], mode)?, mode)?;
        let x = self.b2.forward(&self.p2.forward(&x, &maps[1], mode)?, mode)?;
        let x = self.p1.forward(&x, &maps[0], mode)?;
        let x = self.classifier.forward(&self.head.forward(&x, mode)?)?;
        x.resize_bilinear(out_size, out_size)
    }
}
