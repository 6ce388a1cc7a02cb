use latefuse_tensor::nn::{BatchNorm, Conv2d, LayerNorm, Linear, Mode};
use latefuse_tensor::{impl_params, ConvOpts, Result, Scalar, Var};
use rand::Rng;

use super::AerialBranchConfig;
use crate::layers::{
    attention, global_avg, grid_partition, grid_reverse, merge_heads, silu, split_qkv, to_channels_first, to_channels_last, window_partition,
    window_reverse, RelPosBias,
};

pub struct Stem<T> {
    pub conv1: Conv2d<T>,
    pub norm1: BatchNorm<T>,
    pub conv2: Conv2d<T>,
}
impl_params!(Stem { conv1, norm1, conv2 });

impl<T: Scalar> Stem<T> {
    fn new(cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        Self {
            conv1: Conv2d::new(cin, cout, 3, ConvOpts::same(3).stride(2), true, rng),
            norm1: BatchNorm::new(cout),
            conv2: Conv2d::new(cout, cout, 3, ConvOpts::same(3), true, rng),
        }
    }

    fn forward(&self, x: &Var<T>, mode: Mode) -> Result<Var<T>> {
        let y = self.norm1.forward(&self.conv1.forward(x)?, mode)?.gelu();
        self.conv2.forward(&y)
    }
}

/// Inverted-bottleneck conv block with squeeze-excitation.
pub struct MbConv<T> {
    pub pre_norm: BatchNorm<T>,
    pub conv1: Conv2d<T>,
    pub norm1: BatchNorm<T>,
    pub conv2: Conv2d<T>,
    pub norm2: BatchNorm<T>,
    pub se_reduce: Conv2d<T>,
    pub se_expand: Conv2d<T>,
    pub conv3: Conv2d<T>,
    pub shortcut: Option<Conv2d<T>>,
    stride: usize,
}
impl_params!(MbConv { pre_norm, conv1, norm1, conv2, norm2, se_reduce, se_expand, conv3, shortcut });

impl<T: Scalar> MbConv<T> {
    fn new(cin: usize, cout: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let mid = 4 * cout;
        let rd = (cout / 4).max(1);
        let one = ConvOpts::default();
        Self {
            pre_norm: BatchNorm::new(cin),
            conv1: Conv2d::new(cin, mid, 1, one, false, rng),
            norm1: BatchNorm::new(mid),
            conv2: Conv2d::new(mid, mid, 3, ConvOpts::same(3).stride(stride).groups(mid), false, rng),
            norm2: BatchNorm::new(mid),
            se_reduce: Conv2d::new(mid, rd, 1, one, true, rng),
            se_expand: Conv2d::new(rd, mid, 1, one, true, rng),
            conv3: Conv2d::new(mid, cout, 1, one, true, rng),
            shortcut: (cin != cout).then(|| Conv2d::new(cin, cout, 1, one, true, rng)),
            stride,
        }
    }

    fn forward(&self, x: &Var<T>, mode: Mode) -> Result<Var<T>> {
        let mut short = if self.stride > 1 { x.avg_pool(self.stride)? } else { x.clone() };
        if let Some(proj) = &self.shortcut {
            short = proj.forward(&short)?;
        }
        let y = self.pre_norm.forward(x, mode)?;
        let y = self.norm1.forward(&self.conv1.forward(&y)?, mode)?.gelu();
        let y = self.norm2.forward(&self.conv2.forward(&y)?, mode)?.gelu();
        let s = silu(&self.se_reduce.forward(&global_avg(&y)?)?)?;
        let y = y.mul(&self.se_expand.forward(&s)?.sigmoid())?;
        self.conv3.forward(&y)?.add(&short)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Partition {
    Block,
    Grid,
}

/// Pre-norm transformer layer over block or grid partitions, channels-last.
pub struct PartitionAttention<T> {
    pub norm1: LayerNorm<T>,
    pub qkv: Linear<T>,
    pub proj: Linear<T>,
    pub rel_pos: RelPosBias<T>,
    pub norm2: LayerNorm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
    kind: Partition,
    window: usize,
    heads: usize,
}
impl_params!(PartitionAttention { norm1, qkv, proj, rel_pos, norm2, fc1, fc2 });

impl<T: Scalar> PartitionAttention<T> {
    fn new(dim: usize, heads: usize, window: usize, kind: Partition, rng: &mut impl Rng) -> Self {
        Self {
            norm1: LayerNorm::new(dim),
            qkv: Linear::new(dim, 3 * dim, true, rng),
            proj: Linear::new(dim, dim, true, rng),
            rel_pos: RelPosBias::new(window, heads, rng),
            norm2: LayerNorm::new(dim),
            fc1: Linear::new(dim, 4 * dim, true, rng),
            fc2: Linear::new(4 * dim, dim, true, rng),
            kind,
            window,
            heads,
        }
    }

    fn attend(&self, x: &Var<T>) -> Result<Var<T>> {
        let (b, h, w) = (x.dim(0), x.dim(1), x.dim(2));
        let p = self.window.min(h);
        let parts = match self.kind {
            Partition::Block => window_partition(x, p)?,
            Partition::Grid => grid_partition(x, p)?,
        };
        let [q, k, v] = split_qkv(&self.qkv.forward(&parts)?, self.heads)?;
        let bias = self.rel_pos.forward(p)?;
        let out = self.proj.forward(&merge_heads(&attention(&q, &k, &v, Some(&bias))?)?)?;
        match self.kind {
            Partition::Block => window_reverse(&out, p, b, h, w),
            Partition::Grid => grid_reverse(&out, p, b, h, w),
        }
    }

    fn forward(&self, x: &Var<T>) -> Result<Var<T>> {
        let x = x.add(&self.attend(&self.norm1.forward(x)?)?)?;
        let m = self.fc2.forward(&self.fc1.forward(&self.norm2.forward(&x)?)?.gelu())?;
        x.add(&m)
    }
}

pub struct MaxVitBlock<T> {
    pub conv: MbConv<T>,
    pub block_attn: PartitionAttention<T>,
    pub grid_attn: PartitionAttention<T>,
}
impl_params!(MaxVitBlock { conv, block_attn, grid_attn });

impl<T: Scalar> MaxVitBlock<T> {
    fn forward(&self, x: &Var<T>, mode: Mode) -> Result<Var<T>> {
        let y = to_channels_last(&self.conv.forward(x, mode)?)?;
        let y = self.grid_attn.forward(&self.block_attn.forward(&y)?)?;
        to_channels_first(&y)
    }
}

pub struct MaxVitEncoder<T> {
    pub stem: Stem<T>,
    pub stages: Vec<Vec<MaxVitBlock<T>>>,
}
impl_params!(MaxVitEncoder { stem, stages });

impl<T: Scalar> MaxVitEncoder<T> {
    pub fn new(cfg: &AerialBranchConfig, rng: &mut impl Rng) -> Self {
        let stem = Stem::new(cfg.in_channels, cfg.stem_channels, rng);
        let mut cin = cfg.stem_channels;
        let mut stages = Vec::new();
        for (&cout, &depth) in cfg.stage_channels.iter().zip(&cfg.blocks_per_stage) {
            let heads = (cout / cfg.head_dim).max(1);
            let blocks = (0..depth)
                .map(|i| {
                    let (din, stride) = if i == 0 { (cin, 2) } else { (cout, 1) };
                    MaxVitBlock {
                        conv: MbConv::new(din, cout, stride, rng),
                        block_attn: PartitionAttention::new(cout, heads, cfg.attention_window, Partition::Block, rng),
                        grid_attn: PartitionAttention::new(cout, heads, cfg.attention_window, Partition::Grid, rng),
                    }
                })
                .collect();
            stages.push(blocks);
            cin = cout;
        }
        Self { stem, stages }
    }

    /// Feature maps after each stage, at 1/4, 1/8, 1/16 and 1/32 of the input.
    pub fn forward(&self, x: &Var<T>, mode: Mode) -> Result<Vec<Var<T>>> {
        let mut y = self.stem.forward(x, mode)?;
        let mut maps = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            for block in stage {
                y = block.forward(&y, mode)?;
            }
            maps.push(y.clone());
        }
        Ok(maps)
    }
}
