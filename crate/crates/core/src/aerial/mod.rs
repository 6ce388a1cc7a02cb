//! Aerial segmentation network: multi-axis attention encoder and
//! global-local transformer decoder.

mod maxvit;
mod unetformer;

use std::path::{Path, PathBuf};

use latefuse_tensor::nn::{kaiming, Mode};
use latefuse_tensor::{impl_params, read_tensors, HasParams, Scalar, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use maxvit::{MaxVitBlock, MaxVitEncoder, MbConv, Partition, PartitionAttention, Stem};
pub use unetformer::{FuseBlock, GlobalLocalAttention, Gltb, Mlp, RefinementHead, UNetFormerDecoder, WeightedFuse};

use crate::error::{Error, Result};
use crate::types::{AERIAL_CHANNELS, N_CLASSES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AerialBranchConfig {
    pub in_channels: usize,
    pub stem_channels: usize,
    pub stage_channels: [usize; 4],
    pub blocks_per_stage: [usize; 4],
    pub attention_window: usize,
    pub head_dim: usize,
    pub decoder_channels: usize,
    pub decoder_heads: usize,
    pub decoder_window: usize,
    pub n_classes: usize,
    pub global_path: bool,
    pub pretrained_weights_path: Option<PathBuf>,
}

impl Default for AerialBranchConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl AerialBranchConfig {
    pub fn full() -> Self {
        Self {
            in_channels: AERIAL_CHANNELS,
            stem_channels: 64,
            stage_channels: [64, 128, 256, 512],
            blocks_per_stage: [2, 2, 5, 2],
            attention_window: 8,
            head_dim: 32,
            decoder_channels: 64,
            decoder_heads: 8,
            decoder_window: 8,
            n_classes: N_CLASSES,
            global_path: true,
            pretrained_weights_path: None,
        }
    }

    pub fn toy() -> Self {
        Self {
            stem_channels: 32,
            stage_channels: [32, 64, 128, 256],
            blocks_per_stage: [1, 1, 1, 1],
            attention_window: 4,
            decoder_channels: 32,
            decoder_window: 4,
            ..Self::full()
        }
    }

    /// Checks the config against an input size.
    pub fn validate(&self, aerial_size: usize) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if self.n_classes != N_CLASSES {
            return fail(format!("n_classes must be {N_CLASSES}, got {}", self.n_classes));
        }
        if self.in_channels < 3 {
            return fail(format!("in_channels must be at least 3, got {}", self.in_channels));
        }
        if self.stage_channels.windows(2).any(|w| w[1] != 2 * w[0]) {
            return fail(format!("stage channels must double: {:?}", self.stage_channels));
        }
        if self.blocks_per_stage.contains(&0) {
            return fail("every stage needs at least one block".into());
        }
        if self.head_dim == 0 || self.stage_channels.iter().any(|c| c % self.head_dim != 0 && *c > self.head_dim) {
            return fail(format!("stage channels must be multiples of head_dim {}", self.head_dim));
        }
        if self.decoder_heads == 0 || self.decoder_channels % self.decoder_heads != 0 {
            return fail(format!("decoder_channels {} not divisible by {} heads", self.decoder_channels, self.decoder_heads));
        }
        if self.attention_window < 1 || self.decoder_window < 2 || self.decoder_window % 2 != 0 {
            return fail("attention windows must be positive and the decoder window even".into());
        }
        if aerial_size % 32 != 0 || aerial_size < 64 {
            return fail(format!("aerial size {aerial_size} must be a multiple of 32 and at least 64"));
        }
        for level in 2..=5 {
            let s = aerial_size >> level;
            let p = self.attention_window.min(s);
            let d = self.decoder_window.min(s);
            if s % p != 0 || s % d != 0 {
                return fail(format!("{s}x{s} feature map does not tile into windows of {p} and {d}"));
            }
        }
        Ok(())
    }
}

/// Stage outputs `[B, C_i, H / 2^(i+2), W / 2^(i+2)]`.
pub struct FeaturePyramid<T: Scalar> {
    pub maps: Vec<Var<T>>,
}

impl<T: Scalar> FeaturePyramid<T> {
    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.maps.iter().map(|m| m.shape().to_vec()).collect()
    }
}

pub struct AerialBranch<T> {
    pub encoder: MaxVitEncoder<T>,
    pub decoder: UNetFormerDecoder<T>,
    config: AerialBranchConfig,
    aerial_size: usize,
}
impl_params!(AerialBranch { encoder, decoder });

impl<T: Scalar> AerialBranch<T> {
    /// Builds a randomly initialised network, then loads pretrained weights if
    /// the config names a file.
    pub fn new(config: AerialBranchConfig, aerial_size: usize, rng: &mut impl Rng) -> Result<Self> {
        config.validate(aerial_size)?;
        let model = Self {
            encoder: MaxVitEncoder::new(&config, rng),
            decoder: UNetFormerDecoder::new(&config, rng),
            config,
            aerial_size,
        };
        if let Some(path) = model.config.pretrained_weights_path.clone() {
            model.load_pretrained(&path, rng)?;
        }
        Ok(model)
    }

    pub fn config(&self) -> &AerialBranchConfig {
        &self.config
    }

    pub fn aerial_size(&self) -> usize {
        self.aerial_size
    }

    fn check_input(&self, x: &Var<T>) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.config.in_channels || s[2] != self.aerial_size || s[3] != self.aerial_size {
            return Err(Error::Shape(format!(
                "aerial branch expects [B, {}, {n}, {n}], got {s:?}",
                self.config.in_channels,
                n = self.aerial_size
            )));
        }
        Ok(())
    }

    pub fn encode(&self, x: &Var<T>, mode: Mode) -> Result<FeaturePyramid<T>> {
        self.check_input(x)?;
        Ok(FeaturePyramid {
            maps: self.encoder.forward(x, mode)?,
        })
    }

    pub fn decode(&self, pyramid: &FeaturePyramid<T>, mode: Mode) -> Result<Var<T>> {
        let expected: Vec<usize> = self.config.stage_channels.to_vec();
        let got: Vec<usize> = pyramid.maps.iter().map(|m| m.dim(1)).collect();
        if got != expected {
            return Err(Error::Shape(format!("pyramid channels {got:?}, expected {expected:?}")));
        }
        Ok(self.decoder.forward(&pyramid.maps, self.aerial_size, mode)?)
    }

    /// Logits `[B, 13, H, W]`.
    pub fn forward(&self, x: &Var<T>, mode: Mode) -> Result<Var<T>> {
        self.decode(&self.encode(x, mode)?, mode)
    }

    /// Copies every tensor whose name and shape match; a 3-channel stem kernel
    /// is widened with [`adapt_input_layer`]. Returns how many were loaded.
    pub fn load_pretrained(&self, path: &Path, rng: &mut impl Rng) -> Result<usize> {
        let (tensors, _) = read_tensors::<T>(path)?;
        let params = self.named_params();
        let mut loaded = 0;
        for (name, p) in &params {
            let Some(t) = tensors.get(name) else { continue };
            let shape = p.shape();
            if t.shape() == shape.as_slice() {
                p.set(t.clone())?;
            } else if name == "encoder.stem.conv1.weight" && t.rank() == 4 && t.dim(1) == 3 && t.dim(0) == shape[0] {
                p.set(adapt_input_layer(t, shape[1], rng)?)?;
            } else {
                return Err(Error::data(path, format!("{name}: shape {:?} does not match {shape:?}", t.shape())));
            }
            loaded += 1;
        }
        if loaded == 0 {
            return Err(Error::data(path, "no matching tensors"));
        }
        Ok(loaded)
    }
}

/// Widens an RGB first-layer kernel `[C_out, 3, k, k]` to `target` input
/// channels. RGB slices are copied; the rest are freshly initialised.
pub fn adapt_input_layer<T: Scalar>(weights: &Tensor<T>, target: usize, rng: &mut impl Rng) -> Result<Tensor<T>> {
    let s = weights.shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(Error::Shape(format!("expected [C_out, 3, k, k] weights, got {s:?}")));
    }
    if target < 3 {
        return Err(Error::Shape(format!("cannot adapt 3 channels down to {target}")));
    }
    let (cout, kk) = (s[0], s[2] * s[3]);
    let fresh = kaiming::<T>(&[cout, target - 3, s[2], s[3]], target * kk, rng);
    let mut data = Vec::with_capacity(cout * target * kk);
    for o in 0..cout {
        data.extend_from_slice(&weights.data()[o * 3 * kk..(o + 1) * 3 * kk]);
        data.extend_from_slice(&fresh.data()[o * (target - 3) * kk..(o + 1) * (target - 3) * kk]);
    }
    Ok(Tensor::new(&[cout, target, s[2], s[3]], data)?)
}
