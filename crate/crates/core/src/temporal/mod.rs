//! Satellite time-series network: shared per-frame encoder, attention-based
//! temporal collapse, convolutional decoder.

mod ltae;
mod utae;

use latefuse_tensor::nn::Mode;
use latefuse_tensor::{impl_params, ConvOpts, PadMode, Scalar, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use ltae::{aggregate, mask_bias, masked_group_norm, positional_encoding, Ltae, LtaeOutput};
pub use utae::{ConvLayer, DownBlock, Head, Norm, NormKind, UpBlock};

use crate::error::{Error, Result};
use crate::types::{LabelMask, ScaleProfile, N_CLASSES, SITS_BANDS};

/// Resolution at which a standalone temporal branch is supervised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Supervision {
    /// Aligned logits against the full aerial-resolution mask.
    #[default]
    Aerial,
    /// Center-cropped logits against a majority-downsampled mask.
    Crop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TemporalBranchConfig {
    pub widths: Vec<usize>,
    pub n_heads: usize,
    pub d_k: usize,
    pub d_model: usize,
    pub out_conv: Vec<usize>,
    pub group_norm_groups: usize,
    pub positional_period: f64,
    pub n_classes: usize,
    pub pad_value: f64,
    pub supervision: Supervision,
}

impl Default for TemporalBranchConfig {
    fn default() -> Self {
        Self {
            widths: vec![64, 64, 128, 128],
            n_heads: 16,
            d_k: 4,
            d_model: 256,
            out_conv: vec![32, N_CLASSES],
            group_norm_groups: 4,
            positional_period: 1000.0,
            n_classes: N_CLASSES,
            pad_value: 0.0,
            supervision: Supervision::Aerial,
        }
    }
}

impl TemporalBranchConfig {
    pub fn toy() -> Self {
        Self {
            widths: vec![32, 32, 64],
            d_model: 128,
            ..Self::default()
        }
    }

    pub fn validate(&self, sits_size: usize) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if self.widths.is_empty() || self.widths.contains(&0) {
            return fail("widths must be non-empty and positive".into());
        }
        if self.n_classes != N_CLASSES || self.out_conv.last() != Some(&N_CLASSES) {
            return fail(format!("the output head must end in {N_CLASSES} classes"));
        }
        if self.pad_value != 0.0 {
            return fail("padded frames must be filled with 0".into());
        }
        if self.n_heads == 0 || self.d_k == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!("d_model {} not divisible by {} heads", self.d_model, self.n_heads));
        }
        if let Some(w) = self.widths.iter().find(|&&w| w % self.n_heads != 0 || w % self.group_norm_groups != 0) {
            return fail(format!("width {w} not divisible by {} heads and {} groups", self.n_heads, self.group_norm_groups));
        }
        let step = 1 << (self.widths.len() - 1);
        if sits_size == 0 || sits_size % step != 0 || sits_size / step < 2 {
            return fail(format!("sits size {sits_size} must be divisible by {step} with at least 2x2 at the deepest level"));
        }
        Ok(())
    }
}

pub struct TemporalOutput<T: Scalar> {
    /// `[B, 13, h, w]`
    pub logits: Var<T>,
    /// `[heads, B, T, h_L, w_L]` at the lowest resolution.
    pub attention: Var<T>,
}

pub struct TemporalBranch<T> {
    pub in_conv: Vec<ConvLayer<T>>,
    pub down: Vec<DownBlock<T>>,
    pub ltae: Ltae<T>,
    pub up: Vec<UpBlock<T>>,
    pub head: Head<T>,
    config: TemporalBranchConfig,
    sits_size: usize,
}
impl_params!(TemporalBranch { in_conv, down, ltae, up, head });

impl<T: Scalar> TemporalBranch<T> {
    pub fn new(config: TemporalBranchConfig, sits_size: usize, rng: &mut impl Rng) -> Result<Self> {
        config.validate(sits_size)?;
        let w = &config.widths;
        let norm = NormKind::Group(config.group_norm_groups);
        let same = ConvOpts::same(3).pad_mode(PadMode::Reflect);
        let in_conv = vec![
            ConvLayer::new(SITS_BANDS, w[0], 3, same, norm, rng),
            ConvLayer::new(w[0], w[0], 3, same, norm, rng),
        ];
        let down = w.windows(2).map(|p| DownBlock::new(p[0], p[1], norm, rng)).collect();
        let last = *w.last().expect("validated");
        let ltae = Ltae::new(last, config.d_model, config.n_heads, config.d_k, config.positional_period, rng);
        let up = (1..w.len()).rev().map(|i| UpBlock::new(w[i], w[i - 1], w[i - 1], rng)).collect();
        let head = Head::new(w[0], &config.out_conv, rng);
        Ok(Self {
            in_conv,
            down,
            ltae,
            up,
            head,
            config,
            sits_size,
        })
    }

    pub fn config(&self) -> &TemporalBranchConfig {
        &self.config
    }

    pub fn sits_size(&self) -> usize {
        self.sits_size
    }

    fn check(&self, frames: &Var<T>, days: &[u16], validity: &[bool]) -> Result<()> {
        let s = frames.shape();
        if s.len() != 5 || s[2] != SITS_BANDS || s[3] != self.sits_size || s[4] != self.sits_size {
            return Err(Error::Shape(format!(
                "temporal branch expects [B, T, {SITS_BANDS}, {n}, {n}], got {s:?}",
                n = self.sits_size
            )));
        }
        let n = s[0] * s[1];
        if days.len() != n || validity.len() != n {
            return Err(Error::Shape(format!("{} dates and {} flags for {n} frames", days.len(), validity.len())));
        }
        if let Some(d) = days.iter().find(|&&d| !(1..=366).contains(&d)) {
            return Err(Error::Shape(format!("day of year {d} out of range")));
        }
        if let Some(b) = (0..s[0]).find(|&b| !validity[b * s[1]..(b + 1) * s[1]].contains(&true)) {
            return Err(Error::Shape(format!("series {b} has no valid frames")));
        }
        Ok(())
    }

    /// Per-level embeddings `[B, T, C_l, h_l, w_l]`, every frame through the
    /// same weights.
    pub fn encode_frames(&self, frames: &Var<T>, mode: Mode) -> Result<Vec<Var<T>>> {
        let (b, t) = (frames.dim(0), frames.dim(1));
        let mut y = frames.reshape(&[b * t, SITS_BANDS, self.sits_size, self.sits_size])?;
        for l in &self.in_conv {
            y = l.forward(&y, mode)?;
        }
        let mut levels = vec![y.clone()];
        for d in &self.down {
            y = d.forward(&y, mode)?;
            levels.push(y.clone());
        }
        Ok(levels
            .into_iter()
            .map(|l| {
                let s = l.shape().to_vec();
                l.reshape(&[b, t, s[1], s[2], s[3]])
            })
            .collect::<latefuse_tensor::Result<_>>()?)
    }

    /// Collapsed maps per level (finest first) and the attention that made them.
    pub fn collapse_temporal(&self, levels: &[Var<T>], days: &[u16], validity: &[bool], mode: Mode) -> Result<(Vec<Var<T>>, Var<T>)> {
        let deepest = levels.last().ok_or_else(|| Error::Empty("no encoder levels".into()))?;
        let out = self.ltae.forward(deepest, days, validity, mode)?;
        let mut maps = levels[..levels.len() - 1]
            .iter()
            .map(|l| aggregate(l, &out.attention, validity))
            .collect::<latefuse_tensor::Result<Vec<_>>>()?;
        maps.push(out.map);
        Ok((maps, out.attention))
    }

    pub fn decode_to_logits(&self, maps: &[Var<T>], mode: Mode) -> Result<Var<T>> {
        if maps.len() != self.config.widths.len() {
            return Err(Error::Shape(format!("{} maps for {} levels", maps.len(), self.config.widths.len())));
        }
        let mut y = maps[maps.len() - 1].clone();
        for (i, up) in self.up.iter().enumerate() {
            y = up.forward(&y, &maps[maps.len() - 2 - i], mode)?;
        }
        Ok(self.head.forward(&y, mode)?)
    }

    pub fn forward(&self, frames: &Var<T>, days: &[u16], validity: &[bool], mode: Mode) -> Result<TemporalOutput<T>> {
        self.check(frames, days, validity)?;
        let levels = self.encode_frames(frames, mode)?;
        let (maps, attention) = self.collapse_temporal(&levels, days, validity, mode)?;
        Ok(TemporalOutput {
            logits: self.decode_to_logits(&maps, mode)?,
            attention,
        })
    }
}

/// Center-crops the footprint of the aerial patch and upsamples it
/// bilinearly to aerial resolution. Probability maps are renormalised.
pub fn align_to_aerial<T: Scalar>(x: &Var<T>, profile: &ScaleProfile, probabilities: bool) -> Result<Var<T>> {
    let s = x.shape();
    if s.len() != 4 || s[2] != profile.sits_size() || s[3] != profile.sits_size() {
        return Err(Error::Shape(format!("expected [B, C, {n}, {n}], got {s:?}", n = profile.sits_size())));
    }
    let (off, crop, a) = (profile.crop_offset(), profile.center_crop(), profile.aerial_size());
    let y = x.narrow(2, off, crop)?.narrow(3, off, crop)?.resize_bilinear(a, a)?;
    if !probabilities {
        return Ok(y);
    }
    Ok(y.div(&y.sum_axis(1, true)?)?)
}

/// Majority label over `factor × factor` blocks; ties go to the lower class.
pub fn downsample_mask(mask: &LabelMask, factor: usize) -> Result<LabelMask> {
    if factor == 0 || mask.height() % factor != 0 || mask.width() % factor != 0 {
        return Err(Error::Shape(format!("{}x{} mask not divisible by {factor}", mask.height(), mask.width())));
    }
    let (h, w) = (mask.height() / factor, mask.width() / factor);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let mut counts = [0usize; 256];
            for dy in 0..factor {
                for dx in 0..factor {
                    counts[mask.get(y * factor + dy, x * factor + dx) as usize] += 1;
                }
            }
            let best = (0..256).max_by_key(|&c| (counts[c], std::cmp::Reverse(c))).unwrap_or(0);
            out.push(best as u8);
        }
    }
    LabelMask::new(h, w, out)
}

#[cfg(test)]
mod tests;
