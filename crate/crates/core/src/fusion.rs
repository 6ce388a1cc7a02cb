//! Late fusion of per-branch class probabilities.

use latefuse_tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{ClassProbabilityMap, N_CLASSES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionMember {
    pub branch: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionSpec {
    pub members: Vec<FusionMember>,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_epsilon() -> f64 {
    1e-8
}

impl Default for FusionSpec {
    fn default() -> Self {
        Self::lf_dlm()
    }
}

impl FusionSpec {
    pub fn new(members: &[(&str, f64)]) -> Result<Self> {
        let spec = Self {
            members: members
                .iter()
                .map(|(b, w)| FusionMember {
                    branch: b.to_string(),
                    weight: *w,
                })
                .collect(),
            epsilon: default_epsilon(),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Aerial 0.7, temporal 0.3.
    pub fn lf_dlm() -> Self {
        Self::new(&[("aerial", 0.7), ("temporal", 0.3)]).expect("valid")
    }

    /// Two aerial models sharing the aerial mass, plus the temporal model.
    pub fn ensemble() -> Self {
        Self::new(&[("aerial", 0.35), ("aerial_2", 0.35), ("temporal", 0.3)]).expect("valid")
    }

    pub fn validate(&self) -> Result<()> {
        if self.members.is_empty() {
            return Err(Error::config("fusion needs at least one member"));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::config(format!("fusion epsilon {} must be in (0, 1)", self.epsilon)));
        }
        if let Some(m) = self.members.iter().find(|m| !(m.weight >= 0.0 && m.weight.is_finite())) {
            return Err(Error::config(format!("weight {} of '{}' must be nonnegative", m.weight, m.branch)));
        }
        let sum: f64 = self.weights().iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("fusion weights sum to {sum}, not 1")));
        }
        Ok(())
    }

    pub fn weights(&self) -> Vec<f64> {
        self.members.iter().map(|m| m.weight).collect()
    }
}

/// Weighted geometric mean over a class axis, renormalised per pixel.
///
/// Inputs share a shape whose third-from-last axis holds the classes, so both
/// `[13, H, W]` maps and `[B, 13, H, W]` batches work.
pub fn fuse_probs<T: Scalar>(maps: &[&Tensor<T>], spec: &FusionSpec) -> Result<Tensor<T>> {
    spec.validate()?;
    if maps.len() != spec.members.len() {
        return Err(Error::Shape(format!("{} maps for {} fusion members", maps.len(), spec.members.len())));
    }
    let shape = maps[0].shape();
    if shape.len() < 3 {
        return Err(Error::Shape(format!("probability maps need [.., C, H, W], got {shape:?}")));
    }
    if let Some(m) = maps.iter().find(|m| m.shape() != shape) {
        return Err(Error::Shape(format!("fusion inputs differ: {:?} vs {shape:?}", m.shape())));
    }
    let r = shape.len();
    let (c, hw) = (shape[r - 3], shape[r - 2] * shape[r - 1]);
    let lead = maps[0].numel() / (c * hw);
    let weights = spec.weights();
    let eps = spec.epsilon;
    let mut out = vec![T::zero(); maps[0].numel()];
    let mut logs = vec![0.0f64; c];
    for b in 0..lead {
        for i in 0..hw {
            for (k, l) in logs.iter_mut().enumerate() {
                let idx = (b * c + k) * hw + i;
                *l = maps
                    .iter()
                    .zip(&weights)
                    .map(|(m, w)| w * m.data()[idx].as_f64().max(eps).ln())
                    .sum();
            }
            let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = logs.iter().map(|l| (l - top).exp()).sum();
            for (k, l) in logs.iter().enumerate() {
                out[(b * c + k) * hw + i] = T::of((l - top).exp() / total);
            }
        }
    }
    Ok(Tensor::new(shape, out)?)
}

pub fn fuse<T: Scalar>(maps: &[&ClassProbabilityMap<T>], spec: &FusionSpec) -> Result<ClassProbabilityMap<T>> {
    let tensors: Vec<&Tensor<T>> = maps.iter().map(|m| m.probs()).collect();
    ClassProbabilityMap::new(fuse_probs(&tensors, spec)?)
}

/// Three-member fusion of two aerial models and the temporal model.
pub fn ensemble_lfdlm<T: Scalar>(
    aerial_1: &ClassProbabilityMap<T>,
    aerial_2: &ClassProbabilityMap<T>,
    temporal: &ClassProbabilityMap<T>,
    weights: [f64; 3],
) -> Result<ClassProbabilityMap<T>> {
    let spec = FusionSpec::new(&[("aerial", weights[0]), ("aerial_2", weights[1]), ("temporal", weights[2])])?;
    fuse(&[aerial_1, aerial_2, temporal], &spec)
}

/// Softmax over the class axis of `[B, 13, H, W]` logits.
pub fn softmax_classes<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let s = logits.shape();
    if s.len() != 4 || s[1] != N_CLASSES {
        return Err(Error::Shape(format!("expected [B, 13, H, W] logits, got {s:?}")));
    }
    let mut t = logits.permute(&[0, 2, 3, 1])?;
    for row in t.data_mut().chunks_mut(N_CLASSES) {
        latefuse_tensor::softmax_row(row);
    }
    Ok(t.permute(&[0, 3, 1, 2])?)
}

/// Splits a `[B, 13, H, W]` tensor into per-sample maps.
pub fn split_batch<T: Scalar>(probs: &Tensor<T>) -> Result<Vec<ClassProbabilityMap<T>>> {
    (0..probs.dim(0))
        .map(|b| {
            let t = probs.narrow(0, b, 1)?;
            let shape = t.shape()[1..].to_vec();
            ClassProbabilityMap::new(t.reshape(&shape)?)
        })
        .collect()
}
