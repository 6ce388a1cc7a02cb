//! Either branch behind one interface for training, prediction and timing.

use std::fmt;
use std::str::FromStr;

use latefuse_tensor::{no_grad, HasParams, Mode, Param, Scalar, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::aerial::{AerialBranch, AerialBranchConfig};
use crate::dataset::Batch;
use crate::error::{Error, Result};
use crate::fusion::softmax_classes;
use crate::temporal::{align_to_aerial, downsample_mask, Supervision, TemporalBranch, TemporalBranchConfig};
use crate::types::{LabelMask, ScaleProfile};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Aerial,
    Temporal,
}

impl Branch {
    pub const ALL: [Branch; 2] = [Branch::Aerial, Branch::Temporal];

    pub fn as_str(self) -> &'static str {
        match self {
            Branch::Aerial => "aerial",
            Branch::Temporal => "temporal",
        }
    }
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Branch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "aerial" => Ok(Branch::Aerial),
            "temporal" => Ok(Branch::Temporal),
            other => Err(Error::config(format!("unknown branch '{other}', expected aerial or temporal"))),
        }
    }
}

pub enum SegmentationModel<T: Scalar> {
    Aerial(AerialBranch<T>),
    Temporal { net: TemporalBranch<T>, profile: ScaleProfile },
}

impl<T: Scalar> HasParams<T> for SegmentationModel<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Param<T>)) {
        match self {
            SegmentationModel::Aerial(m) => m.visit(prefix, f),
            SegmentationModel::Temporal { net, .. } => net.visit(prefix, f),
        }
    }
}

impl<T: Scalar> SegmentationModel<T> {
    pub fn build(
        branch: Branch,
        aerial: &AerialBranchConfig,
        temporal: &TemporalBranchConfig,
        profile: &ScaleProfile,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(match branch {
            Branch::Aerial => SegmentationModel::Aerial(AerialBranch::new(aerial.clone(), profile.aerial_size(), rng)?),
            Branch::Temporal => SegmentationModel::Temporal {
                net: TemporalBranch::new(temporal.clone(), profile.sits_size(), rng)?,
                profile: *profile,
            },
        })
    }

    pub fn branch(&self) -> Branch {
        match self {
            SegmentationModel::Aerial(_) => Branch::Aerial,
            SegmentationModel::Temporal { .. } => Branch::Temporal,
        }
    }

    /// Logits at the resolution the loss is computed at.
    pub fn supervised_logits(&self, batch: &Batch<T>, mode: Mode) -> Result<Var<T>> {
        match self {
            SegmentationModel::Aerial(m) => m.forward(&Var::constant(batch.aerial.clone()), mode),
            SegmentationModel::Temporal { net, profile } => {
                let logits = net.forward(&Var::constant(batch.frames.clone()), &batch.day_of_year, &batch.validity, mode)?.logits;
                match net.config().supervision {
                    Supervision::Aerial => align_to_aerial(&logits, profile, false),
                    Supervision::Crop => {
                        let (off, crop) = (profile.crop_offset(), profile.center_crop());
                        Ok(logits.narrow(2, off, crop)?.narrow(3, off, crop)?)
                    }
                }
            }
        }
    }

    /// Label masks matching [`Self::supervised_logits`].
    pub fn targets(&self, batch: &Batch<T>) -> Result<Vec<LabelMask>> {
        let labels = batch.labels.clone().ok_or_else(|| Error::Missing("batch has no label masks".into()))?;
        match self {
            SegmentationModel::Temporal { net, profile } if net.config().supervision == Supervision::Crop => {
                let factor = profile.aerial_size() / profile.center_crop();
                labels.iter().map(|m| downsample_mask(m, factor)).collect()
            }
            _ => Ok(labels),
        }
    }

    /// Class probabilities `[B, 13, a, a]` on the aerial grid.
    pub fn probabilities(&self, batch: &Batch<T>) -> Result<Tensor<T>> {
        no_grad(|| match self {
            SegmentationModel::Aerial(m) => Ok(softmax_classes(m.forward(&Var::constant(batch.aerial.clone()), Mode::Eval)?.value())?),
            SegmentationModel::Temporal { net, profile } => {
                let logits = net.forward(&Var::constant(batch.frames.clone()), &batch.day_of_year, &batch.validity, Mode::Eval)?.logits;
                let probs = Var::constant(softmax_classes(logits.value())?);
                Ok(align_to_aerial(&probs, profile, true)?.to_tensor())
            }
        })
    }
}
