use std::path::Path;

use latefuse_tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{Error, Result};
use crate::types::{AerialPatch, SitsStack, AERIAL_CHANNELS, SITS_BANDS};

/// Per-channel mean and standard deviation for input standardisation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub aerial_mean: Vec<f64>,
    pub aerial_std: Vec<f64>,
    pub sits_mean: Vec<f64>,
    pub sits_std: Vec<f64>,
}

struct Moments {
    n: Vec<f64>,
    sum: Vec<f64>,
    sq: Vec<f64>,
}

impl Moments {
    fn new(c: usize) -> Self {
        Self {
            n: vec![0.0; c],
            sum: vec![0.0; c],
            sq: vec![0.0; c],
        }
    }

    fn add(&mut self, c: usize, values: impl Iterator<Item = f64>) {
        for v in values {
            self.n[c] += 1.0;
            self.sum[c] += v;
            self.sq[c] += v * v;
        }
    }

    fn finish(self) -> (Vec<f64>, Vec<f64>) {
        let mean: Vec<f64> = self.sum.iter().zip(&self.n).map(|(s, n)| s / n.max(1.0)).collect();
        let std = self
            .sq
            .iter()
            .zip(&self.n)
            .zip(&mean)
            .map(|((q, n), m)| (q / n.max(1.0) - m * m).max(0.0).sqrt().max(1e-6))
            .collect();
        (mean, std)
    }
}

impl ChannelStats {
    pub fn compute<T: Scalar>(samples: &[Sample<T>]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Empty("statistics need at least one sample".into()));
        }
        let mut a = Moments::new(AERIAL_CHANNELS);
        let mut s = Moments::new(SITS_BANDS);
        for x in samples {
            let hw = x.aerial.size() * x.aerial.size();
            for c in 0..AERIAL_CHANNELS {
                a.add(c, x.aerial.pixels.data()[c * hw..(c + 1) * hw].iter().map(|v| v.as_f64()));
            }
            let hw = x.sits.size() * x.sits.size();
            for (i, chunk) in x.sits.frames.data().chunks(hw).enumerate() {
                s.add(i % SITS_BANDS, chunk.iter().map(|v| v.as_f64()));
            }
        }
        let (aerial_mean, aerial_std) = a.finish();
        let (sits_mean, sits_std) = s.finish();
        Ok(Self {
            aerial_mean,
            aerial_std,
            sits_mean,
            sits_std,
        })
    }

    fn standardize<T: Scalar>(data: &[T], plane: usize, mean: &[f64], std: &[f64]) -> Vec<T> {
        data.chunks(plane)
            .enumerate()
            .flat_map(|(i, chunk)| {
                let c = i % mean.len();
                let (m, s) = (T::of(mean[c]), T::of(1.0 / std[c]));
                chunk.iter().map(move |&v| (v - m) * s)
            })
            .collect()
    }

    pub fn apply<T: Scalar>(&self, x: &Sample<T>) -> Result<Sample<T>> {
        let a = x.aerial.size();
        let s = x.sits.size();
        let aerial = Tensor::new(x.aerial.pixels.shape(), Self::standardize(x.aerial.pixels.data(), a * a, &self.aerial_mean, &self.aerial_std))?;
        let frames = Tensor::new(x.sits.frames.shape(), Self::standardize(x.sits.frames.data(), s * s, &self.sits_mean, &self.sits_std))?;
        Ok(Sample {
            aerial: AerialPatch::new(aerial, &x.aerial.patch_id)?,
            sits: SitsStack::new(frames, x.sits.dates.clone(), x.sits.cloud_snow_masks.clone(), &x.sits.patch_id)?,
            mask: x.mask.clone(),
            domain_id: x.domain_id.clone(),
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::data(path, e.to_string()))?;
        let s: Self = serde_json::from_str(&text)?;
        if s.aerial_mean.len() != AERIAL_CHANNELS || s.aerial_std.len() != AERIAL_CHANNELS || s.sits_mean.len() != SITS_BANDS || s.sits_std.len() != SITS_BANDS {
            return Err(Error::data(path, "wrong channel counts"));
        }
        Ok(s)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
