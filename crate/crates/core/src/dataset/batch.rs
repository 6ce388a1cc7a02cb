use latefuse_tensor::{Scalar, Tensor};

use super::Sample;
use crate::error::{Error, Result};
use crate::types::{LabelMask, AERIAL_CHANNELS, SITS_BANDS};

/// Stacked samples. Series are zero-padded along time to the batch maximum;
/// `validity[b * t_max + t]` marks real frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub patch_ids: Vec<String>,
    pub aerial: Tensor<T>,
    pub frames: Tensor<T>,
    pub day_of_year: Vec<u16>,
    pub validity: Vec<bool>,
    pub t_max: usize,
    pub labels: Option<Vec<LabelMask>>,
}

impl<T: Scalar> Batch<T> {
    pub fn len(&self) -> usize {
        self.patch_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patch_ids.is_empty()
    }

    pub fn aerial_size(&self) -> usize {
        self.aerial.dim(2)
    }

    pub fn sits_size(&self) -> usize {
        self.frames.dim(3)
    }

    pub fn validity_row(&self, b: usize) -> &[bool] {
        &self.validity[b * self.t_max..(b + 1) * self.t_max]
    }

    pub fn collate(samples: &[&Sample<T>]) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::Empty("batch".into()))?;
        let (a, s) = (first.aerial.size(), first.sits.size());
        if let Some(bad) = samples.iter().find(|x| x.aerial.size() != a || x.sits.size() != s) {
            return Err(Error::Shape(format!(
                "mixed profiles in one batch: {} is {}/{}, {} is {a}/{s}",
                bad.patch_id(),
                bad.aerial.size(),
                bad.sits.size(),
                first.patch_id()
            )));
        }
        let b = samples.len();
        let t_max = samples.iter().map(|x| x.sits.len()).max().unwrap_or(0);
        let frame = SITS_BANDS * s * s;
        let mut aerial = Vec::with_capacity(b * AERIAL_CHANNELS * a * a);
        let mut frames = vec![T::zero(); b * t_max * frame];
        let mut doy = vec![1u16; b * t_max];
        let mut validity = vec![false; b * t_max];
        for (i, x) in samples.iter().enumerate() {
            aerial.extend_from_slice(x.aerial.pixels.data());
            let t = x.sits.len();
            frames[i * t_max * frame..(i * t_max + t) * frame].copy_from_slice(x.sits.frames.data());
            for (k, d) in x.sits.day_of_year().into_iter().enumerate() {
                doy[i * t_max + k] = d;
                validity[i * t_max + k] = true;
            }
        }
        let labels = samples
            .iter()
            .map(|x| x.mask.clone())
            .collect::<Option<Vec<_>>>();
        Ok(Self {
            patch_ids: samples.iter().map(|x| x.patch_id().to_string()).collect(),
            aerial: Tensor::new(&[b, AERIAL_CHANNELS, a, a], aerial)?,
            frames: Tensor::new(&[b, t_max, SITS_BANDS, s, s], frames)?,
            day_of_year: doy,
            validity,
            t_max,
            labels,
        })
    }
}

/// Lazily collated consecutive chunks of a sample slice.
pub struct Batches<'a, T> {
    chunks: std::slice::Chunks<'a, Sample<T>>,
}

impl<T: Scalar> Iterator for Batches<'_, T> {
    type Item = Batch<T>;

    fn next(&mut self) -> Option<Batch<T>> {
        let chunk = self.chunks.next()?;
        let refs: Vec<&Sample<T>> = chunk.iter().collect();
        Some(Batch::collate(&refs).expect("profiles checked up front"))
    }
}

/// Batches of at most `size` samples in order. Fails on mixed profiles.
pub fn batch<T: Scalar>(samples: &[Sample<T>], size: usize) -> Result<Batches<'_, T>> {
    if size == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    if let Some(first) = samples.first() {
        let (a, s) = (first.aerial.size(), first.sits.size());
        if let Some(bad) = samples.iter().find(|x| x.aerial.size() != a || x.sits.size() != s) {
            return Err(Error::Shape(format!(
                "mixed profiles: {} is {}/{}, expected {a}/{s}",
                bad.patch_id(),
                bad.aerial.size(),
                bad.sits.size()
            )));
        }
    }
    Ok(Batches {
        chunks: samples.chunks(size),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synthesize_sample, SyntheticSpec};
    use crate::types::ScaleProfile;

    fn samples(n: usize, frames: (usize, usize)) -> Vec<Sample<f32>> {
        let mut spec = SyntheticSpec::new(ScaleProfile::toy_with(32), n, 3, 4);
        spec.frames = frames;
        (0..n).map(|i| synthesize_sample(&spec, i).unwrap()).collect()
    }

    #[test]
    fn sizes_twelve_twelve_one() {
        let s = samples(25, (1, 2));
        let sizes: Vec<usize> = batch(&s, 12).unwrap().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![12, 12, 1]);
        assert_eq!(batch::<f32>(&[], 12).unwrap().count(), 0);
    }

    #[test]
    fn padding_and_validity() {
        let mut a = samples(1, (3, 3));
        let b = samples(2, (5, 5)).pop().unwrap();
        a.push(b);
        let batch = batch(&a, 4).unwrap().next().unwrap();
        assert_eq!(batch.t_max, 5);
        assert_eq!(batch.validity_row(0), &[true, true, true, false, false]);
        assert_eq!(batch.validity_row(1), &[true; 5]);
        let frame = 10 * 8 * 8;
        let pad = &batch.frames.data()[3 * frame..5 * frame];
        assert!(pad.iter().all(|&v| v == 0.0));
        assert!(batch.labels.is_some());
    }

    #[test]
    fn mixed_profiles_rejected() {
        let mut s = samples(1, (2, 2));
        let mut spec = SyntheticSpec::new(ScaleProfile::toy_with(64), 1, 3, 4);
        spec.frames = (2, 2);
        s.push(synthesize_sample(&spec, 0).unwrap());
        assert!(batch(&s, 2).is_err());
    }
}
