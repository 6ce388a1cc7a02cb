//! Cloud/snow frame filtering and monthly compositing of satellite series.

use chrono::{Datelike, NaiveDate};
use latefuse_tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{SitsStack, SITS_BANDS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterPolicy {
    pub prob_threshold: f64,
    pub max_cloudy_fraction: f64,
}

impl Default for FilterPolicy {
    fn default() -> Self {
        Self {
            prob_threshold: 0.5,
            max_cloudy_fraction: 0.05,
        }
    }
}

impl FilterPolicy {
    pub fn new(prob_threshold: f64, max_cloudy_fraction: f64) -> Result<Self> {
        let p = Self {
            prob_threshold,
            max_cloudy_fraction,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("prob_threshold", self.prob_threshold), ("max_cloudy_fraction", self.max_cloudy_fraction)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("{name} = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

fn select_frames<T: Scalar>(stack: &SitsStack<T>, keep: &[usize]) -> Result<SitsStack<T>> {
    let h = stack.size();
    let frame = SITS_BANDS * h * h;
    let mut frames = Vec::with_capacity(keep.len() * frame);
    let mut masks = Vec::with_capacity(keep.len() * h * h);
    for &t in keep {
        frames.extend_from_slice(&stack.frames.data()[t * frame..(t + 1) * frame]);
        masks.extend_from_slice(&stack.cloud_snow_masks.data()[t * h * h..(t + 1) * h * h]);
    }
    SitsStack::new(
        Tensor::new(&[keep.len(), SITS_BANDS, h, h], frames)?,
        keep.iter().map(|&t| stack.dates[t]).collect(),
        Tensor::new(&[keep.len(), h, h], masks)?,
        stack.patch_id.clone(),
    )
}

/// Fraction of pixels in frame `t` whose mask exceeds the threshold.
pub fn cloudy_fraction<T: Scalar>(stack: &SitsStack<T>, t: usize, prob_threshold: f64) -> f64 {
    let hw = stack.size() * stack.size();
    let m = &stack.cloud_snow_masks.data()[t * hw..(t + 1) * hw];
    m.iter().filter(|v| v.as_f64() > prob_threshold).count() as f64 / hw as f64
}

/// Keeps frames whose cloudy fraction is at most `max_cloudy_fraction`.
pub fn filter_cloudy<T: Scalar>(stack: &SitsStack<T>, policy: &FilterPolicy) -> Result<SitsStack<T>> {
    policy.validate()?;
    let keep: Vec<usize> = (0..stack.len())
        .filter(|&t| cloudy_fraction(stack, t, policy.prob_threshold) <= policy.max_cloudy_fraction)
        .collect();
    if keep.is_empty() {
        return Err(Error::NoCloudless(stack.patch_id.clone()));
    }
    select_frames(stack, &keep)
}

/// One frame per month with data: the per-pixel mean of that month's frames,
/// dated the 15th. Masks are averaged the same way.
pub fn monthly_average<T: Scalar>(stack: &SitsStack<T>) -> Result<SitsStack<T>> {
    if stack.is_empty() {
        return Err(Error::Empty(format!("series {}", stack.patch_id)));
    }
    let h = stack.size();
    let frame = SITS_BANDS * h * h;
    let hw = h * h;
    let mut frames = Vec::new();
    let mut masks = Vec::new();
    let mut dates = Vec::new();
    let mut start = 0;
    while start < stack.len() {
        let month = stack.dates[start].month();
        let end = (start..stack.len())
            .find(|&t| stack.dates[t].month() != month)
            .unwrap_or(stack.len());
        let n = T::of((end - start) as f64);
        let mut f = vec![T::zero(); frame];
        let mut m = vec![T::zero(); hw];
        for t in start..end {
            f.iter_mut()
                .zip(&stack.frames.data()[t * frame..(t + 1) * frame])
                .for_each(|(a, &b)| *a += b);
            m.iter_mut()
                .zip(&stack.cloud_snow_masks.data()[t * hw..(t + 1) * hw])
                .for_each(|(a, &b)| *a += b);
        }
        frames.extend(f.into_iter().map(|v| v / n));
        // Clamp guards the [0, 1] mask invariant against round-off.
        masks.extend(m.into_iter().map(|v| (v / n).min(T::one())));
        let d = stack.dates[start];
        dates.push(NaiveDate::from_ymd_opt(d.year(), month, 15).expect("15th exists"));
        start = end;
    }
    let t = dates.len();
    SitsStack::new(
        Tensor::new(&[t, SITS_BANDS, h, h], frames)?,
        dates,
        Tensor::new(&[t, h, h], masks)?,
        stack.patch_id.clone(),
    )
}

pub fn preprocess<T: Scalar>(stack: &SitsStack<T>, policy: &FilterPolicy) -> Result<SitsStack<T>> {
    monthly_average(&filter_cloudy(stack, policy)?)
}
