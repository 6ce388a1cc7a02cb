//! Shared domain types: nomenclature, scale profiles, rasters and label maps.

use chrono::{Datelike, NaiveDate};
use latefuse_tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_CLASSES: usize = 13;
pub const AERIAL_CHANNELS: usize = 5;
pub const SITS_BANDS: usize = 10;
pub const PROB_TOLERANCE: f64 = 1e-5;

const CLASS_NAMES: [&str; N_CLASSES] = [
    "building",
    "pervious surface",
    "impervious surface",
    "bare soil",
    "water",
    "coniferous",
    "deciduous",
    "brushwood",
    "vineyard",
    "herbaceous vegetation",
    "agricultural land",
    "plowed land",
    "other",
];

/// The fixed ordered class list. Twelve scored classes followed by `other`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Nomenclature {
    pub classes: Vec<String>,
    pub other_index: usize,
}

impl Default for Nomenclature {
    fn default() -> Self {
        Self {
            classes: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
            other_index: N_CLASSES - 1,
        }
    }
}

impl Nomenclature {
    pub fn validate(&self) -> Result<()> {
        if *self != Self::default() {
            return Err(Error::config("nomenclature must be the 13-class land-cover list ending in 'other'"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn name(&self, class: usize) -> &str {
        &self.classes[class]
    }

    /// Class indices that enter the metrics, in table order.
    pub fn scored(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.classes.len()).filter(move |&c| c != self.other_index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProfileName {
    Toy,
    Full,
}

/// Raster sizes shared by every module. `center_crop` is the number of SITS
/// pixels covering the aerial footprint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawProfile", into = "RawProfile")]
pub struct ScaleProfile {
    name: ProfileName,
    aerial_size: usize,
    sits_size: usize,
    center_crop: usize,
}

#[derive(Serialize, Deserialize)]
struct RawProfile {
    name: ProfileName,
    aerial_size: usize,
    sits_size: usize,
}

impl TryFrom<RawProfile> for ScaleProfile {
    type Error = Error;
    fn try_from(r: RawProfile) -> Result<Self> {
        ScaleProfile::new(r.name, r.aerial_size, r.sits_size)
    }
}

impl From<ScaleProfile> for RawProfile {
    fn from(p: ScaleProfile) -> Self {
        RawProfile {
            name: p.name,
            aerial_size: p.aerial_size,
            sits_size: p.sits_size,
        }
    }
}

pub const TOY_AERIAL_SIZES: [usize; 3] = [32, 64, 128];

impl ScaleProfile {
    /// Full: exactly 512 / 40. Toy: aerial in {32, 64, 128} with the SITS
    /// side a quarter of it. The crop is always a quarter of the SITS side.
    pub fn new(name: ProfileName, aerial_size: usize, sits_size: usize) -> Result<Self> {
        if sits_size == 0 || sits_size % 4 != 0 {
            return Err(Error::config(format!(
                "sits_size {sits_size} must be a positive multiple of 4 so the centre crop is a quarter of it"
            )));
        }
        match name {
            ProfileName::Full if (aerial_size, sits_size) != (512, 40) => {
                return Err(Error::config(format!(
                    "full profile is 512/40, got {aerial_size}/{sits_size}"
                )))
            }
            ProfileName::Toy if !TOY_AERIAL_SIZES.contains(&aerial_size) || sits_size * 4 != aerial_size => {
                return Err(Error::config(format!(
                    "toy profile needs aerial_size in {TOY_AERIAL_SIZES:?} and sits_size = aerial_size / 4, got {aerial_size}/{sits_size}"
                )))
            }
            _ => {}
        }
        Ok(Self {
            name,
            aerial_size,
            sits_size,
            center_crop: sits_size / 4,
        })
    }

    pub fn full() -> Self {
        Self::new(ProfileName::Full, 512, 40).expect("full profile")
    }

    pub fn toy() -> Self {
        Self::toy_with(64)
    }

    pub fn toy_with(aerial_size: usize) -> Self {
        Self::new(ProfileName::Toy, aerial_size, aerial_size / 4).expect("toy profile")
    }

    pub fn name(&self) -> ProfileName {
        self.name
    }

    pub fn aerial_size(&self) -> usize {
        self.aerial_size
    }

    pub fn sits_size(&self) -> usize {
        self.sits_size
    }

    pub fn center_crop(&self) -> usize {
        self.center_crop
    }

    /// First SITS row/column of the centre crop.
    pub fn crop_offset(&self) -> usize {
        (self.sits_size - self.center_crop) / 2
    }
}

/// Five-channel aerial raster `[5, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AerialPatch<T> {
    pub pixels: Tensor<T>,
    pub patch_id: String,
}

impl<T: Scalar> AerialPatch<T> {
    pub fn new(pixels: Tensor<T>, patch_id: impl Into<String>) -> Result<Self> {
        match pixels.shape() {
            [AERIAL_CHANNELS, h, w] if h == w && *h > 0 => Ok(Self {
                pixels,
                patch_id: patch_id.into(),
            }),
            s => Err(Error::Shape(format!("aerial patch must be [5, H, H], got {s:?}"))),
        }
    }

    pub fn size(&self) -> usize {
        self.pixels.dim(1)
    }
}

/// Satellite time series `[T, 10, h, w]` with dates and cloud/snow masks.
#[derive(Debug, Clone, PartialEq)]
pub struct SitsStack<T> {
    pub frames: Tensor<T>,
    pub dates: Vec<NaiveDate>,
    pub cloud_snow_masks: Tensor<T>,
    pub patch_id: String,
}

impl<T: Scalar> SitsStack<T> {
    pub fn new(frames: Tensor<T>, dates: Vec<NaiveDate>, masks: Tensor<T>, patch_id: impl Into<String>) -> Result<Self> {
        let patch_id = patch_id.into();
        let [t, h, w] = match frames.shape() {
            &[t, SITS_BANDS, h, w] if h == w && t >= 1 && h > 0 => [t, h, w],
            s => return Err(Error::Shape(format!("{patch_id}: frames must be [T>=1, 10, h, h], got {s:?}"))),
        };
        if masks.shape() != [t, h, w] {
            return Err(Error::Shape(format!("{patch_id}: masks {:?} do not match frames [{t}, {h}, {w}]", masks.shape())));
        }
        if dates.len() != t {
            return Err(Error::Shape(format!("{patch_id}: {} dates for {t} frames", dates.len())));
        }
        check_dates(&dates).map_err(|m| Error::Dates(format!("{patch_id}: {m}")))?;
        if masks.data().iter().any(|&m| !(m >= T::zero() && m <= T::one())) {
            return Err(Error::data(&patch_id, "cloud/snow mask values must lie in [0, 1]"));
        }
        Ok(Self {
            frames,
            dates,
            cloud_snow_masks: masks,
            patch_id,
        })
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    pub fn size(&self) -> usize {
        self.frames.dim(2)
    }

    pub fn day_of_year(&self) -> Vec<u16> {
        self.dates.iter().map(|d| d.ordinal() as u16).collect()
    }
}

pub(crate) fn check_dates(dates: &[NaiveDate]) -> std::result::Result<(), String> {
    if let Some(w) = dates.windows(2).find(|w| w[0] >= w[1]) {
        return Err(format!("{} is not after {}", w[1], w[0]));
    }
    if let (Some(a), Some(b)) = (dates.first(), dates.last()) {
        if a.year() != b.year() {
            return Err(format!("dates span {} to {}, not one calendar year", a.year(), b.year()));
        }
    }
    Ok(())
}

/// Per-pixel class ids, row-major `[H, W]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Shape(format!("{} labels for a {height}x{width} mask", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= N_CLASSES) {
            return Err(Error::InvalidClass {
                id: bad as usize,
                max: N_CLASSES - 1,
            });
        }
        Ok(Self { height, width, labels })
    }

    pub fn filled(height: usize, width: usize, class: u8) -> Result<Self> {
        Self::new(height, width, vec![class; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn histogram(&self) -> [usize; N_CLASSES] {
        let mut h = [0; N_CLASSES];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }
}

/// Per-pixel distribution over the 13 classes, `[13, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassProbabilityMap<T> {
    probs: Tensor<T>,
}

impl<T: Scalar> ClassProbabilityMap<T> {
    /// Checked constructor: rejects anything [`validate`] rejects.
    pub fn new(probs: Tensor<T>) -> Result<Self> {
        if probs.rank() != 3 || probs.dim(0) != N_CLASSES {
            return Err(Error::Shape(format!("probability map must be [13, H, W], got {:?}", probs.shape())));
        }
        if !validate(&probs) {
            return Err(Error::data("probability map", "entries must be nonnegative and sum to 1 per pixel"));
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &Tensor<T> {
        &self.probs
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.probs
    }

    pub fn height(&self) -> usize {
        self.probs.dim(1)
    }

    pub fn width(&self) -> usize {
        self.probs.dim(2)
    }
}

/// True iff `probs` (`[C, H, W]`) is nonnegative with per-pixel sums within
/// [`PROB_TOLERANCE`] of one.
pub fn validate<T: Scalar>(probs: &Tensor<T>) -> bool {
    if probs.rank() != 3 || probs.dim(0) == 0 {
        return false;
    }
    let c = probs.dim(0);
    let hw = probs.dim(1) * probs.dim(2);
    let d = probs.data();
    if d.iter().any(|&v| !(v >= T::zero()) || !v.is_finite()) {
        return false;
    }
    (0..hw).all(|i| {
        let s: f64 = (0..c).map(|k| d[k * hw + i].as_f64()).sum();
        (s - 1.0).abs() <= PROB_TOLERANCE
    })
}

/// Per-pixel argmax, ties to the lowest class index.
pub fn argmax_labels<T: Scalar>(p: &ClassProbabilityMap<T>) -> LabelMask {
    let (h, w) = (p.height(), p.width());
    let hw = h * w;
    let d = p.probs.data();
    let labels = (0..hw)
        .map(|i| {
            let mut best = 0;
            for c in 1..N_CLASSES {
                if d[c * hw + i] > d[best * hw + i] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    LabelMask {
        height: h,
        width: w,
        labels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one_hot_map(h: usize, w: usize, classes: &[usize]) -> ClassProbabilityMap<f64> {
        let mut t = Tensor::zeros(&[N_CLASSES, h, w]);
        for (i, &c) in classes.iter().enumerate() {
            t.data_mut()[c * h * w + i] = 1.0;
        }
        ClassProbabilityMap::new(t).unwrap()
    }

    #[test]
    fn nomenclature_order_and_scored_classes() {
        let n = Nomenclature::default();
        assert_eq!(n.len(), 13);
        assert_eq!(n.name(0), "building");
        assert_eq!(n.name(11), "plowed land");
        assert_eq!(n.name(n.other_index), "other");
        assert_eq!(n.scored().count(), 12);
        assert!(n.scored().all(|c| c != 12));
    }

    #[test]
    fn argmax_examples() {
        let mut t = Tensor::<f64>::zeros(&[N_CLASSES, 1, 1]);
        t.data_mut()[0] = 0.1;
        t.data_mut()[1] = 0.9;
        assert_eq!(argmax_labels(&ClassProbabilityMap::new(t).unwrap()).labels(), &[1]);

        let uniform = Tensor::full(&[N_CLASSES, 1, 1], 1.0 / 13.0);
        assert_eq!(argmax_labels(&ClassProbabilityMap::new(uniform).unwrap()).labels(), &[0]);

        let m = argmax_labels(&one_hot_map(2, 2, &[0, 5, 5, 12]));
        assert_eq!((m.get(0, 0), m.get(0, 1), m.get(1, 0), m.get(1, 1)), (0, 5, 5, 12));
    }

    #[test]
    fn validate_examples() {
        let logits = Tensor::<f64>::from_fn(&[N_CLASSES, 2, 3], |i| (i as f64 * 0.7).sin() * 3.0);
        let hw = 6;
        let mut soft = logits.clone();
        for i in 0..hw {
            let z: f64 = (0..N_CLASSES).map(|c| logits.data()[c * hw + i].exp()).sum();
            for c in 0..N_CLASSES {
                soft.data_mut()[c * hw + i] = logits.data()[c * hw + i].exp() / z;
            }
        }
        assert!(validate(&soft));

        let mut neg = soft.clone();
        neg.data_mut()[0] = -1e-9;
        assert!(!validate(&neg));

        // scale one pixel so it sums to 1.001
        let mut over = soft.clone();
        for c in 0..N_CLASSES {
            over.data_mut()[c * hw] *= 1.001;
        }
        assert!(!validate(&over));
    }

    #[test]
    fn profile_rules() {
        let f = ScaleProfile::full();
        assert_eq!((f.aerial_size(), f.sits_size(), f.center_crop()), (512, 40, 10));
        assert_eq!(f.crop_offset(), 15);
        let t = ScaleProfile::toy();
        assert_eq!((t.aerial_size(), t.sits_size(), t.center_crop()), (64, 16, 4));
        assert!(ScaleProfile::new(ProfileName::Full, 512, 42).is_err());
        assert!(ScaleProfile::new(ProfileName::Toy, 64, 18).is_err());
        assert!(ScaleProfile::new(ProfileName::Toy, 48, 12).is_err());
        let json = serde_json::to_string(&t).unwrap();
        assert_eq!(serde_json::from_str::<ScaleProfile>(&json).unwrap(), t);
        assert!(serde_json::from_str::<ScaleProfile>(r#"{"name":"toy","aerial_size":64,"sits_size":12}"#).is_err());
    }

    #[test]
    fn label_mask_rejects_class_13() {
        assert!(matches!(LabelMask::new(1, 2, vec![0, 13]), Err(Error::InvalidClass { id: 13, .. })));
    }

    proptest! {
        #[test]
        fn argmax_invariant_under_positive_rescaling(
            raw in prop::collection::vec(0.0f64..1.0, N_CLASSES * 4),
            scale in prop::collection::vec(0.01f64..100.0, 4),
        ) {
            let hw = 4;
            let norm = |t: &mut Tensor<f64>| {
                for i in 0..hw {
                    let s: f64 = (0..N_CLASSES).map(|c| t.data()[c * hw + i]).sum::<f64>().max(1e-300);
                    for c in 0..N_CLASSES {
                        t.data_mut()[c * hw + i] /= s;
                    }
                }
            };
            let mut a = Tensor::new(&[N_CLASSES, 2, 2], raw.iter().map(|v| v + 1e-3).collect()).unwrap();
            norm(&mut a);
            let mut b = Tensor::from_fn(&[N_CLASSES, 2, 2], |i| a.data()[i] * scale[i % hw]);
            norm(&mut b);
            let la = argmax_labels(&ClassProbabilityMap::new(a).unwrap());
            let lb = argmax_labels(&ClassProbabilityMap::new(b).unwrap());
            // Rescaling by a per-pixel constant preserves the order of classes
            // up to round-off; only exact ties may flip, and random draws have none.
            prop_assert_eq!(la, lb);
        }

        #[test]
        fn profiles_reject_off_ratio_pairs(aerial in 1usize..600, sits in 1usize..60) {
            for name in [ProfileName::Toy, ProfileName::Full] {
                if let Ok(p) = ScaleProfile::new(name, aerial, sits) {
                    prop_assert_eq!(p.center_crop() * 40, p.sits_size() * 10);
                }
            }
        }
    }
}
