use latefuse_tensor::{Scalar, Tensor};
use rand::Rng;

use super::Sample;
use crate::error::Result;
use crate::types::{AerialPatch, LabelMask, SitsStack};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flip {
    None,
    Horizontal,
    Vertical,
}

/// A flip followed by `quarter_turns` clockwise rotations of the square grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dihedral {
    pub flip: Flip,
    pub quarter_turns: u8,
}

impl Dihedral {
    pub const IDENTITY: Self = Self {
        flip: Flip::None,
        quarter_turns: 0,
    };

    pub fn random(rng: &mut impl Rng) -> Self {
        let flip = [Flip::None, Flip::Horizontal, Flip::Vertical][rng.random_range(0..3)];
        Self {
            flip,
            quarter_turns: rng.random_range(0..4),
        }
    }

    /// Source coordinate for output `(y, x)` on an `n × n` grid.
    pub fn source(&self, y: usize, x: usize, n: usize) -> (usize, usize) {
        let (mut y, mut x) = (y, x);
        // Undo the rotation first: one clockwise turn maps (r, c) to (c, n-1-r).
        for _ in 0..self.quarter_turns % 4 {
            (y, x) = (n - 1 - x, y);
        }
        match self.flip {
            Flip::None => (y, x),
            Flip::Horizontal => (y, n - 1 - x),
            Flip::Vertical => (n - 1 - y, x),
        }
    }

    fn index_map(&self, n: usize) -> Vec<usize> {
        (0..n * n)
            .map(|i| {
                let (y, x) = self.source(i / n, i % n, n);
                y * n + x
            })
            .collect()
    }

    /// Applies the transform to every `n × n` plane of a contiguous buffer.
    pub fn apply_planes<V: Copy>(&self, data: &[V], n: usize) -> Vec<V> {
        if *self == Self::IDENTITY {
            return data.to_vec();
        }
        let map = self.index_map(n);
        data.chunks(n * n)
            .flat_map(|plane| map.iter().map(move |&s| plane[s]))
            .collect()
    }

    fn tensor<T: Scalar>(&self, t: &Tensor<T>) -> Result<Tensor<T>> {
        let n = t.dim(t.rank() - 1);
        Ok(Tensor::new(t.shape(), self.apply_planes(t.data(), n))?)
    }

    pub fn apply<T: Scalar>(&self, s: &Sample<T>) -> Result<Sample<T>> {
        let mask = match &s.mask {
            Some(m) => Some(LabelMask::new(m.height(), m.width(), self.apply_planes(m.labels(), m.width()))?),
            None => None,
        };
        Ok(Sample {
            aerial: AerialPatch::new(self.tensor(&s.aerial.pixels)?, &s.aerial.patch_id)?,
            sits: SitsStack::new(
                self.tensor(&s.sits.frames)?,
                s.sits.dates.clone(),
                self.tensor(&s.sits.cloud_snow_masks)?,
                &s.sits.patch_id,
            )?,
            mask,
            domain_id: s.domain_id.clone(),
        })
    }
}

/// One uniformly drawn flip (none, horizontal, vertical) and rotation applied
/// identically to every raster of the sample.
pub fn augment<T: Scalar>(sample: &Sample<T>, rng: &mut impl Rng) -> Result<Sample<T>> {
    Dihedral::random(rng).apply(sample)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synthesize_sample, SyntheticSpec};
    use crate::types::ScaleProfile;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Sample<f32> {
        let mut spec = SyntheticSpec::new(ScaleProfile::toy_with(32), 1, 3, 2);
        spec.frames = (3, 3);
        synthesize_sample(&spec, 0).unwrap()
    }

    #[test]
    fn identity_and_involution() {
        let s = sample();
        assert_eq!(Dihedral::IDENTITY.apply(&s).unwrap(), s);
        let h = Dihedral {
            flip: Flip::Horizontal,
            quarter_turns: 0,
        };
        assert_eq!(h.apply(&h.apply(&s).unwrap()).unwrap(), s);
    }

    #[test]
    fn quarter_turn_moves_top_left_to_top_right() {
        let mut labels = vec![0u8; 9];
        labels[0] = 4;
        let m = LabelMask::new(3, 3, labels).unwrap();
        let r = Dihedral {
            flip: Flip::None,
            quarter_turns: 1,
        };
        let out = r.apply_planes(m.labels(), 3);
        // Clockwise: (0, 0) -> (0, 2).
        assert_eq!(out[2], 4);
        assert_eq!(out.iter().filter(|&&v| v == 4).count(), 1);
    }

    #[test]
    fn all_rasters_move_together() {
        let s = sample();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..12 {
            let t = Dihedral::random(&mut rng);
            let out = t.apply(&s).unwrap();
            let (a, h) = (s.aerial.size(), s.sits.size());
            let (y, x) = (5, 9);
            let (sy, sx) = t.source(y, x, a);
            assert_eq!(out.mask.as_ref().unwrap().get(y, x), s.mask.as_ref().unwrap().get(sy, sx));
            assert_eq!(out.aerial.pixels.at(&[3, y, x]), s.aerial.pixels.at(&[3, sy, sx]));
            let (sy, sx) = t.source(2, 6, h);
            assert_eq!(out.sits.frames.at(&[1, 7, 2, 6]), s.sits.frames.at(&[1, 7, sy, sx]));
            assert_eq!(out.sits.cloud_snow_masks.at(&[2, 2, 6]), s.sits.cloud_snow_masks.at(&[2, sy, sx]));
        }
    }

    proptest! {
        #[test]
        fn histogram_is_preserved(seed in any::<u64>(), labels in prop::collection::vec(0u8..13, 16)) {
            let m = LabelMask::new(4, 4, labels).unwrap();
            let t = Dihedral::random(&mut ChaCha8Rng::seed_from_u64(seed));
            let out = LabelMask::new(4, 4, t.apply_planes(m.labels(), 4)).unwrap();
            prop_assert_eq!(out.histogram(), m.histogram());
        }
    }
}
