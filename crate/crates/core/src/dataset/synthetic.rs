//! Seeded synthetic land-cover patches with per-class colour and phenology.

use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use chrono::NaiveDate;
use latefuse_tensor::{Scalar, Tensor};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{write_sample, DatasetManifest, ManifestEntry, Sample, Split, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::types::{AerialPatch, LabelMask, ScaleProfile, SitsStack, AERIAL_CHANNELS, N_CLASSES, SITS_BANDS};

/// Seasonal reflectance curve per band:
/// `baseline[b] + amplitude[b] * sin(2π·doy/365 + phase)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phenology {
    pub baseline: [f64; SITS_BANDS],
    pub amplitude: [f64; SITS_BANDS],
    pub phase: f64,
}

impl Phenology {
    pub fn at(&self, band: usize, doy: u32) -> f64 {
        self.baseline[band] + self.amplitude[band] * (TAU * doy as f64 / 365.0 + self.phase).sin()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_samples: usize,
    pub n_domains: usize,
    pub scale: ScaleProfile,
    pub seed: u64,
    pub class_palette: Vec<[f64; AERIAL_CHANNELS]>,
    pub class_phenology: Vec<Phenology>,
    pub cloud_rate: f64,
    /// Inclusive range of raw acquisitions per series.
    pub frames: (usize, usize),
    pub year: i32,
    pub aerial_noise: f64,
    pub sits_noise: f64,
    /// Brightness shift between domains, as a standard deviation.
    pub domain_shift: f64,
}

impl SyntheticSpec {
    pub fn new(scale: ScaleProfile, n_samples: usize, n_domains: usize, seed: u64) -> Self {
        Self {
            n_samples,
            n_domains,
            scale,
            seed,
            class_palette: default_palette(),
            class_phenology: default_phenology(),
            cloud_rate: 0.3,
            frames: (20, 40),
            year: 2021,
            aerial_noise: 0.03,
            sits_noise: 0.02,
            domain_shift: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(format!("synthetic spec: {m}")));
        if self.n_samples == 0 {
            return bad("n_samples must be positive".into());
        }
        if self.n_domains < 3 {
            return bad(format!("need at least 3 domains for train/val/test, got {}", self.n_domains));
        }
        if self.class_palette.len() != N_CLASSES || self.class_phenology.len() != N_CLASSES {
            return bad("palette and phenology need 13 rows each".into());
        }
        if !(0.0..=1.0).contains(&self.cloud_rate) {
            return bad(format!("cloud_rate {} outside [0, 1]", self.cloud_rate));
        }
        let (lo, hi) = self.frames;
        if lo == 0 || lo > hi || hi > 365 {
            return bad(format!("frame range {lo}..={hi} invalid"));
        }
        if NaiveDate::from_ymd_opt(self.year, 1, 1).is_none() {
            return bad(format!("year {}", self.year));
        }
        if [self.aerial_noise, self.sits_noise, self.domain_shift].iter().any(|v| !(*v >= 0.0)) {
            return bad("noise levels must be nonnegative".into());
        }
        Ok(())
    }

    /// Pairs `(a, b)` with equal palettes but different phenology.
    pub fn spectrally_confused_pairs(&self) -> Vec<(usize, usize)> {
        self.pairs(|a, b| self.class_palette[a] == self.class_palette[b] && self.class_phenology[a] != self.class_phenology[b])
    }

    /// Pairs `(a, b)` with equal phenology but different palettes.
    pub fn temporally_confused_pairs(&self) -> Vec<(usize, usize)> {
        self.pairs(|a, b| self.class_phenology[a] == self.class_phenology[b] && self.class_palette[a] != self.class_palette[b])
    }

    fn pairs(&self, f: impl Fn(usize, usize) -> bool) -> Vec<(usize, usize)> {
        let n = self.class_palette.len().min(self.class_phenology.len());
        (0..n).flat_map(|a| (a + 1..n).map(move |b| (a, b))).filter(|&(a, b)| f(a, b)).collect()
    }

    /// Split of domain `k`, apportioned 32 : 8 : 10 with at least one domain each.
    pub fn domain_split(&self, k: usize) -> Split {
        let n = self.n_domains;
        let n_val = ((n as f64 * 8.0 / 50.0).round() as usize).max(1);
        let n_test = ((n as f64 * 10.0 / 50.0).round() as usize).max(1);
        let n_train = n - n_val - n_test;
        if k < n_train {
            Split::Train
        } else if k < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        }
    }

    pub fn domain_id(k: usize) -> String {
        format!("D{k:03}")
    }

    pub fn patch_id(i: usize) -> String {
        format!("P{i:06}")
    }
}

/// R, G, B, NIR, elevation per class. Coniferous and deciduous share a row.
pub fn default_palette() -> Vec<[f64; AERIAL_CHANNELS]> {
    vec![
        [0.55, 0.45, 0.40, 0.30, 0.90],
        [0.35, 0.40, 0.25, 0.45, 0.10],
        [0.45, 0.45, 0.45, 0.25, 0.05],
        [0.60, 0.50, 0.35, 0.40, 0.05],
        [0.10, 0.20, 0.30, 0.05, 0.00],
        [0.12, 0.25, 0.12, 0.55, 0.70],
        [0.12, 0.25, 0.12, 0.55, 0.70],
        [0.25, 0.35, 0.15, 0.50, 0.30],
        [0.40, 0.35, 0.20, 0.40, 0.15],
        [0.30, 0.50, 0.20, 0.65, 0.05],
        [0.50, 0.55, 0.30, 0.60, 0.02],
        [0.45, 0.30, 0.20, 0.30, 0.02],
        [0.70, 0.20, 0.60, 0.20, 0.40],
    ]
}

/// Per-class seasonal curves. Building and impervious surface share one.
pub fn default_phenology() -> Vec<Phenology> {
    // Band response to vegetation vigour, blue through SWIR.
    const VIGOUR: [f64; SITS_BANDS] = [-0.3, -0.1, -0.4, 0.1, 0.6, 0.8, 0.9, 0.9, 0.2, -0.1];
    // (level, seasonal amplitude, phase, vegetation tilt)
    let rows: [(f64, f64, f64, f64); N_CLASSES] = [
        (0.30, 0.00, 0.0, 0.00),
        (0.20, 0.08, 0.0, 0.10),
        (0.30, 0.00, 0.0, 0.00),
        (0.35, 0.02, 1.0, -0.05),
        (0.05, 0.01, 0.0, -0.05),
        (0.12, 0.03, 0.5, 0.25),
        (0.12, 0.15, 4.2, 0.20),
        (0.15, 0.10, 3.5, 0.15),
        (0.22, 0.12, 2.5, 0.05),
        (0.18, 0.12, 5.0, 0.15),
        (0.25, 0.20, 3.0, 0.10),
        (0.30, 0.15, 1.5, 0.00),
        (0.40, 0.05, 2.0, -0.10),
    ];
    rows.iter()
        .map(|&(level, amp, phase, tilt)| Phenology {
            baseline: VIGOUR.map(|v| level + tilt * v),
            amplitude: VIGOUR.map(|v| amp * v),
            phase,
        })
        .collect()
}

/// Nearest-seed regions on an `s × s` grid, redrawn until the centre crop
/// holds at least two classes.
fn region_labels(rng: &mut ChaCha8Rng, scale: &ScaleProfile) -> Vec<u8> {
    let s = scale.sits_size();
    let (off, crop) = (scale.crop_offset(), scale.center_crop());
    let n_seeds = (s * s / 6).max(4);
    loop {
        // Half the seeds land inside the footprint so it is never a single parcel.
        let seeds: Vec<(f64, f64, u8)> = (0..n_seeds)
            .map(|k| {
                let (lo, span) = if k % 2 == 0 { (off as f64, crop as f64) } else { (0.0, s as f64) };
                (
                    lo + rng.random::<f64>() * span,
                    lo + rng.random::<f64>() * span,
                    rng.random_range(0..N_CLASSES as u8),
                )
            })
            .collect();
        let labels: Vec<u8> = (0..s * s)
            .map(|i| {
                let (y, x) = ((i / s) as f64 + 0.5, (i % s) as f64 + 0.5);
                let mut best = (f64::INFINITY, 0u8);
                for &(sy, sx, c) in &seeds {
                    let d = (sy - y).powi(2) + (sx - x).powi(2);
                    if d < best.0 {
                        best = (d, c);
                    }
                }
                best.1
            })
            .collect();
        let first = labels[off * s + off];
        let mixed = (off..off + crop).any(|y| (off..off + crop).any(|x| labels[y * s + x] != first));
        if mixed {
            return labels;
        }
    }
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Builds sample `index` of the dataset in memory. Identical to what
/// [`generate_synthetic`] writes.
pub fn synthesize_sample<T: Scalar>(spec: &SyntheticSpec, index: usize) -> Result<Sample<T>> {
    spec.validate()?;
    let mut rng = sample_rng(spec.seed, index);
    let scale = &spec.scale;
    let (a, s) = (scale.aerial_size(), scale.sits_size());
    let (off, crop) = (scale.crop_offset(), scale.center_crop());
    let domain = index % spec.n_domains;
    let patch_id = SyntheticSpec::patch_id(index);

    let mut domain_rng = sample_rng(spec.seed ^ 0x5eed_d0a1, domain);
    let shift: f64 = Normal::new(0.0, spec.domain_shift).expect("finite").sample(&mut domain_rng);

    let grid = region_labels(&mut rng, scale);
    let mask_labels: Vec<u8> = (0..a * a)
        .map(|i| {
            let (y, x) = (i / a, i % a);
            grid[(off + y * crop / a) * s + off + x * crop / a]
        })
        .collect();
    let mask = LabelMask::new(a, a, mask_labels)?;

    let an = Normal::new(0.0, spec.aerial_noise).expect("finite");
    let mut aerial = vec![T::zero(); AERIAL_CHANNELS * a * a];
    for c in 0..AERIAL_CHANNELS {
        for (i, &l) in mask.labels().iter().enumerate() {
            let v = spec.class_palette[l as usize][c] + shift + an.sample(&mut rng);
            aerial[c * a * a + i] = T::of(v);
        }
    }
    let aerial = AerialPatch::new(Tensor::new(&[AERIAL_CHANNELS, a, a], aerial)?, &patch_id)?;

    let first = NaiveDate::from_ymd_opt(spec.year, 1, 1).expect("validated");
    let year_len = NaiveDate::from_ymd_opt(spec.year, 12, 31).expect("validated").signed_duration_since(first).num_days() as usize + 1;
    let t = rng.random_range(spec.frames.0..=spec.frames.1).min(year_len);
    let mut days = sample_indices(&mut rng, year_len, t).into_vec();
    days.sort_unstable();
    let dates: Vec<NaiveDate> = days.iter().map(|&d| first + chrono::Days::new(d as u64)).collect();

    let sn = Normal::new(0.0, spec.sits_noise).expect("finite");
    let hw = s * s;
    let mut frames = vec![T::zero(); t * SITS_BANDS * hw];
    let mut masks = vec![T::zero(); t * hw];
    for (ti, &d) in days.iter().enumerate() {
        let doy = d as u32 + 1;
        let cloud = if rng.random::<f64>() < spec.cloud_rate {
            let r = s as f64 * (0.15 + 0.35 * rng.random::<f64>());
            Some((rng.random::<f64>() * s as f64, rng.random::<f64>() * s as f64, r))
        } else {
            None
        };
        for i in 0..hw {
            let m = match cloud {
                Some((cy, cx, r)) => {
                    let dist = (((i / s) as f64 + 0.5 - cy).powi(2) + ((i % s) as f64 + 0.5 - cx).powi(2)).sqrt();
                    if dist < r {
                        1.0 - 0.4 * dist / r
                    } else {
                        0.0
                    }
                }
                None => 0.0,
            };
            masks[ti * hw + i] = T::of(m);
            let ph = &spec.class_phenology[grid[i] as usize];
            for b in 0..SITS_BANDS {
                let clear = ph.at(b, doy) + shift + sn.sample(&mut rng);
                frames[(ti * SITS_BANDS + b) * hw + i] = T::of(clear * (1.0 - m) + 0.8 * m);
            }
        }
    }
    let sits = SitsStack::new(
        Tensor::new(&[t, SITS_BANDS, s, s], frames)?,
        dates,
        Tensor::new(&[t, s, s], masks)?,
        &patch_id,
    )?;
    Ok(Sample {
        aerial,
        sits,
        mask: Some(mask),
        domain_id: SyntheticSpec::domain_id(domain),
    })
}

/// Writes every sample plus `manifest.jsonl` under `out_dir`.
pub fn generate_synthetic<T: Scalar>(spec: &SyntheticSpec, out_dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    fs::create_dir_all(out_dir)?;
    let mut entries = Vec::with_capacity(spec.n_samples);
    for i in 0..spec.n_samples {
        let sample = synthesize_sample::<T>(spec, i)?;
        let rel = Path::new("samples").join(SyntheticSpec::patch_id(i));
        write_sample(&out_dir.join(&rel), &sample)?;
        entries.push(ManifestEntry {
            sample_dir: rel,
            domain_id: sample.domain_id,
            split: spec.domain_split(i % spec.n_domains),
        });
    }
    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        entries,
    };
    manifest.validate()?;
    manifest.write(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}
