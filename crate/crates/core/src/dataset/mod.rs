//! Samples on disk, manifests, synthetic data, augmentation and batching.

mod augment;
mod batch;
mod stats;
mod synthetic;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use latefuse_tensor::{read_tensors, write_tensors, Metadata, Scalar, Tensor};
use serde::{Deserialize, Serialize};

pub use augment::{augment, Dihedral, Flip};
pub use batch::{batch, Batch, Batches};
pub use stats::ChannelStats;
pub use synthetic::{default_palette, default_phenology, generate_synthetic, synthesize_sample, Phenology, SyntheticSpec};

use crate::error::{Error, Result};
use crate::types::{check_dates, AerialPatch, LabelMask, ScaleProfile, SitsStack};

pub const AERIAL_FILE: &str = "aerial.safetensors";
pub const SITS_FILE: &str = "sits.safetensors";
pub const DATES_FILE: &str = "dates.txt";
pub const MASK_FILE: &str = "mask.png";
pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    pub aerial: AerialPatch<T>,
    pub sits: SitsStack<T>,
    pub mask: Option<LabelMask>,
    pub domain_id: String,
}

impl<T: Scalar> Sample<T> {
    pub fn patch_id(&self) -> &str {
        &self.aerial.patch_id
    }

    /// Checks the sample's raster sizes against a profile.
    pub fn check_profile(&self, profile: &ScaleProfile) -> Result<()> {
        let (a, s) = (self.aerial.size(), self.sits.size());
        if a != profile.aerial_size() || s != profile.sits_size() {
            return Err(Error::Shape(format!(
                "{}: aerial {a} / sits {s} do not match profile {}/{}",
                self.patch_id(),
                profile.aerial_size(),
                profile.sits_size()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory unless absolute.
    pub sample_dir: PathBuf,
    pub domain_id: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::data(path, format!("cannot open manifest: {e}")))?;
        let mut entries = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let e: ManifestEntry = serde_json::from_str(&line)
                .map_err(|e| Error::data(path, format!("line {}: {e}", i + 1)))?;
            entries.push(e);
        }
        let m = Self {
            root: path.parent().unwrap_or(Path::new(".")).to_path_buf(),
            entries,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        for e in &self.entries {
            writeln!(f, "{}", serde_json::to_string(e)?)?;
        }
        Ok(())
    }

    /// Splits must not share a domain.
    pub fn validate(&self) -> Result<()> {
        let mut owner: BTreeMap<&str, Split> = BTreeMap::new();
        for e in &self.entries {
            if let Some(prev) = owner.insert(&e.domain_id, e.split) {
                if prev != e.split {
                    return Err(Error::config(format!(
                        "domain {} appears in both {prev:?} and {:?} splits",
                        e.domain_id, e.split
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    pub fn domains(&self, split: Split) -> BTreeSet<&str> {
        self.split(split).into_iter().map(|e| e.domain_id.as_str()).collect()
    }

    pub fn sample_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.sample_dir)
    }

    pub fn load_split<T: Scalar>(&self, split: Split) -> Result<Vec<Sample<T>>> {
        self.split(split).into_iter().map(|e| load_sample(self, e)).collect()
    }
}

fn need(path: &Path) -> Result<()> {
    if !path.is_file() {
        return Err(Error::data(path, "missing file"));
    }
    Ok(())
}

fn require_key(map: &BTreeMap<String, Tensor<impl Scalar>>, key: &str, path: &Path) -> Result<()> {
    if !map.contains_key(key) {
        return Err(Error::data(path, format!("no array named '{key}'")));
    }
    Ok(())
}

fn read_dates(path: &Path) -> Result<Vec<NaiveDate>> {
    need(path)?;
    let text = fs::read_to_string(path)?;
    let dates = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| NaiveDate::parse_from_str(l.trim(), "%Y-%m-%d").map_err(|e| Error::data(path, format!("bad date '{l}': {e}"))))
        .collect::<Result<Vec<_>>>()?;
    check_dates(&dates).map_err(|m| Error::data(path, format!("dates not increasing: {m}")))?;
    Ok(dates)
}

fn read_mask(path: &Path) -> Result<LabelMask> {
    let img = image::open(path).map_err(|e| Error::data(path, format!("cannot read mask: {e}")))?;
    let gray = img.to_luma8();
    let (w, h) = gray.dimensions();
    LabelMask::new(h as usize, w as usize, gray.into_raw()).map_err(|e| Error::data(path, e.to_string()))
}

pub fn write_mask(path: &Path, mask: &LabelMask) -> Result<()> {
    let img = image::GrayImage::from_raw(mask.width() as u32, mask.height() as u32, mask.labels().to_vec())
        .ok_or_else(|| Error::Shape("mask buffer".into()))?;
    img.save(path)?;
    Ok(())
}

/// Loads one sample directory. The mask is optional (inference data).
pub fn load_sample_dir<T: Scalar>(dir: &Path, domain_id: &str) -> Result<Sample<T>> {
    let patch_id = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();

    let apath = dir.join(AERIAL_FILE);
    need(&apath)?;
    let (mut a, _) = read_tensors::<T>(&apath).map_err(|e| Error::data(&apath, e.to_string()))?;
    require_key(&a, "aerial", &apath)?;
    let aerial = AerialPatch::new(a.remove("aerial").expect("checked"), &patch_id).map_err(|e| Error::data(&apath, e.to_string()))?;

    let spath = dir.join(SITS_FILE);
    need(&spath)?;
    let (mut s, _) = read_tensors::<T>(&spath).map_err(|e| Error::data(&spath, e.to_string()))?;
    require_key(&s, "frames", &spath)?;
    require_key(&s, "masks", &spath)?;
    let dates = read_dates(&dir.join(DATES_FILE))?;
    let sits = SitsStack::new(s.remove("frames").expect("checked"), dates, s.remove("masks").expect("checked"), &patch_id)
        .map_err(|e| Error::data(&spath, e.to_string()))?;

    let mpath = dir.join(MASK_FILE);
    let mask = if mpath.exists() {
        let m = read_mask(&mpath)?;
        if m.height() != aerial.size() || m.width() != aerial.size() {
            return Err(Error::data(&mpath, format!("shape mismatch: mask {}x{} vs aerial {}", m.height(), m.width(), aerial.size())));
        }
        Some(m)
    } else {
        None
    };
    Ok(Sample {
        aerial,
        sits,
        mask,
        domain_id: domain_id.to_string(),
    })
}

pub fn load_sample<T: Scalar>(manifest: &DatasetManifest, entry: &ManifestEntry) -> Result<Sample<T>> {
    load_sample_dir(&manifest.sample_path(entry), &entry.domain_id)
}

pub fn write_sample<T: Scalar>(dir: &Path, sample: &Sample<T>) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_tensors(&dir.join(AERIAL_FILE), [("aerial".to_string(), &sample.aerial.pixels)], &Metadata::new())?;
    write_tensors(
        &dir.join(SITS_FILE),
        [
            ("frames".to_string(), &sample.sits.frames),
            ("masks".to_string(), &sample.sits.cloud_snow_masks),
        ],
        &Metadata::new(),
    )?;
    let dates: String = sample.sits.dates.iter().map(|d| format!("{}\n", d.format("%Y-%m-%d"))).collect();
    fs::write(dir.join(DATES_FILE), dates)?;
    if let Some(m) = &sample.mask {
        write_mask(&dir.join(MASK_FILE), m)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{ProfileName, N_CLASSES, SITS_BANDS};

    fn full_sample() -> Sample<f32> {
        let p = ScaleProfile::new(ProfileName::Full, 512, 40).unwrap();
        let (a, s) = (p.aerial_size(), p.sits_size());
        let dates: Vec<NaiveDate> = [10, 70, 200].iter().map(|&d| NaiveDate::from_yo_opt(2021, d).unwrap()).collect();
        Sample {
            aerial: AerialPatch::new(Tensor::from_fn(&[5, a, a], |i| (i % 97) as f32 * 0.01), "P1").unwrap(),
            sits: SitsStack::new(Tensor::from_fn(&[3, SITS_BANDS, s, s], |i| (i % 13) as f32), dates, Tensor::zeros(&[3, s, s]), "P1").unwrap(),
            mask: Some(LabelMask::new(a, a, (0..a * a).map(|i| (i % N_CLASSES) as u8).collect()).unwrap()),
            domain_id: "D0".into(),
        }
    }

    #[test]
    fn full_scale_sample_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path().join("P1");
        let s = full_sample();
        write_sample(&d, &s).unwrap();
        let back = load_sample_dir::<f32>(&d, "D0").unwrap();
        assert_eq!(back.aerial.pixels.shape(), &[5, 512, 512]);
        assert_eq!(back.sits.frames.shape(), &[3, 10, 40, 40]);
        assert_eq!(back, s);
    }

    #[test]
    fn load_errors_name_the_offending_file() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path().join("P1");
        let mut s = full_sample();
        write_sample(&d, &s).unwrap();

        let mut raw = s.mask.take().unwrap().labels().to_vec();
        raw[7] = 13;
        let img = image::GrayImage::from_raw(512, 512, raw).unwrap();
        img.save(d.join(MASK_FILE)).unwrap();
        let err = load_sample_dir::<f32>(&d, "D0").unwrap_err().to_string();
        assert!(err.contains("invalid class id") && err.contains("mask.png"), "{err}");

        fs::remove_file(d.join(MASK_FILE)).unwrap();
        fs::write(d.join(DATES_FILE), "2021-05-01\n2021-03-01\n2021-06-01\n").unwrap();
        let err = load_sample_dir::<f32>(&d, "D0").unwrap_err().to_string();
        assert!(err.contains("dates not increasing") && err.contains("dates.txt"), "{err}");

        fs::remove_file(d.join(SITS_FILE)).unwrap();
        let err = load_sample_dir::<f32>(&d, "D0").unwrap_err().to_string();
        assert!(err.contains("missing file") && err.contains(SITS_FILE), "{err}");
    }

    #[test]
    fn manifest_rejects_shared_domains() {
        let e = |d: &str, s| ManifestEntry {
            sample_dir: "x".into(),
            domain_id: d.into(),
            split: s,
        };
        let ok = DatasetManifest {
            root: ".".into(),
            entries: vec![e("a", Split::Train), e("a", Split::Train), e("b", Split::Val)],
        };
        assert!(ok.validate().is_ok());
        let bad = DatasetManifest {
            root: ".".into(),
            entries: vec![e("a", Split::Train), e("a", Split::Test)],
        };
        assert!(bad.validate().is_err());
    }
}
