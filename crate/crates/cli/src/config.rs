//! Experiment configuration: one TOML file, dotted-path overrides, presets
//! per scale profile and cross-field validation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use latefuse_core::aerial::AerialBranchConfig;
use latefuse_core::benchmark::TimingBudget;
use latefuse_core::dataset::SyntheticSpec;
use latefuse_core::fusion::FusionSpec;
use latefuse_core::model::Branch;
use latefuse_core::preprocess::FilterPolicy;
use latefuse_core::temporal::TemporalBranchConfig;
use latefuse_core::training::TrainConfig;
use latefuse_core::types::{ProfileName, ScaleProfile, N_CLASSES};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    /// A `manifest.jsonl` written by `gen-data` or by hand.
    Manifest(PathBuf),
    Synthetic(SyntheticSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scale: ScaleProfile,
    pub data: DataSource,
    pub filter: FilterPolicy,
    pub aerial: AerialBranchConfig,
    pub temporal: TemporalBranchConfig,
    pub fusion: FusionSpec,
    pub train: TrainConfig,
    /// Per-branch overrides of `train`, keyed by branch name.
    #[serde(default)]
    pub branch_train: BTreeMap<String, Table>,
    pub budget: TimingBudget,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    /// Defaults for a scale profile.
    pub fn preset(scale: ScaleProfile) -> Self {
        match scale.name() {
            ProfileName::Toy => {
                let mut temporal = Table::new();
                temporal.insert("lr_init".into(), Value::Float(1e-2));
                temporal.insert("max_epochs".into(), Value::Integer(40));
                temporal.insert("patience".into(), Value::Integer(40));
                Self {
                    scale,
                    data: DataSource::Synthetic(SyntheticSpec::new(scale, 64, 6, 0)),
                    filter: FilterPolicy::default(),
                    aerial: AerialBranchConfig::toy(),
                    temporal: TemporalBranchConfig::toy(),
                    fusion: FusionSpec::lf_dlm(),
                    train: TrainConfig {
                        lr_init: 5e-3,
                        lr_final: 5e-7,
                        max_epochs: 20,
                        patience: 20,
                        batch_size: 8,
                        ..TrainConfig::default()
                    },
                    branch_train: BTreeMap::from([("temporal".to_string(), temporal)]),
                    budget: TimingBudget::default(),
                    output_dir: PathBuf::from("runs/toy"),
                }
            }
            ProfileName::Full => Self {
                scale,
                data: DataSource::Synthetic(SyntheticSpec::new(scale, 50, 50, 0)),
                filter: FilterPolicy::default(),
                aerial: AerialBranchConfig::full(),
                temporal: TemporalBranchConfig::default(),
                fusion: FusionSpec::lf_dlm(),
                train: TrainConfig::default(),
                branch_train: BTreeMap::new(),
                budget: TimingBudget::default(),
                output_dir: PathBuf::from("runs/full"),
            },
        }
    }

    /// Reads `path` (or starts from nothing), applies `KEY=VALUE` overrides,
    /// fills unspecified fields from the preset of the chosen scale and
    /// validates. Relative paths resolve against the config file's directory.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let (mut user, base) = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
                let table: Table = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                (table, p.parent().map(Path::to_path_buf).unwrap_or_default())
            }
            None => (Table::new(), PathBuf::new()),
        };
        for o in overrides {
            apply_override(&mut user, o)?;
        }
        let mut cfg = resolve(user)?;
        cfg.output_dir = base.join(&cfg.output_dir);
        if let DataSource::Manifest(p) = &mut cfg.data {
            *p = base.join(&*p);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn digest(&self) -> Result<String> {
        Ok(hex(&Sha256::digest(self.to_toml()?.as_bytes())))
    }

    /// `train` with the branch's overrides applied.
    pub fn train_for(&self, branch: Branch) -> Result<TrainConfig> {
        let mut v = Value::try_from(&self.train)?;
        if let (Some(over), Value::Table(t)) = (self.branch_train.get(branch.as_str()), &mut v) {
            merge(t, over.clone());
        }
        v.try_into()
            .map_err(|e: toml::de::Error| CliError::Config(format!("branch_train.{branch}: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, e: latefuse_core::Error| CliError::Config(format!("{field}: {e}"));
        if let DataSource::Synthetic(spec) = &self.data {
            if spec.scale != self.scale {
                return Err(CliError::Config(format!(
                    "data.synthetic.scale ({}/{}) differs from scale ({}/{}); remove data.synthetic.scale to inherit it",
                    spec.scale.aerial_size(),
                    spec.scale.sits_size(),
                    self.scale.aerial_size(),
                    self.scale.sits_size()
                )));
            }
            spec.validate().map_err(|e| fail("data.synthetic", e))?;
        }
        self.filter.validate().map_err(|e| fail("filter", e))?;
        if self.aerial.n_classes != N_CLASSES || self.temporal.n_classes != N_CLASSES {
            return Err(CliError::Config(format!(
                "aerial.n_classes ({}) and temporal.n_classes ({}) must both be {N_CLASSES}",
                self.aerial.n_classes, self.temporal.n_classes
            )));
        }
        self.aerial.validate(self.scale.aerial_size()).map_err(|e| fail("aerial", e))?;
        self.temporal.validate(self.scale.sits_size()).map_err(|e| fail("temporal", e))?;
        self.fusion.validate().map_err(|e| fail("fusion", e))?;
        for m in &self.fusion.members {
            if m.branch.is_empty() || !m.branch.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') || m.branch == "fused" {
                return Err(CliError::Config(format!(
                    "fusion member '{}' must be a non-empty name of letters, digits, '_' or '-' other than 'fused'",
                    m.branch
                )));
            }
        }
        let known = match Value::try_from(TrainConfig::default())? {
            Value::Table(t) => t.keys().cloned().collect::<Vec<_>>(),
            _ => Vec::new(),
        };
        for (name, over) in &self.branch_train {
            name.parse::<Branch>().map_err(|e| fail("branch_train", e))?;
            if let Some(k) = over.keys().find(|k| !known.contains(k) && k.as_str() != "ignore_index") {
                return Err(CliError::Config(format!("branch_train.{name}.{k} is not a training option")));
            }
        }
        for b in Branch::ALL {
            self.train_for(b)?.validate().map_err(|e| fail(&format!("train ({b})"), e))?;
        }
        self.budget.validate().map_err(|e| fail("budget", e))?;
        Ok(())
    }

    /// Seed recorded in run manifests.
    pub fn seed(&self) -> u64 {
        self.train.seed
    }
}

fn resolve(mut user: Table) -> Result<ExperimentConfig> {
    let scale = match user.get("scale") {
        None => ScaleProfile::toy(),
        Some(Value::String(s)) => match s.as_str() {
            "toy" => ScaleProfile::toy(),
            "full" => ScaleProfile::full(),
            other => return Err(CliError::Config(format!("scale '{other}' is not 'toy' or 'full'"))),
        },
        Some(v) => v.clone().try_into().map_err(|e: toml::de::Error| CliError::Config(format!("scale: {e}")))?,
    };
    user.insert("scale".into(), Value::try_from(scale)?);
    let mut merged = match Value::try_from(ExperimentConfig::preset(scale))? {
        Value::Table(t) => t,
        _ => unreachable!("struct serialises to a table"),
    };
    if let Some(Value::Table(d)) = user.get("data") {
        if d.contains_key("manifest") {
            merged.remove("data");
        }
    }
    merge(&mut merged, user);
    Value::Table(merged).try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))
}

/// Recursively overlays `over` onto `base`; non-table values replace.
pub fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// `a.b.c=VALUE`; the value is read as TOML, falling back to a bare string.
pub fn apply_override(table: &mut Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override '{assignment}' is not KEY=VALUE")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("override key '{key}' has an empty segment")));
    }
    let raw = raw.trim();
    let value = match toml::from_str::<Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed"),
        Err(_) => Value::String(raw.to_string()),
    };
    let (last, parents) = path.split_last().expect("non-empty");
    let mut cur = table;
    for (i, p) in parents.iter().enumerate() {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => return Err(CliError::Config(format!("override '{key}': '{}' is not a table", path[..=i].join(".")))),
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_the_toy_preset() {
        let cfg = ExperimentConfig::load(None, &[]).unwrap();
        assert_eq!(cfg, ExperimentConfig::preset(ScaleProfile::toy()));
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let cfg = ExperimentConfig::load(
            None,
            &["train.seed=7".into(), "data.synthetic.n_samples=12".into(), "fusion.members=[{branch='aerial',weight=1.0}]".into()],
        )
        .unwrap();
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.seed(), 7);
        match &cfg.data {
            DataSource::Synthetic(s) => assert_eq!(s.n_samples, 12),
            other => panic!("{other:?}"),
        }
        assert_eq!(cfg.fusion.members.len(), 1);
    }

    #[test]
    fn branch_overrides_layer_on_train() {
        let cfg = ExperimentConfig::load(None, &["train.batch_size=4".into()]).unwrap();
        let t = cfg.train_for(Branch::Temporal).unwrap();
        assert_eq!((t.lr_init, t.batch_size, t.max_epochs), (1e-2, 4, 40));
        let a = cfg.train_for(Branch::Aerial).unwrap();
        assert_eq!((a.lr_init, a.max_epochs), (5e-3, 20));
    }

    #[test]
    fn digest_tracks_content() {
        let a = ExperimentConfig::load(None, &[]).unwrap();
        let b = ExperimentConfig::load(None, &["train.seed=1".into()]).unwrap();
        assert_eq!(a.digest().unwrap(), ExperimentConfig::load(None, &[]).unwrap().digest().unwrap());
        assert_ne!(a.digest().unwrap(), b.digest().unwrap());
        assert_eq!(a.digest().unwrap().len(), 64);
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = ExperimentConfig::load(None, &[]).unwrap();
        let back = resolve(toml::from_str(&cfg.to_toml().unwrap()).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn manifest_source_replaces_synthetic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.toml");
        fs::write(&path, "output_dir = \"out\"\n[data]\nmanifest = \"data/manifest.jsonl\"\n").unwrap();
        let cfg = ExperimentConfig::load(Some(&path), &[]).unwrap();
        assert_eq!(cfg.data, DataSource::Manifest(dir.path().join("data/manifest.jsonl")));
        assert_eq!(cfg.output_dir, dir.path().join("out"));
    }

    #[test]
    fn inconsistent_fields_are_rejected_with_the_field_name() {
        let cases = [
            ("scale.aerial_size=32", "scale"),
            ("temporal.widths=[32,32,64,64,64]", "temporal"),
            ("train.lr_final=1.0", "train"),
            ("fusion.members=[{branch='aerial',weight=0.5}]", "fusion"),
            ("branch_train.temporal.lr_max=1.0", "branch_train.temporal.lr_max"),
            ("branch_train.radar.lr_init=1.0", "branch_train"),
            ("data.synthetic.scale={name='toy',aerial_size=128,sits_size=32}", "data.synthetic.scale"),
            ("unknown_key=1", "unknown"),
        ];
        for (o, needle) in cases {
            let err = ExperimentConfig::load(None, &[o.to_string()]).unwrap_err();
            assert!(matches!(err, CliError::Config(_)), "{o}: {err}");
            assert!(err.to_string().contains(needle), "{o}: {err}");
        }
    }

    #[test]
    fn scale_shorthand_selects_the_full_preset() {
        let cfg = ExperimentConfig::load(None, &["scale=\"full\"".into()]).unwrap();
        assert_eq!(cfg.scale, ScaleProfile::full());
        assert_eq!(cfg.aerial, AerialBranchConfig::full());
    }

    #[test]
    fn bad_override_syntax() {
        let mut t = Table::new();
        assert!(apply_override(&mut t, "novalue").is_err());
        assert!(apply_override(&mut t, "a..b=1").is_err());
        apply_override(&mut t, "a=1").unwrap();
        assert!(apply_override(&mut t, "a.b=1").is_err());
        apply_override(&mut t, "p=some/path").unwrap();
        assert_eq!(t["p"], Value::String("some/path".into()));
    }
}
