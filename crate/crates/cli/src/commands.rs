//! Subcommand bodies. Each reads its prerequisites from the run directory,
//! writes its outputs there and records a run manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use latefuse_core::benchmark::{compare, published_reports, time_inference, TimingReport};
use latefuse_core::dataset::{generate_synthetic, load_sample, write_mask, write_sample, ChannelStats, DatasetManifest, ManifestEntry, Sample, Split, MANIFEST_FILE};
use latefuse_core::evaluation::{confusion_from_probs, iou_report, render_reports, ConfusionMatrix, IoUReport};
use latefuse_core::fusion::{fuse_probs, split_batch, FusionSpec};
use latefuse_core::model::{Branch, SegmentationModel};
use latefuse_core::preprocess::preprocess;
use latefuse_core::training::{train_model, EpochRecord, TrainSink};
use latefuse_core::types::{argmax_labels, ClassProbabilityMap, LabelMask, N_CLASSES};
use latefuse_core::dataset::Batch;
use latefuse_tensor::{load_params, read_tensors, write_tensors, Metadata, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{DataSource, ExperimentConfig};
use crate::error::{CliError, Result};
use crate::runs::{FileDigest, RunLock, RunManifest};
use crate::Command;

/// File locations inside a run directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn preprocessed_dir(&self) -> PathBuf {
        self.root.join("preprocessed")
    }

    pub fn preprocessed_manifest(&self) -> PathBuf {
        self.preprocessed_dir().join(MANIFEST_FILE)
    }

    pub fn stats(&self) -> PathBuf {
        self.preprocessed_dir().join("stats.json")
    }

    pub fn checkpoint(&self, b: Branch) -> PathBuf {
        self.root.join("models").join(format!("{b}.safetensors"))
    }

    pub fn history(&self, b: Branch) -> PathBuf {
        self.root.join("models").join(format!("{b}.history.jsonl"))
    }

    pub fn probs_dir(&self) -> PathBuf {
        self.root.join("probs")
    }

    pub fn probs(&self, name: &str) -> PathBuf {
        self.probs_dir().join(format!("{name}.safetensors"))
    }

    pub fn fused_labels(&self) -> PathBuf {
        self.root.join("fused")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn benchmark_json(&self) -> PathBuf {
        self.root.join("benchmark").join("benchmark.json")
    }

    pub fn benchmark_md(&self) -> PathBuf {
        self.root.join("benchmark").join("benchmark.md")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report.md")
    }
}

pub const FUSED: &str = "fused";

fn source_manifest(cfg: &ExperimentConfig, layout: &Layout) -> PathBuf {
    match &cfg.data {
        DataSource::Manifest(p) => p.clone(),
        DataSource::Synthetic(_) => layout.data_dir().join(MANIFEST_FILE),
    }
}

/// The file whose presence means the command has already run.
fn primary_output(cfg: &ExperimentConfig, layout: &Layout, cmd: &Command) -> Option<PathBuf> {
    match cmd {
        Command::GenData => match cfg.data {
            DataSource::Synthetic(_) => Some(layout.data_dir().join(MANIFEST_FILE)),
            DataSource::Manifest(_) => None,
        },
        Command::Preprocess => Some(layout.preprocessed_manifest()),
        Command::Train { branch } => Some(layout.checkpoint((*branch).into())),
        Command::Predict { branch, out, .. } => Some(out.clone().unwrap_or_else(|| layout.probs(Branch::from(*branch).as_str()))),
        Command::Fuse => Some(layout.probs(FUSED)),
        Command::Evaluate => Some(layout.reports_dir().join("summary.json")),
        Command::Benchmark { .. } => Some(layout.benchmark_json()),
        Command::Report => Some(layout.report()),
        Command::ShowConfig => None,
    }
}

fn require(paths: &[(PathBuf, &str)]) -> Result<()> {
    let missing: Vec<String> = paths
        .iter()
        .filter(|(p, _)| !p.exists())
        .map(|(p, hint)| format!("{} (run `latefuse {hint}` first)", p.display()))
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(CliError::MissingInputs(missing))
    }
}

pub fn execute(cfg: &ExperimentConfig, cmd: &Command, force: bool) -> Result<String> {
    if let Command::ShowConfig = cmd {
        return cfg.to_toml();
    }
    let layout = Layout::new(&cfg.output_dir);
    let _lock = RunLock::acquire(&layout.root)?;
    if let Some(p) = primary_output(cfg, &layout, cmd) {
        if p.exists() && !force {
            return Ok(format!("{} is up to date ({} exists; pass --force to redo)", cmd.name(), p.display()));
        }
    }
    let branch = cmd.branch();
    let seed = match branch {
        Some(b) => cfg.train_for(b)?.seed,
        None => cfg.seed(),
    };
    let mut manifest = RunManifest::new(cmd.name(), branch.map(Branch::as_str), cfg, seed)?;
    let summary = match cmd {
        Command::GenData => gen_data(cfg, &layout, &mut manifest)?,
        Command::Preprocess => preprocess_data(cfg, &layout, &mut manifest)?,
        Command::Train { branch } => train(cfg, &layout, (*branch).into(), &mut manifest)?,
        Command::Predict { branch, out, split } => {
            let out = out.clone().unwrap_or_else(|| layout.probs(Branch::from(*branch).as_str()));
            predict(cfg, &layout, (*branch).into(), (*split).into(), &out, &mut manifest)?
        }
        Command::Fuse => fuse(cfg, &layout, &mut manifest)?,
        Command::Evaluate => evaluate(cfg, &layout, &mut manifest)?,
        Command::Benchmark { warmup, reps } => benchmark(cfg, &layout, *warmup, *reps, &mut manifest)?,
        Command::Report => report(cfg, &layout, &mut manifest)?,
        Command::ShowConfig => unreachable!("handled above"),
    };
    let path = manifest.write(&layout.root)?;
    Ok(format!("{summary}\nrun manifest: {}", path.display()))
}

fn gen_data(cfg: &ExperimentConfig, layout: &Layout, rm: &mut RunManifest) -> Result<String> {
    match &cfg.data {
        DataSource::Synthetic(spec) => {
            let dir = layout.data_dir();
            if dir.exists() {
                fs::remove_dir_all(&dir)?;
            }
            let m = generate_synthetic::<f32>(spec, &dir)?;
            rm.outputs.push(FileDigest::of(&dir)?);
            Ok(format!("generated {} synthetic samples in {}", m.entries.len(), dir.display()))
        }
        DataSource::Manifest(p) => {
            require(&[(p.clone(), "gen-data with a synthetic data section")])?;
            let m = DatasetManifest::read(p)?;
            rm.inputs.push(FileDigest::of(p)?);
            let counts: Vec<String> = Split::ALL.iter().map(|s| format!("{s:?} {}", m.split(*s).len())).collect();
            Ok(format!("manifest {} is valid: {}", p.display(), counts.join(", ")))
        }
    }
}

fn preprocess_data(cfg: &ExperimentConfig, layout: &Layout, rm: &mut RunManifest) -> Result<String> {
    let src = source_manifest(cfg, layout);
    require(&[(src.clone(), "gen-data")])?;
    let manifest = DatasetManifest::read(&src)?;
    rm.inputs.push(FileDigest::of(&src)?);
    let out_dir = layout.preprocessed_dir();
    if out_dir.exists() {
        fs::remove_dir_all(&out_dir)?;
    }
    let mut entries = Vec::with_capacity(manifest.entries.len());
    let mut train = Vec::new();
    let mut frames = (0usize, 0usize);
    for e in &manifest.entries {
        let mut s: Sample<f32> = load_sample(&manifest, e)?;
        s.check_profile(&cfg.scale)?;
        frames.0 += s.sits.len();
        s.sits = preprocess(&s.sits, &cfg.filter)?;
        frames.1 += s.sits.len();
        let rel = Path::new("samples").join(s.patch_id());
        write_sample(&out_dir.join(&rel), &s)?;
        entries.push(ManifestEntry {
            sample_dir: rel,
            domain_id: e.domain_id.clone(),
            split: e.split,
        });
        if e.split == Split::Train {
            train.push(s);
        }
    }
    if train.is_empty() {
        return Err(latefuse_core::Error::Empty("the training split has no samples".into()).into());
    }
    let stats = ChannelStats::compute(&train)?;
    stats.write(&layout.stats())?;
    let out = DatasetManifest { root: out_dir.clone(), entries };
    out.write(&layout.preprocessed_manifest())?;
    rm.outputs.push(FileDigest::of(&out_dir)?);
    Ok(format!(
        "preprocessed {} samples: {} acquisitions reduced to {} monthly composites",
        out.entries.len(),
        frames.0,
        frames.1
    ))
}

/// Standardised samples of one split.
fn load_split(cfg: &ExperimentConfig, layout: &Layout, split: Split, rm: &mut RunManifest) -> Result<Vec<Sample<f32>>> {
    require(&[(layout.preprocessed_manifest(), "preprocess"), (layout.stats(), "preprocess")])?;
    let manifest = DatasetManifest::read(&layout.preprocessed_manifest())?;
    let stats = ChannelStats::read(&layout.stats())?;
    let pre = FileDigest::of(&layout.preprocessed_dir())?;
    if !rm.inputs.contains(&pre) {
        rm.inputs.push(pre);
    }
    let samples = manifest.load_split::<f32>(split)?;
    samples
        .iter()
        .map(|s| {
            s.check_profile(&cfg.scale)?;
            Ok(stats.apply(s)?)
        })
        .collect()
}

fn build_model(cfg: &ExperimentConfig, branch: Branch, seed: u64) -> Result<SegmentationModel<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(SegmentationModel::build(branch, &cfg.aerial, &cfg.temporal, &cfg.scale, &mut rng)?)
}

fn train(cfg: &ExperimentConfig, layout: &Layout, branch: Branch, rm: &mut RunManifest) -> Result<String> {
    let tc = cfg.train_for(branch)?;
    let train = load_split(cfg, layout, Split::Train, rm)?;
    let val = load_split(cfg, layout, Split::Val, rm)?;
    let model = build_model(cfg, branch, tc.seed)?;
    let mut metadata = Metadata::new();
    metadata.insert("config_digest".into(), rm.config_digest.clone());
    metadata.insert("seed".into(), tc.seed.to_string());
    let sink = TrainSink {
        checkpoint: layout.checkpoint(branch),
        history: layout.history(branch),
        metadata,
    };
    let out = train_model(&model, &train, &val, &tc, Some(&sink))?;
    rm.outputs.push(FileDigest::of(&sink.checkpoint)?);
    rm.outputs.push(FileDigest::of(&sink.history)?);
    Ok(format!(
        "trained {branch} for {} epochs{}; best validation mIoU {:.4} at epoch {}",
        out.history.len(),
        if out.stopped_early { " (early stop)" } else { "" },
        out.best_val_miou,
        out.best_epoch
    ))
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    }
}

fn predict(cfg: &ExperimentConfig, layout: &Layout, branch: Branch, split: Split, out: &Path, rm: &mut RunManifest) -> Result<String> {
    let ckpt = layout.checkpoint(branch);
    require(&[(ckpt.clone(), &format!("train --branch {branch}"))])?;
    let samples = load_split(cfg, layout, split, rm)?;
    if samples.is_empty() {
        return Err(latefuse_core::Error::Empty(format!("the {} split has no samples", split_name(split))).into());
    }
    let model = build_model(cfg, branch, 0)?;
    load_params(&model, &ckpt)?;
    rm.inputs.push(FileDigest::of(&ckpt)?);
    let mut maps: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
    for chunk in samples.chunks(cfg.train_for(branch)?.batch_size) {
        let batch = Batch::collate(&chunk.iter().collect::<Vec<_>>())?;
        let probs = model.probabilities(&batch)?;
        for (id, m) in batch.patch_ids.iter().zip(split_batch(&probs)?) {
            maps.insert(id.clone(), m.into_tensor());
        }
    }
    let mut meta = Metadata::new();
    meta.insert("branch".into(), branch.to_string());
    meta.insert("split".into(), split_name(split).into());
    meta.insert("config_digest".into(), rm.config_digest.clone());
    if let Some(dir) = out.parent() {
        fs::create_dir_all(dir)?;
    }
    write_tensors(out, maps.iter().map(|(k, v)| (k.clone(), v)), &meta)?;
    rm.outputs.push(FileDigest::of(out)?);
    Ok(format!("wrote {} {branch} probability maps to {}", maps.len(), out.display()))
}

fn read_probs(path: &Path) -> Result<(BTreeMap<String, Tensor<f32>>, Metadata)> {
    let (maps, meta) = read_tensors::<f32>(path)?;
    for (k, t) in &maps {
        if t.rank() != 3 || t.dim(0) != N_CLASSES {
            return Err(latefuse_core::Error::Shape(format!("{}: {k} has shape {:?}, expected [13, H, W]", path.display(), t.shape())).into());
        }
    }
    Ok((maps, meta))
}

fn fuse(cfg: &ExperimentConfig, layout: &Layout, rm: &mut RunManifest) -> Result<String> {
    let hint = |name: &str| match name.parse::<Branch>() {
        Ok(b) => format!("predict --branch {b}"),
        Err(_) => format!("predict --out {}", layout.probs(name).display()),
    };
    let needed: Vec<(PathBuf, String)> = cfg.fusion.members.iter().map(|m| (layout.probs(&m.branch), hint(&m.branch))).collect();
    require(&needed.iter().map(|(p, h)| (p.clone(), h.as_str())).collect::<Vec<_>>())?;
    let mut inputs = Vec::new();
    for (p, _) in &needed {
        rm.inputs.push(FileDigest::of(p)?);
        inputs.push(read_probs(p)?);
    }
    let keys: Vec<&String> = inputs[0].0.keys().collect();
    for (i, (maps, _)) in inputs.iter().enumerate().skip(1) {
        if maps.keys().collect::<Vec<_>>() != keys {
            return Err(latefuse_core::Error::Data {
                path: needed[i].0.clone(),
                msg: format!("patch ids differ from {}", needed[0].0.display()),
            }
            .into());
        }
    }
    let labels_dir = layout.fused_labels();
    if labels_dir.exists() {
        fs::remove_dir_all(&labels_dir)?;
    }
    fs::create_dir_all(&labels_dir)?;
    let mut fused = BTreeMap::new();
    for k in keys {
        let maps: Vec<&Tensor<f32>> = inputs.iter().map(|(m, _)| &m[k]).collect();
        let f = ClassProbabilityMap::new(fuse_probs(&maps, &cfg.fusion)?)?;
        write_mask(&labels_dir.join(format!("{k}.png")), &argmax_labels(&f))?;
        fused.insert(k.clone(), f.into_tensor());
    }
    let mut meta = inputs[0].1.clone();
    meta.insert("branch".into(), FUSED.into());
    meta.insert("config_digest".into(), rm.config_digest.clone());
    let weights: Vec<String> = cfg.fusion.members.iter().map(|m| format!("{}={}", m.branch, m.weight)).collect();
    meta.insert("fusion".into(), weights.join(","));
    let out = layout.probs(FUSED);
    write_tensors(&out, fused.iter().map(|(k, v)| (k.clone(), v)), &meta)?;
    rm.outputs.push(FileDigest::of(&out)?);
    rm.outputs.push(FileDigest::of(&labels_dir)?);
    Ok(format!("fused {} maps ({}) into {}", fused.len(), weights.join(", "), out.display()))
}

fn reference_masks(cfg: &ExperimentConfig, layout: &Layout, split: Split, rm: &mut RunManifest) -> Result<BTreeMap<String, LabelMask>> {
    let samples = load_split(cfg, layout, split, rm)?;
    samples
        .into_iter()
        .map(|s| {
            let id = s.patch_id().to_string();
            let m = s.mask.ok_or_else(|| latefuse_core::Error::Missing(format!("reference mask for {id}")))?;
            Ok((id, m))
        })
        .collect()
}

fn score(maps: &BTreeMap<String, Tensor<f32>>, masks: &BTreeMap<String, LabelMask>, path: &Path) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new();
    for (k, t) in maps {
        let truth = masks
            .get(k)
            .ok_or_else(|| latefuse_core::Error::Data { path: path.to_path_buf(), msg: format!("{k} has no reference mask") })?;
        let batch = t.clone().reshape(&[1, N_CLASSES, t.dim(1), t.dim(2)])?;
        cm.merge(&confusion_from_probs(&batch, std::slice::from_ref(truth))?);
    }
    Ok(cm)
}

fn evaluate(cfg: &ExperimentConfig, layout: &Layout, rm: &mut RunManifest) -> Result<String> {
    let dir = layout.probs_dir();
    let mut files: Vec<PathBuf> = if dir.is_dir() {
        fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "safetensors"))
            .collect()
    } else {
        Vec::new()
    };
    if files.is_empty() {
        return Err(CliError::MissingInputs(vec![format!("{}/*.safetensors (run `latefuse predict` first)", dir.display())]));
    }
    files.sort_by_key(|p| (p.file_stem().is_some_and(|s| s == FUSED), p.clone()));
    let mut masks: BTreeMap<Split, BTreeMap<String, LabelMask>> = BTreeMap::new();
    let mut reports: Vec<(String, IoUReport)> = Vec::new();
    let mut last_cm = ConfusionMatrix::new();
    for p in &files {
        let (maps, meta) = read_probs(p)?;
        let split = match meta.get("split").map(String::as_str) {
            Some("train") => Split::Train,
            Some("val") => Split::Val,
            _ => Split::Test,
        };
        if !masks.contains_key(&split) {
            let m = reference_masks(cfg, layout, split, rm)?;
            masks.insert(split, m);
        }
        rm.inputs.push(FileDigest::of(p)?);
        let cm = score(&maps, &masks[&split], p)?;
        let name = p.file_stem().expect("file").to_string_lossy().into_owned();
        reports.push((name, iou_report(&cm)));
        last_cm = cm;
    }
    let files = render_reports(&layout.reports_dir(), &reports, &last_cm)?;
    for f in [&files.table_markdown, &files.table_csv, &files.confusion_csv, &files.heatmap, &files.summary] {
        rm.outputs.push(FileDigest::of(f)?);
    }
    let mut out = String::new();
    for (name, r) in &reports {
        let _ = writeln!(out, "{name}: mIoU {:.4} over {} pixels", r.miou, r.pixel_count);
    }
    let _ = write!(out, "reports in {}", layout.reports_dir().display());
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkRecord {
    pub batch_size: usize,
    pub warmup: usize,
    pub reps: usize,
    pub trained_weights: bool,
    pub reports: Vec<TimingReport>,
}

fn benchmark(cfg: &ExperimentConfig, layout: &Layout, warmup: usize, reps: usize, rm: &mut RunManifest) -> Result<String> {
    let samples = load_split(cfg, layout, Split::Test, rm)?;
    let n = cfg.train.batch_size.min(samples.len());
    if n == 0 {
        return Err(latefuse_core::Error::Empty("the test split has no samples".into()).into());
    }
    let batch = Batch::collate(&samples[..n].iter().collect::<Vec<_>>())?;
    let mut trained = true;
    let mut models = Vec::new();
    for b in Branch::ALL {
        let m = build_model(cfg, b, cfg.seed())?;
        let ckpt = layout.checkpoint(b);
        if ckpt.exists() {
            load_params(&m, &ckpt)?;
            rm.inputs.push(FileDigest::of(&ckpt)?);
        } else {
            trained = false;
        }
        models.push(m);
    }
    let spec = FusionSpec::lf_dlm();
    let (aerial, temporal) = (&models[0], &models[1]);
    let ta = time_inference(warmup, reps, || aerial.probabilities(&batch).map(|_| ()))?;
    let tt = time_inference(warmup, reps, || temporal.probabilities(&batch).map(|_| ()))?;
    let tf = time_inference(warmup, reps, || {
        let a = aerial.probabilities(&batch)?;
        let t = temporal.probabilities(&batch)?;
        fuse_probs(&[&a, &t], &spec).map(|_| ())
    })?;
    let reports = vec![
        TimingReport::new("temporal", tt, &cfg.budget),
        TimingReport::new("aerial", ta, &cfg.budget),
        TimingReport::new("LF-DLM", tf, &cfg.budget),
    ];
    let record = BenchmarkRecord {
        batch_size: n,
        warmup,
        reps,
        trained_weights: trained,
        reports,
    };
    let json = layout.benchmark_json();
    fs::create_dir_all(json.parent().expect("has parent"))?;
    fs::write(&json, serde_json::to_string_pretty(&record)?)?;
    let table = compare(&record.reports);
    let md = format!(
        "Median of {reps} runs on a batch of {n}, relative to a {} s baseline.\n\n```\n{table}```\n\nPublished full-scale timings:\n\n```\n{}```\n",
        cfg.budget.baseline_seconds,
        compare(&published_reports())
    );
    fs::write(layout.benchmark_md(), md)?;
    rm.outputs.push(FileDigest::of(&json)?);
    rm.outputs.push(FileDigest::of(&layout.benchmark_md())?);
    Ok(table)
}

fn report(_cfg: &ExperimentConfig, layout: &Layout, rm: &mut RunManifest) -> Result<String> {
    let table = layout.reports_dir().join("iou_table.md");
    require(&[(table.clone(), "evaluate")])?;
    let mut out = String::from("# Run report\n\n## Segmentation\n\n");
    out.push_str(&fs::read_to_string(&table)?);
    rm.inputs.push(FileDigest::of(&table)?);
    out.push_str("\n## Training\n\n");
    for b in Branch::ALL {
        let h = layout.history(b);
        if !h.exists() {
            let _ = writeln!(out, "- {b}: not trained");
            continue;
        }
        let records: Vec<EpochRecord> = fs::read_to_string(&h)?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        rm.inputs.push(FileDigest::of(&h)?);
        match records.iter().max_by(|a, b| a.val_miou.total_cmp(&b.val_miou)) {
            Some(best) => {
                let _ = writeln!(
                    out,
                    "- {b}: {} epochs, best validation mIoU {:.4} at epoch {} (train loss {:.4})",
                    records.len(),
                    best.val_miou,
                    best.epoch,
                    best.train_loss
                );
            }
            None => {
                let _ = writeln!(out, "- {b}: empty history");
            }
        }
    }
    let bench = layout.benchmark_md();
    if bench.exists() {
        out.push_str("\n## Inference time\n\n");
        out.push_str(&fs::read_to_string(&bench)?);
        rm.inputs.push(FileDigest::of(&bench)?);
    }
    fs::write(layout.report(), &out)?;
    rm.outputs.push(FileDigest::of(&layout.report())?);
    Ok(format!("wrote {}", layout.report().display()))
}
