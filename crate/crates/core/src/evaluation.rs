//! Confusion matrices, IoU reports and rendered summaries.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use latefuse_tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{argmax_labels, ClassProbabilityMap, LabelMask, Nomenclature, N_CLASSES};

/// Pixel counts, rows are ground truth and columns predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: Vec<[u64; N_CLASSES]>,
}

impl Default for ConfusionMatrix {
    fn default() -> Self {
        Self {
            counts: vec![[0; N_CLASSES]; N_CLASSES],
        }
    }
}

impl ConfusionMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth][pred]
    }

    pub fn rows(&self) -> &[[u64; N_CLASSES]] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn accumulate(&mut self, pred: &LabelMask, truth: &LabelMask) -> Result<()> {
        if pred.height() != truth.height() || pred.width() != truth.width() {
            return Err(Error::Shape(format!(
                "prediction {}x{} vs truth {}x{}",
                pred.height(),
                pred.width(),
                truth.height(),
                truth.width()
            )));
        }
        for (&p, &t) in pred.labels().iter().zip(truth.labels()) {
            self.counts[t as usize][p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        self.counts.iter().map(|r| r[c]).sum()
    }

    /// Each nonzero row divided by its sum; empty rows stay zero.
    pub fn row_normalized(&self) -> Vec<[f64; N_CLASSES]> {
        self.counts
            .iter()
            .map(|r| {
                let s: u64 = r.iter().sum();
                let mut out = [0.0; N_CLASSES];
                if s > 0 {
                    for (o, &v) in out.iter_mut().zip(r) {
                        *o = v as f64 / s as f64;
                    }
                }
                out
            })
            .collect()
    }
}

/// Confusion of the per-pixel argmax of `[B, 13, H, W]` probabilities.
pub fn confusion_from_probs<T: Scalar>(probs: &Tensor<T>, truth: &[LabelMask]) -> Result<ConfusionMatrix> {
    if probs.rank() != 4 || probs.dim(0) != truth.len() {
        return Err(Error::Shape(format!("{:?} probabilities for {} masks", probs.shape(), truth.len())));
    }
    let mut cm = ConfusionMatrix::new();
    for (i, t) in truth.iter().enumerate() {
        let p = ClassProbabilityMap::new(probs.narrow(0, i, 1)?.reshape(&probs.shape()[1..])?)?;
        cm.accumulate(&argmax_labels(&p), t)?;
    }
    Ok(cm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IoUReport {
    /// One entry per scored class; `None` when the class is absent from both
    /// truth and prediction.
    pub per_label: Vec<Option<f64>>,
    pub miou: f64,
    pub pixel_count: u64,
}

impl IoUReport {
    pub fn undefined(&self) -> Vec<usize> {
        self.per_label
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.is_none().then_some(i))
            .collect()
    }
}

/// Per-class IoU over the scored classes and their mean. `miou` is NaN when
/// no class is defined.
pub fn iou_report(cm: &ConfusionMatrix) -> IoUReport {
    let nom = Nomenclature::default();
    let per_label: Vec<Option<f64>> = nom
        .scored()
        .map(|c| {
            let tp = cm.get(c, c);
            let denom = cm.row_sum(c) + cm.col_sum(c) - tp;
            (denom > 0).then(|| tp as f64 / denom as f64)
        })
        .collect();
    let defined: Vec<f64> = per_label.iter().flatten().copied().collect();
    let miou = if defined.is_empty() {
        f64::NAN
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };
    IoUReport {
        per_label,
        miou,
        pixel_count: cm.total(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub model_id: String,
    pub per_label: Vec<Option<f64>>,
    pub miou: f64,
    pub pixel_count: u64,
}

#[derive(Debug, Clone)]
pub struct ReportFiles {
    pub table_markdown: PathBuf,
    pub table_csv: PathBuf,
    pub confusion_csv: PathBuf,
    pub heatmap: PathBuf,
    pub summary: PathBuf,
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{:.2}", 100.0 * v))
}

/// Per-label IoU table (labels as rows, one column per model), the
/// row-normalised confusion grid and heatmap, and a JSON summary.
pub fn render_reports(dir: &Path, reports: &[(String, IoUReport)], cm: &ConfusionMatrix) -> Result<ReportFiles> {
    if reports.is_empty() {
        return Err(Error::Empty("no reports to render".into()));
    }
    if let Some((id, _)) = reports.iter().find(|(_, r)| r.pixel_count == 0) {
        return Err(Error::Empty(format!("model '{id}' was evaluated on zero pixels")));
    }
    if cm.total() == 0 {
        return Err(Error::Empty("confusion matrix is empty".into()));
    }
    std::fs::create_dir_all(dir)?;
    let nom = Nomenclature::default();

    let mut md = String::from("| Label \\ Model |");
    let mut csv = String::from("label");
    for (id, _) in reports {
        let _ = write!(md, " {id} |");
        let _ = write!(csv, ",{id}");
    }
    md.push_str("\n|---|");
    md.push_str(&"---:|".repeat(reports.len()));
    md.push('\n');
    csv.push('\n');
    for (i, c) in nom.scored().enumerate() {
        let _ = write!(md, "| {} |", nom.name(c));
        let _ = write!(csv, "{}", nom.name(c));
        for (_, r) in reports {
            let _ = write!(md, " {} |", pct(r.per_label[i]));
            let _ = write!(csv, ",{}", pct(r.per_label[i]));
        }
        md.push('\n');
        csv.push('\n');
    }
    md.push_str("| **mIoU** |");
    csv.push_str("mIoU");
    for (_, r) in reports {
        let _ = write!(md, " **{}** |", pct(Some(r.miou)));
        let _ = write!(csv, ",{}", pct(Some(r.miou)));
    }
    md.push('\n');
    csv.push('\n');

    let norm = cm.row_normalized();
    let mut grid = String::from("truth\\pred");
    for c in 0..N_CLASSES {
        let _ = write!(grid, ",{}", nom.name(c));
    }
    grid.push('\n');
    for (t, row) in norm.iter().enumerate() {
        grid.push_str(nom.name(t));
        for v in row {
            let _ = write!(grid, ",{v:.6}");
        }
        grid.push('\n');
    }

    let files = ReportFiles {
        table_markdown: dir.join("iou_table.md"),
        table_csv: dir.join("iou_table.csv"),
        confusion_csv: dir.join("confusion.csv"),
        heatmap: dir.join("confusion.png"),
        summary: dir.join("summary.json"),
    };
    std::fs::write(&files.table_markdown, md)?;
    std::fs::write(&files.table_csv, csv)?;
    std::fs::write(&files.confusion_csv, grid)?;
    heatmap(&norm).save(&files.heatmap)?;
    let summaries: Vec<ModelSummary> = reports
        .iter()
        .map(|(id, r)| ModelSummary {
            model_id: id.clone(),
            per_label: r.per_label.clone(),
            miou: r.miou,
            pixel_count: r.pixel_count,
        })
        .collect();
    std::fs::write(&files.summary, serde_json::to_string_pretty(&summaries)?)?;
    Ok(files)
}

const CELL: u32 = 24;

fn heatmap(norm: &[[f64; N_CLASSES]]) -> RgbImage {
    let n = N_CLASSES as u32;
    RgbImage::from_fn(n * CELL, n * CELL, |x, y| {
        let v = norm[(y / CELL) as usize][(x / CELL) as usize].clamp(0.0, 1.0);
        let shade = |lo: f64, hi: f64| (lo + (hi - lo) * v).round() as u8;
        Rgb([shade(247.0, 8.0), shade(251.0, 48.0), shade(255.0, 107.0)])
    })
}
