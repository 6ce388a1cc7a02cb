//! Combined cross-entropy and Dice objective, AdamW with polynomial decay,
//! early stopping and the epoch loop shared by both branches.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use latefuse_tensor::{no_grad, save_params, Gradients, HasParams, Metadata, Mode, Param, ParamId, Scalar, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{augment, Batch, ChannelStats, Sample};
use crate::error::{Error, Result};
use crate::evaluation::{confusion_from_probs, iou_report, ConfusionMatrix};
use crate::model::SegmentationModel;
use crate::preprocess::{preprocess, FilterPolicy};
use crate::types::{LabelMask, N_CLASSES};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub ce: f64,
    pub dice: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { ce: 1.0, dice: 1.0 }
    }
}

pub const DICE_SMOOTHING: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr_init: f64,
    pub lr_final: f64,
    pub decay_power: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub loss_weights: LossWeights,
    pub seed: u64,
    /// Class left out of the loss entirely. `None` keeps every class.
    pub ignore_index: Option<u8>,
    pub weight_decay: f64,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_init: 1e-4,
            lr_final: 1e-7,
            decay_power: 1.0,
            max_epochs: 30,
            patience: 15,
            batch_size: 12,
            loss_weights: LossWeights::default(),
            seed: 0,
            ignore_index: None,
            weight_decay: 0.01,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(format!("train: {m}")));
        if !(self.lr_final > 0.0 && self.lr_final < self.lr_init && self.lr_init.is_finite()) {
            return fail(format!("need 0 < lr_final < lr_init, got {} and {}", self.lr_final, self.lr_init));
        }
        if !(self.decay_power > 0.0) {
            return fail(format!("decay_power {} must be positive", self.decay_power));
        }
        if self.max_epochs == 0 || self.patience == 0 || self.patience > self.max_epochs {
            return fail(format!("need 0 < patience ({}) <= max_epochs ({})", self.patience, self.max_epochs));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        let w = self.loss_weights;
        if !(w.ce >= 0.0 && w.dice >= 0.0 && w.ce + w.dice > 0.0) {
            return fail(format!("loss weights ({}, {}) must be nonnegative and not both zero", w.ce, w.dice));
        }
        if self.ignore_index.is_some_and(|c| c as usize >= N_CLASSES) {
            return fail(format!("ignore_index {:?} is not a class", self.ignore_index));
        }
        if !(self.weight_decay >= 0.0) {
            return fail(format!("weight_decay {} must be nonnegative", self.weight_decay));
        }
        Ok(())
    }
}

/// Polynomial decay from `lr_init` at step 0 to `lr_final` at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> Result<f64> {
    if step > total_steps {
        return Err(Error::config(format!("step {step} beyond {total_steps} total steps")));
    }
    if step == 0 {
        return Ok(cfg.lr_init);
    }
    let w = (1.0 - step as f64 / total_steps as f64).powf(cfg.decay_power);
    Ok(cfg.lr_final + (cfg.lr_init - cfg.lr_final) * w)
}

/// `ce·CE + dice·Dice` over `[B, C, H, W]` logits. CE averages the negative
/// log-likelihood over kept pixels. Dice is one minus the smoothed soft Dice
/// averaged over all `C` classes.
pub fn combined_loss<T: Scalar>(logits: &Var<T>, targets: &[LabelMask], weights: LossWeights, ignore_index: Option<u8>) -> Result<Var<T>> {
    let s = logits.shape();
    if s.len() != 4 || s[0] != targets.len() {
        return Err(Error::Shape(format!("logits {s:?} for {} masks", targets.len())));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    if let Some(m) = targets.iter().find(|m| m.height() != h || m.width() != w) {
        return Err(Error::Shape(format!("mask {}x{} vs logits {h}x{w}", m.height(), m.width())));
    }
    let n = b * h * w;
    let mut onehot = vec![T::zero(); n * c];
    let mut keep = vec![T::zero(); n];
    let mut kept = 0usize;
    for (bi, m) in targets.iter().enumerate() {
        for (i, &l) in m.labels().iter().enumerate() {
            if l as usize >= c {
                return Err(Error::InvalidClass { id: l as usize, max: c - 1 });
            }
            if Some(l) == ignore_index {
                continue;
            }
            let row = bi * h * w + i;
            onehot[row * c + l as usize] = T::one();
            keep[row] = T::one();
            kept += 1;
        }
    }
    if kept == 0 {
        return Err(Error::Empty("every target pixel is ignored".into()));
    }
    let g = Var::constant(Tensor::new(&[n, c], onehot)?);
    let keep = Var::constant(Tensor::new(&[n, 1], keep)?);

    let logp = logits.permute(&[0, 2, 3, 1])?.reshape(&[n, c])?.log_softmax_last()?;
    let ce = logp.mul(&g)?.sum_all()?.scale(-1.0 / kept as f64);
    let p = logp.exp().mul(&keep)?;
    let inter = p.mul(&g)?.sum_axis(0, false)?;
    let denom = p.sum_axis(0, false)?.add(&g.sum_axis(0, false)?)?;
    let per_class = inter.scale(2.0).affine(1.0, DICE_SMOOTHING).div(&denom.affine(1.0, DICE_SMOOTHING))?;
    let dice = per_class.mean_all()?.affine(-1.0, 1.0);
    Ok(ce.scale(weights.ce).add(&dice.scale(weights.dice))?)
}

/// Decoupled weight decay Adam.
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    steps: i32,
    moments: BTreeMap<ParamId, (Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            steps: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.steps
    }

    pub fn step(&mut self, params: &[&Param<T>], grads: &Gradients<T>, lr: f64) -> Result<()> {
        self.steps += 1;
        let c1 = 1.0 - self.beta1.powi(self.steps);
        let c2 = 1.0 - self.beta2.powi(self.steps);
        for p in params.iter().filter(|p| p.is_trainable()) {
            let Some(g) = grads.param(p) else { continue };
            let (m, v) = self
                .moments
                .entry(p.id())
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            let (b1, b2, eps, decay) = (self.beta1, self.beta2, self.eps, 1.0 - lr * self.weight_decay);
            p.update(|w| {
                for (((w, &g), m), v) in w.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                    let g = g.as_f64();
                    let mf = b1 * m.as_f64() + (1.0 - b1) * g;
                    let vf = b2 * v.as_f64() + (1.0 - b2) * g * g;
                    *m = T::of(mf);
                    *v = T::of(vf);
                    let upd = lr * (mf / c1) / ((vf / c2).sqrt() + eps);
                    *w = T::of(w.as_f64() * decay - upd);
                }
            });
        }
        Ok(())
    }
}

/// Counts epochs without a strict decrease of the monitored loss.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub epochs_since_improvement: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            epochs_since_improvement: 0,
        }
    }

    /// Records one epoch; true when training should stop.
    pub fn observe(&mut self, val_loss: f64) -> bool {
        if val_loss < self.best {
            self.best = val_loss;
            self.epochs_since_improvement = 0;
        } else {
            self.epochs_since_improvement += 1;
        }
        self.epochs_since_improvement >= self.patience
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: usize,
    pub global_step: usize,
    pub best_val_metric: f64,
    pub epochs_since_improvement: usize,
    pub rng_word_pos: u128,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_miou: f64,
    pub lr: f64,
}

/// Where the epoch loop writes its best checkpoint and history lines.
#[derive(Debug, Clone)]
pub struct TrainSink {
    pub checkpoint: PathBuf,
    pub history: PathBuf,
    pub metadata: Metadata,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_miou: f64,
    pub stopped_early: bool,
    pub state: TrainState,
}

/// Model, optimizer and RNG for step-wise training.
pub struct Trainer<'m, T: Scalar> {
    pub model: &'m SegmentationModel<T>,
    pub config: TrainConfig,
    pub optimizer: AdamW<T>,
    pub rng: ChaCha8Rng,
}

impl<'m, T: Scalar> Trainer<'m, T> {
    pub fn new(model: &'m SegmentationModel<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            model,
            optimizer: AdamW::new(config.weight_decay),
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x7a11_5eed),
            config,
        })
    }

    pub fn loss(&self, batch: &Batch<T>, mode: Mode) -> Result<Var<T>> {
        let logits = self.model.supervised_logits(batch, mode)?;
        combined_loss(&logits, &self.model.targets(batch)?, self.config.loss_weights, self.config.ignore_index)
    }

    /// One optimizer update. Returns the batch loss.
    pub fn step(&mut self, batch: &Batch<T>, lr: f64) -> Result<f64> {
        let loss = self.loss(batch, Mode::Train)?;
        let value = loss.value().data()[0].as_f64();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                loss: value,
                epoch: 0,
                step: self.optimizer.steps() as usize,
            });
        }
        let grads = loss.backward()?;
        let params: Vec<&Param<T>> = self.model.named_params().into_iter().map(|(_, p)| p).collect();
        self.optimizer.step(&params, &grads, lr)?;
        Ok(value)
    }

    /// Shuffled, optionally augmented batches for one epoch.
    pub fn epoch_batches(&mut self, samples: &[Sample<T>]) -> Result<Vec<Batch<T>>> {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut self.rng);
        order
            .chunks(self.config.batch_size)
            .map(|idx| {
                let owned: Vec<Sample<T>> = idx
                    .iter()
                    .map(|&i| if self.config.augment { augment(&samples[i], &mut self.rng) } else { Ok(samples[i].clone()) })
                    .collect::<Result<_>>()?;
                Batch::collate(&owned.iter().collect::<Vec<_>>())
            })
            .collect()
    }
}

/// Confusion matrix and mean loss in evaluation mode.
pub fn evaluate_model<T: Scalar>(
    model: &SegmentationModel<T>,
    samples: &[Sample<T>],
    cfg: &TrainConfig,
) -> Result<(ConfusionMatrix, f64)> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluation split".into()));
    }
    let mut cm = ConfusionMatrix::new();
    let mut loss_sum = 0.0;
    for chunk in samples.chunks(cfg.batch_size) {
        let batch = Batch::collate(&chunk.iter().collect::<Vec<_>>())?;
        let labels = batch.labels.clone().ok_or_else(|| Error::Missing("evaluation samples need masks".into()))?;
        let loss = no_grad(|| -> Result<f64> {
            let logits = model.supervised_logits(&batch, Mode::Eval)?;
            let l = combined_loss(&logits, &model.targets(&batch)?, cfg.loss_weights, cfg.ignore_index)?;
            Ok(l.value().data()[0].as_f64())
        })?;
        loss_sum += loss * chunk.len() as f64;
        cm.merge(&confusion_from_probs(&model.probabilities(&batch)?, &labels)?);
    }
    Ok((cm, loss_sum / samples.len() as f64))
}

fn snapshot<T: Scalar>(model: &impl HasParams<T>) -> Vec<Tensor<T>> {
    model.named_params().into_iter().map(|(_, p)| (*p.value()).clone()).collect()
}

fn restore<T: Scalar>(model: &impl HasParams<T>, values: &[Tensor<T>]) -> Result<()> {
    for ((_, p), v) in model.named_params().into_iter().zip(values) {
        p.set(v.clone())?;
    }
    Ok(())
}

/// Epoch loop: trains on `train`, validates on `val` each epoch, stops on
/// the patience rule over validation loss and leaves the model holding the
/// weights of the epoch with the best validation mIoU.
pub fn train_model<T: Scalar>(
    model: &SegmentationModel<T>,
    train: &[Sample<T>],
    val: &[Sample<T>],
    cfg: &TrainConfig,
    sink: Option<&TrainSink>,
) -> Result<TrainOutcome> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Empty(format!("training needs train and val samples, got {} and {}", train.len(), val.len())));
    }
    let mut trainer = Trainer::new(model, cfg.clone())?;
    let total_steps = cfg.max_epochs * train.len().div_ceil(cfg.batch_size);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut history = Vec::new();
    let mut best: Option<(usize, f64, Vec<Tensor<T>>)> = None;
    let mut step = 0usize;
    let mut stopped_early = false;
    if let Some(s) = sink {
        if let Some(dir) = s.history.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(&s.history, "")?;
    }

    for epoch in 1..=cfg.max_epochs {
        let batches = trainer.epoch_batches(train)?;
        let mut loss_sum = 0.0;
        let mut lr = cfg.lr_init;
        for b in &batches {
            lr = lr_at(step, total_steps, cfg)?;
            let l = trainer.step(b, lr).map_err(|e| match e {
                Error::NonFinite { loss, .. } => Error::NonFinite { loss, epoch, step },
                other => other,
            })?;
            loss_sum += l * b.len() as f64;
            step += 1;
        }
        let (cm, val_loss) = evaluate_model(model, val, cfg)?;
        let val_miou = iou_report(&cm).miou;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_loss,
            val_miou,
            lr,
        };
        if let Some(s) = sink {
            let mut f = fs::OpenOptions::new().append(true).open(&s.history)?;
            writeln!(f, "{}", serde_json::to_string(&record)?)?;
        }
        history.push(record);

        let improved = match &best {
            None => true,
            Some((_, m, _)) => val_miou > *m || (m.is_nan() && !val_miou.is_nan()),
        };
        if improved {
            best = Some((epoch, val_miou, snapshot(model)));
            if let Some(s) = sink {
                save_checkpoint(model, &s.checkpoint, &s.metadata, epoch, val_miou)?;
            }
        }
        if stopper.observe(val_loss) {
            stopped_early = epoch < cfg.max_epochs;
            break;
        }
    }

    let (best_epoch, best_val_miou, weights) = best.expect("at least one epoch ran");
    restore(model, &weights)?;
    Ok(TrainOutcome {
        state: TrainState {
            epoch: history.len(),
            global_step: step,
            best_val_metric: best_val_miou,
            epochs_since_improvement: stopper.epochs_since_improvement,
            rng_word_pos: trainer.rng.get_word_pos(),
        },
        history,
        best_epoch,
        best_val_miou,
        stopped_early,
    })
}

fn save_checkpoint<T: Scalar>(model: &SegmentationModel<T>, path: &Path, metadata: &Metadata, epoch: usize, miou: f64) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut meta = metadata.clone();
    meta.insert("branch".into(), model.branch().to_string());
    meta.insert("epoch".into(), epoch.to_string());
    meta.insert("val_miou".into(), miou.to_string());
    save_params(model, path, &meta)?;
    Ok(())
}

/// Filters and composites every series. Samples whose series has no usable
/// acquisition are an error naming the patch.
pub fn preprocess_samples<T: Scalar>(samples: Vec<Sample<T>>, policy: &FilterPolicy) -> Result<Vec<Sample<T>>> {
    samples
        .into_iter()
        .map(|mut s| {
            s.sits = preprocess(&s.sits, policy)?;
            Ok(s)
        })
        .collect()
}

/// Standardises every split with statistics of the first.
pub fn standardize_splits<T: Scalar>(splits: &mut [Vec<Sample<T>>]) -> Result<ChannelStats> {
    let stats = ChannelStats::compute(splits.first().map(Vec::as_slice).unwrap_or_default())?;
    for split in splits.iter_mut() {
        for s in split.iter_mut() {
            *s = stats.apply(s)?;
        }
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aerial::AerialBranchConfig;
    use crate::dataset::{synthesize_sample, SyntheticSpec};
    use crate::model::Branch;
    use crate::temporal::TemporalBranchConfig;
    use crate::types::ScaleProfile;
    use latefuse_tensor::gradcheck::check_gradients;
    use proptest::prelude::*;

    fn masks(labels: &[u8], b: usize, h: usize, w: usize) -> Vec<LabelMask> {
        labels.chunks(h * w).take(b).map(|c| LabelMask::new(h, w, c.to_vec()).unwrap()).collect()
    }

    #[test]
    fn uniform_two_class_closed_form() {
        let logits = Var::constant(Tensor::<f64>::zeros(&[1, 2, 2, 2]));
        let l = combined_loss(&logits, &masks(&[0; 4], 1, 2, 2), LossWeights::default(), None).unwrap();
        // class 0: (2·2 + 1) / (2 + 4 + 1); class 1: (0 + 1) / (2 + 0 + 1)
        let dice = 1.0 - (5.0 / 7.0 + 1.0 / 3.0) / 2.0;
        let expected = std::f64::consts::LN_2 + dice;
        assert!((l.value().data()[0] - expected).abs() < 1e-12);
        assert!((expected - 1.169337).abs() < 1e-6);
        let ce_only = combined_loss(&logits, &masks(&[0; 4], 1, 2, 2), LossWeights { ce: 1.0, dice: 0.0 }, None).unwrap();
        assert!((ce_only.value().data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn sharp_logits_drive_loss_down() {
        let target = masks(&[0, 1, 1, 0], 1, 2, 2);
        let at = |k: f64| {
            let logits = Tensor::from_fn(&[1, 2, 2, 2], |i| {
                let (c, p) = (i / 4, i % 4);
                if target[0].labels()[p] as usize == c { k } else { -k }
            });
            combined_loss(&Var::constant(logits), &target, LossWeights::default(), None).unwrap().value().data()[0]
        };
        let (a, b, c) = (at(1.0), at(5.0), at(30.0));
        assert!(a > b && b > c && c < 1e-6, "{a} {b} {c}");
    }

    #[test]
    fn ignored_pixels_do_not_matter() {
        let logits = Tensor::<f64>::from_fn(&[1, 3, 2, 2], |i| (i as f64 * 0.7).sin());
        let mut moved = logits.clone();
        for c in 0..3 {
            moved.data_mut()[c * 4 + 2] += 5.0 * c as f64;
            moved.data_mut()[c * 4 + 3] -= 3.0;
        }
        let t = masks(&[0, 1, 2, 2], 1, 2, 2);
        let a = combined_loss(&Var::constant(logits.clone()), &t, LossWeights::default(), Some(2)).unwrap();
        let b = combined_loss(&Var::constant(moved.clone()), &t, LossWeights::default(), Some(2)).unwrap();
        assert!((a.value().data()[0] - b.value().data()[0]).abs() < 1e-12);
        let c = combined_loss(&Var::constant(moved), &t, LossWeights::default(), None).unwrap();
        assert!((a.value().data()[0] - c.value().data()[0]).abs() > 1e-3);
        assert!(combined_loss(&Var::constant(logits.clone()), &masks(&[2; 4], 1, 2, 2), LossWeights::default(), Some(2)).is_err());
        assert!(combined_loss(&Var::constant(logits), &masks(&[3; 4], 1, 2, 2), LossWeights::default(), None).is_err());
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let logits = Tensor::<f64>::from_fn(&[2, 4, 2, 2], |i| ((i * 37) % 11) as f64 / 4.0 - 1.3);
        let target = masks(&[0, 3, 1, 1, 2, 2, 0, 3], 2, 2, 2);
        let report = check_gradients(&[logits], 1e-6, |v| {
            Ok(combined_loss(&v[0], &target, LossWeights::default(), None).expect("loss"))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, 1000, &cfg).unwrap(), 1e-4);
        assert_eq!(lr_at(1000, 1000, &cfg).unwrap(), 1e-7);
        assert!((lr_at(500, 1000, &cfg).unwrap() - 5.005e-5).abs() < 1e-18);
        assert!(lr_at(1001, 1000, &cfg).is_err());
    }

    #[test]
    fn early_stopping_counts_flat_epochs() {
        let mut s = EarlyStopping::new(2);
        assert!(!s.observe(1.0));
        assert!(!s.observe(1.0));
        assert!(s.observe(1.0));
        let mut s = EarlyStopping::new(2);
        assert!(!s.observe(1.0));
        assert!(!s.observe(1.5));
        assert!(!s.observe(0.5));
        assert_eq!(s.epochs_since_improvement, 0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { lr_final: 1e-3, ..TrainConfig::default() },
            TrainConfig { patience: 31, ..TrainConfig::default() },
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { ignore_index: Some(13), ..TrainConfig::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let p = Param::new(Tensor::<f64>::new(&[2], vec![1.0, -1.0]).unwrap());
        let loss = p.var().mul(&Var::constant(Tensor::new(&[2], vec![3.0, -0.5]).unwrap())).unwrap().sum_all().unwrap();
        let g = loss.backward().unwrap();
        let mut opt = AdamW::new(0.0);
        opt.step(&[&p], &g, 0.1).unwrap();
        let v = p.value();
        assert!((v.data()[0] - 0.9).abs() < 1e-6 && (v.data()[1] + 0.9).abs() < 1e-6);
        let mut decayed = AdamW::new(0.5);
        let q = Param::new(Tensor::<f64>::new(&[1], vec![2.0]).unwrap());
        let g = q.var().scale(0.0).sum_all().unwrap().backward().unwrap();
        decayed.step(&[&q], &g, 0.1).unwrap();
        assert!((q.value().data()[0] - 1.9).abs() < 1e-12);
    }

    fn tiny_run(seed: u64, patience: usize, epochs: usize) -> (TrainOutcome, Vec<Tensor<f64>>) {
        let profile = ScaleProfile::toy_with(32);
        let spec = SyntheticSpec::new(profile, 4, 3, 5);
        let samples: Vec<Sample<f64>> = (0..4).map(|i| synthesize_sample(&spec, i).unwrap()).collect();
        let mut splits = vec![preprocess_samples(samples, &FilterPolicy::new(0.5, 1.0).unwrap()).unwrap()];
        standardize_splits(&mut splits).unwrap();
        let s = splits.pop().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = SegmentationModel::build(Branch::Temporal, &AerialBranchConfig::toy(), &TemporalBranchConfig::toy(), &profile, &mut rng).unwrap();
        let cfg = TrainConfig {
            max_epochs: epochs,
            patience,
            batch_size: 2,
            seed,
            lr_init: 1e-3,
            ..TrainConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let sink = TrainSink {
            checkpoint: dir.path().join("ckpt.safetensors"),
            history: dir.path().join("history.jsonl"),
            metadata: Metadata::new(),
        };
        let out = train_model(&model, &s[..3], &s[3..], &cfg, Some(&sink)).unwrap();
        let lines = fs::read_to_string(&sink.history).unwrap().lines().count();
        assert_eq!(lines, out.history.len());
        let (tensors, meta) = latefuse_tensor::read_tensors::<f64>(&sink.checkpoint).unwrap();
        assert_eq!(meta["epoch"], out.best_epoch.to_string());
        assert_eq!(tensors.len(), model.named_params().len());
        (out, snapshot(&model))
    }

    #[test]
    fn training_is_reproducible_and_keeps_best() {
        let (a, wa) = tiny_run(3, 3, 3);
        let (b, wb) = tiny_run(3, 3, 3);
        assert_eq!(a.history, b.history);
        assert_eq!(wa, wb);
        let best = a.history.iter().map(|r| r.val_miou).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(a.best_val_miou, best);
        assert!(a.history.iter().all(|r| r.train_loss.is_finite()));
        assert!(a.history.windows(2).all(|w| w[1].lr <= w[0].lr));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn loss_nonnegative_and_shuffle_invariant(vals in prop::collection::vec(-4.0f64..4.0, 3 * 8), labels in prop::collection::vec(0u8..3, 8), rot in 1usize..8) {
            let logits = Tensor::new(&[1, 3, 2, 4], vals).unwrap();
            let t = masks(&labels, 1, 2, 4);
            let l = combined_loss(&Var::constant(logits.clone()), &t, LossWeights::default(), None).unwrap().value().data()[0];
            prop_assert!(l >= 0.0);
            let perm: Vec<usize> = (0..8).map(|p| (p + rot) % 8).collect();
            let shuffled = Tensor::from_fn(&[1, 3, 2, 4], |i| logits.data()[(i / 8) * 8 + perm[i % 8]]);
            let st = masks(&perm.iter().map(|&p| labels[p]).collect::<Vec<_>>(), 1, 2, 4);
            let l2 = combined_loss(&Var::constant(shuffled), &st, LossWeights::default(), None).unwrap().value().data()[0];
            prop_assert!((l - l2).abs() < 1e-12);
        }

        #[test]
        fn schedule_non_increasing(total in 1usize..5000, power in 0.25f64..3.0) {
            let cfg = TrainConfig { decay_power: power, ..TrainConfig::default() };
            let mut prev = f64::INFINITY;
            for s in (0..=total).step_by((total / 97).max(1)) {
                let lr = lr_at(s, total, &cfg).unwrap();
                prop_assert!(lr <= prev && lr >= cfg.lr_final);
                prev = lr;
            }
        }
    }
}
