//! SGD with momentum, segmentation and classifier training loops, evaluation.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datasets::{DatasetRecord, Manifest, Split};
use crate::error::{Error, Result};
use crate::imaging::{self, BinaryMask, RgbImage, DEFAULT_PAD_FRAC};
use crate::metrics::{self, ClassificationReport, MetricsReport, SegmentationReport};
use crate::param::{Group, ParamStore};
use crate::recnet::{Phase, RecModel};
use crate::rng;
use crate::scalar::Scalar;
use crate::segnet::{logits_to_mask, SegModel};
use crate::tensor::{Tape, Tensor};
use crate::INPUT_SIZE;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegLoss {
    #[default]
    Bce,
    BcePlusDice,
}

impl std::str::FromStr for SegLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bce" => Ok(SegLoss::Bce),
            "bce_plus_dice" => Ok(SegLoss::BcePlusDice),
            _ => Err(Error::InvalidArgument(format!("unknown loss {s:?} (expected bce or bce_plus_dice)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Rate for the segmentation network.
    pub lr_seg: f64,
    /// Rate for the classifier head (and for every group during pre-training).
    pub lr_head: f64,
    /// Rate for unfrozen backbone blocks; `None` means `lr_head / 10`.
    pub lr_finetune: Option<f64>,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub class_weighting: bool,
    pub loss: SegLoss,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_seg: 1e-2,
            lr_head: 1e-2,
            lr_finetune: None,
            momentum: 0.9,
            batch_size: 8,
            epochs: 10,
            seed: 0,
            class_weighting: true,
            loss: SegLoss::Bce,
        }
    }
}

impl TrainConfig {
    pub fn lr_finetune(&self) -> f64 {
        self.lr_finetune.unwrap_or(self.lr_head / 10.0)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, lr) in [("lr_seg", self.lr_seg), ("lr_head", self.lr_head), ("lr_finetune", self.lr_finetune())] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {lr}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!("momentum must be in [0,1), got {}", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Learning rate per parameter group, indexed by group code.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LearningRates(pub [f64; 4]);

impl LearningRates {
    pub fn uniform(lr: f64) -> Self {
        Self([lr; 4])
    }

    pub fn for_group(&self, g: Group) -> f64 {
        self.0[g.code() as usize]
    }

    /// Segmentation at `lr_seg`, head at `lr_head`, backbones at `lr_finetune`.
    pub fn from_config(cfg: &TrainConfig) -> Self {
        let ft = cfg.lr_finetune();
        Self([cfg.lr_seg, ft, ft, cfg.lr_head])
    }
}

/// Momentum buffers keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct OptimizerState<T> {
    velocity: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new() -> Self {
        Self { velocity: BTreeMap::new() }
    }

    pub fn velocity(&self, name: &str) -> Option<&[T]> {
        self.velocity.get(name).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.velocity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.velocity.is_empty()
    }
}

/// `v ← momentum·v + g; p ← p − lr(group)·v`, then zeroes gradients of the
/// updated parameters. Non-trainable parameters are not touched and lose their
/// momentum buffers.
pub fn sgd_step<T: Scalar>(
    params: &mut ParamStore<T>,
    state: &mut OptimizerState<T>,
    lrs: &LearningRates,
    momentum: f64,
) -> Result<()> {
    if let Some(p) = params.iter().find(|p| p.trainable && p.tensor.grad().is_none()) {
        return Err(Error::InvalidArgument(format!("trainable parameter {} has no gradient", p.name)));
    }
    state.velocity.retain(|name, _| params.by_name(name).is_some_and(|p| p.trainable));
    let m = T::lit(momentum);
    for p in params.iter_mut().filter(|p| p.trainable) {
        let lr = T::lit(lrs.for_group(p.group));
        let n = p.tensor.numel();
        let v = state.velocity.entry(p.name.clone()).or_insert_with(|| vec![T::zero(); n]);
        if v.len() != n {
            return Err(Error::shape("sgd_step", &[v.len()], &[n]));
        }
        let g = p.tensor.grad().expect("checked above").to_vec();
        for ((vi, gi), w) in v.iter_mut().zip(g).zip(p.tensor.data_mut()) {
            *vi = m * *vi + gi;
            *w -= lr * *vi;
        }
        p.tensor.zero_grad();
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: String,
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_jaccard: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_accuracy: Option<f64>,
}

impl EpochRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("epoch record serialize")
    }

    fn val_score(&self) -> Option<f64> {
        self.val_jaccard.or(self.val_accuracy)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub records: Vec<EpochRecord>,
    /// Epoch whose parameters the model holds after training (best validation
    /// score, earliest on ties; last epoch without a validation split).
    pub best_epoch: Option<usize>,
}

impl History {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.best_epoch.and_then(|e| self.records.iter().find(|r| r.epoch == e))
    }
}

/// Per-epoch callback; receives each record as soon as it is complete.
pub type EpochHook<'a> = &'a mut dyn FnMut(&EpochRecord);

/// Row-major batch from same-shape items, `[items.len(), ..shape]`.
fn gather<T: Scalar>(items: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let shape = items[0].shape();
    let mut data = Vec::with_capacity(items.len() * items[0].numel());
    for t in items {
        data.extend_from_slice(t.data());
    }
    let mut full = vec![items.len()];
    full.extend_from_slice(shape);
    Tensor::new(full, data)
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, 0xe90c_0000 + epoch as u64));
    order
}

fn input_tensor<T: Scalar>(img: &RgbImage) -> Tensor<T> {
    imaging::preprocess(img, INPUT_SIZE).to_tensor()
}

fn nonempty(manifest: &Manifest, split: Split) -> Result<Vec<&DatasetRecord>> {
    let recs = manifest.split(split);
    if recs.is_empty() {
        return Err(Error::Data(format!("split {split} has no records")));
    }
    Ok(recs)
}

fn require_mask(manifest: &Manifest, rec: &DatasetRecord) -> Result<BinaryMask> {
    manifest
        .load_mask(rec)?
        .ok_or_else(|| Error::Data(format!("record {} has no mask", rec.image)))
}

fn require_label(rec: &DatasetRecord) -> Result<usize> {
    rec.label
        .map(|l| l.index())
        .ok_or_else(|| Error::Data(format!("record {} has no label", rec.image)))
}

// ---------------------------------------------------------------------------
// Segmentation

/// Masks at each image's own size, in input order.
pub fn predict_masks<T: Scalar>(model: &SegModel<T>, images: &[RgbImage], batch_size: usize) -> Result<Vec<BinaryMask>> {
    let inputs: Vec<Tensor<T>> = images.iter().map(input_tensor).collect();
    predict_masks_from(model, images, &inputs, batch_size)
}

fn predict_masks_from<T: Scalar>(
    model: &SegModel<T>,
    images: &[RgbImage],
    inputs: &[Tensor<T>],
    batch_size: usize,
) -> Result<Vec<BinaryMask>> {
    let plane = INPUT_SIZE * INPUT_SIZE;
    let mut out = Vec::with_capacity(images.len());
    for (imgs, xs) in images.chunks(batch_size.max(1)).zip(inputs.chunks(batch_size.max(1))) {
        let logits = model.infer(&gather(&xs.iter().collect::<Vec<_>>())?)?;
        for (i, img) in imgs.iter().enumerate() {
            let m = logits_to_mask(&logits.data()[i * plane..], INPUT_SIZE, INPUT_SIZE);
            out.push(imaging::resize_mask_nearest(&m, img.height(), img.width()));
        }
    }
    Ok(out)
}

struct SegVal<T> {
    images: Vec<RgbImage>,
    inputs: Vec<Tensor<T>>,
    masks: Vec<BinaryMask>,
}

impl<T: Scalar> SegVal<T> {
    fn load(manifest: &Manifest, recs: &[&DatasetRecord]) -> Result<Self> {
        let mut v = Self { images: Vec::new(), inputs: Vec::new(), masks: Vec::new() };
        for rec in recs {
            let img = manifest.load_image(rec)?;
            v.masks.push(require_mask(manifest, rec)?);
            v.inputs.push(input_tensor(&img));
            v.images.push(img);
        }
        Ok(v)
    }

    fn report(&self, model: &SegModel<T>, batch: usize) -> Result<SegmentationReport> {
        let preds = predict_masks_from(model, &self.images, &self.inputs, batch)?;
        SegmentationReport::from_pairs(preds.iter().zip(&self.masks))
    }
}

pub fn train_seg<T: Scalar>(model: &mut SegModel<T>, manifest: &Manifest, cfg: &TrainConfig) -> Result<History> {
    train_seg_with(model, manifest, cfg, &mut |_| {})
}

/// Mini-batch SGD over the shuffled train split. After every epoch the
/// validation split (if any) is scored by mean Jaccard; the model ends up
/// holding the best-scoring epoch's parameters.
pub fn train_seg_with<T: Scalar>(
    model: &mut SegModel<T>,
    manifest: &Manifest,
    cfg: &TrainConfig,
    hook: EpochHook<'_>,
) -> Result<History> {
    cfg.validate()?;
    manifest.require_masks(Split::Train)?;
    let train = nonempty(manifest, Split::Train)?;
    let mut history = History::default();
    if cfg.epochs == 0 {
        return Ok(history);
    }

    let mut inputs = Vec::with_capacity(train.len());
    let mut targets = Vec::with_capacity(train.len());
    for rec in &train {
        let img = manifest.load_image(rec)?;
        let mask = require_mask(manifest, rec)?;
        if (mask.height(), mask.width()) != (img.height(), img.width()) {
            return Err(Error::Data(format!("mask of {} does not match the image size", rec.image)));
        }
        inputs.push(input_tensor::<T>(&img));
        targets.push(imaging::resize_mask_nearest(&mask, INPUT_SIZE, INPUT_SIZE).to_target::<T>());
    }
    let val_recs = manifest.split(Split::Val);
    let val = if val_recs.is_empty() { None } else { Some(SegVal::<T>::load(manifest, &val_recs)?) };

    model.params_mut().set_trainable(|_| true);
    let lrs = LearningRates::from_config(cfg);
    let mut state = OptimizerState::new();
    let mut best: Option<(f64, ParamStore<T>)> = None;
    for epoch in 1..=cfg.epochs {
        let order = epoch_order(train.len(), cfg.seed, epoch);
        let mut loss_sum = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let x = gather(&idx.iter().map(|&i| &inputs[i]).collect::<Vec<_>>())?;
            let y: Vec<T> = idx.iter().flat_map(|&i| targets[i].iter().copied()).collect();
            let tape = Tape::new();
            let bound = model.params().bind(&tape);
            let logits = model.forward(&bound, tape.constant(x))?;
            let mut loss = logits.bce_with_logits(&y)?;
            if cfg.loss == SegLoss::BcePlusDice {
                loss = loss.add(logits.dice_with_logits(&y)?)?;
            }
            loss_sum += loss.value().data()[0].to_f64().unwrap_or(f64::NAN) * idx.len() as f64;
            tape.backward(loss)?;
            model.params_mut().accumulate_grads(&bound);
            sgd_step(model.params_mut(), &mut state, &lrs, cfg.momentum)?;
        }
        let val_jaccard = match &val {
            Some(v) => Some(v.report(model, cfg.batch_size)?.mean_jaccard),
            None => None,
        };
        let record = EpochRecord {
            stage: "seg".into(),
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_jaccard,
            val_accuracy: None,
        };
        retain_best(&mut best, &mut history, &record, model.params());
        hook(&record);
        history.records.push(record);
    }
    if let Some((_, params)) = best {
        *model.params_mut() = params;
    }
    Ok(history)
}

/// Keeps a snapshot of the best-scoring epoch (strictly better replaces).
fn retain_best<T: Scalar>(
    best: &mut Option<(f64, ParamStore<T>)>,
    history: &mut History,
    record: &EpochRecord,
    params: &ParamStore<T>,
) {
    match record.val_score() {
        Some(score) => {
            if best.as_ref().is_none_or(|(b, _)| score > *b) {
                *best = Some((score, params.clone()));
                history.best_epoch = Some(record.epoch);
            }
        }
        None => history.best_epoch = Some(record.epoch),
    }
}

pub fn evaluate_seg<T: Scalar>(model: &SegModel<T>, manifest: &Manifest, split: Split) -> Result<MetricsReport> {
    let recs = nonempty(manifest, split)?;
    let val = SegVal::<T>::load(manifest, &recs)?;
    Ok(MetricsReport { segmentation: Some(val.report(model, 8)?), classification: None })
}

// ---------------------------------------------------------------------------
// Classification

/// Preprocessed classifier inputs for a split.
pub struct ClsData<T> {
    full: Vec<Tensor<T>>,
    crop: Vec<Tensor<T>>,
    labels: Vec<usize>,
}

impl<T: Scalar> ClsData<T> {
    /// Crops come from ground-truth masks when `use_truth_masks` is set and the
    /// record has one, otherwise from `seg`'s predicted mask.
    pub fn load(
        seg: &SegModel<T>,
        manifest: &Manifest,
        split: Split,
        use_truth_masks: bool,
    ) -> Result<Self> {
        let recs = nonempty(manifest, split)?;
        let mut d = Self { full: Vec::new(), crop: Vec::new(), labels: Vec::new() };
        for rec in recs {
            d.labels.push(require_label(rec)?);
            let img = manifest.load_image(rec)?;
            let truth = if use_truth_masks { manifest.load_mask(rec)? } else { None };
            let mask = match truth {
                Some(m) => m,
                None => seg.predict_mask(&img)?,
            };
            let crop = imaging::crop_from_mask(&img, &mask, DEFAULT_PAD_FRAC)?;
            d.full.push(input_tensor(&img));
            d.crop.push(input_tensor(&crop));
        }
        Ok(d)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    fn batch(&self, idx: &[usize]) -> Result<(Tensor<T>, Tensor<T>, Vec<usize>)> {
        Ok((
            gather(&idx.iter().map(|&i| &self.full[i]).collect::<Vec<_>>())?,
            gather(&idx.iter().map(|&i| &self.crop[i]).collect::<Vec<_>>())?,
            idx.iter().map(|&i| self.labels[i]).collect(),
        ))
    }

    /// Argmax predictions (lowest index wins ties).
    pub fn predict(&self, rec: &RecModel<T>, batch_size: usize) -> Result<Vec<usize>> {
        let all: Vec<usize> = (0..self.len()).collect();
        let mut preds = Vec::with_capacity(self.len());
        for idx in all.chunks(batch_size.max(1)) {
            let (full, crop, _) = self.batch(idx)?;
            let probs = rec.infer(&full, &crop)?;
            preds.extend(probs.data().chunks(rec.config().num_classes).map(argmax));
        }
        Ok(preds)
    }

    pub fn report(&self, rec: &RecModel<T>, batch_size: usize) -> Result<ClassificationReport> {
        metrics::classification_report(&self.predict(rec, batch_size)?, &self.labels)
    }
}

/// Index of the largest value; the first one on ties.
pub fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[allow(clippy::too_many_arguments)]
fn fit_cls<T: Scalar>(
    rec: &mut RecModel<T>,
    train: &ClsData<T>,
    val: Option<&ClsData<T>>,
    weights: [f64; 3],
    lrs: LearningRates,
    cfg: &TrainConfig,
    stage: &str,
    hook: EpochHook<'_>,
) -> Result<History> {
    let weights: Vec<T> = weights.iter().map(|&w| T::lit(w)).collect();
    let mut history = History::default();
    let mut state = OptimizerState::new();
    let mut best: Option<(f64, ParamStore<T>)> = None;
    for epoch in 1..=cfg.epochs {
        let order = epoch_order(train.len(), cfg.seed, epoch);
        let mut loss_sum = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let (full, crop, labels) = train.batch(idx)?;
            let tape = Tape::new();
            let bound = rec.params().bind(&tape);
            let logits = rec.forward_logits(&bound, tape.constant(full), tape.constant(crop))?;
            let loss = logits.softmax_cross_entropy(&labels, &weights)?;
            loss_sum += loss.value().data()[0].to_f64().unwrap_or(f64::NAN) * idx.len() as f64;
            tape.backward(loss)?;
            rec.params_mut().accumulate_grads(&bound);
            sgd_step(rec.params_mut(), &mut state, &lrs, cfg.momentum)?;
        }
        let val_accuracy = match val {
            Some(v) => Some(v.report(rec, cfg.batch_size)?.accuracy),
            None => None,
        };
        let record = EpochRecord {
            stage: stage.into(),
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_jaccard: None,
            val_accuracy,
        };
        retain_best(&mut best, &mut history, &record, rec.params());
        hook(&record);
        history.records.push(record);
    }
    if let Some((_, params)) = best {
        // Restoring values only; trainable flags are the same in the snapshot.
        *rec.params_mut() = params;
    }
    Ok(history)
}

fn class_weights_for(manifest: &Manifest, cfg: &TrainConfig) -> Result<[f64; 3]> {
    if cfg.class_weighting {
        manifest.class_weights()
    } else {
        Ok([1.0; 3])
    }
}

fn load_cls_splits<T: Scalar>(seg: &SegModel<T>, manifest: &Manifest) -> Result<(ClsData<T>, Option<ClsData<T>>)> {
    manifest.require_labels(Split::Train)?;
    let train = ClsData::load(seg, manifest, Split::Train, true)?;
    let val = if manifest.split_count(Split::Val) > 0 {
        Some(ClsData::load(seg, manifest, Split::Val, false)?)
    } else {
        None
    };
    Ok((train, val))
}

pub fn train_cls<T: Scalar>(
    rec: &mut RecModel<T>,
    seg: &SegModel<T>,
    manifest: &Manifest,
    cfg: &TrainConfig,
    phase: Phase,
) -> Result<History> {
    train_cls_with(rec, seg, manifest, cfg, phase, &mut |_| {})
}

/// Sets `phase`, then trains with head rate `lr_head` and backbone rate
/// `lr_finetune`. Training crops use ground-truth masks where available;
/// validation crops always come from the segmentation model.
pub fn train_cls_with<T: Scalar>(
    rec: &mut RecModel<T>,
    seg: &SegModel<T>,
    manifest: &Manifest,
    cfg: &TrainConfig,
    phase: Phase,
    hook: EpochHook<'_>,
) -> Result<History> {
    cfg.validate()?;
    rec.set_phase(phase);
    if cfg.epochs == 0 {
        return Ok(History::default());
    }
    let weights = class_weights_for(manifest, cfg)?;
    let (train, val) = load_cls_splits(seg, manifest)?;
    let stage = match phase {
        Phase::HeadOnly => "cls_phase1",
        Phase::FineTuneLastTwo => "cls_phase2",
    };
    fit_cls(rec, &train, val.as_ref(), weights, LearningRates::from_config(cfg), cfg, stage, hook)
}

/// Like [`train_cls_with`] on already-loaded data.
pub fn train_cls_on<T: Scalar>(
    rec: &mut RecModel<T>,
    train: &ClsData<T>,
    val: Option<&ClsData<T>>,
    weights: [f64; 3],
    cfg: &TrainConfig,
    phase: Phase,
    hook: EpochHook<'_>,
) -> Result<History> {
    cfg.validate()?;
    rec.set_phase(phase);
    let stage = match phase {
        Phase::HeadOnly => "cls_phase1",
        Phase::FineTuneLastTwo => "cls_phase2",
    };
    fit_cls(rec, train, val, weights, LearningRates::from_config(cfg), cfg, stage, hook)
}

/// Trains every parameter (backbones and head) at `lr_head` on the
/// classification task; used to produce a backbone checkpoint for transfer.
/// Leaves the model in phase [`Phase::HeadOnly`].
pub fn pretrain_backbone<T: Scalar>(
    rec: &mut RecModel<T>,
    seg: &SegModel<T>,
    manifest: &Manifest,
    cfg: &TrainConfig,
    hook: EpochHook<'_>,
) -> Result<History> {
    cfg.validate()?;
    let weights = class_weights_for(manifest, cfg)?;
    let (train, val) = load_cls_splits(seg, manifest)?;
    rec.unfreeze_all();
    let history = fit_cls(rec, &train, val.as_ref(), weights, LearningRates::uniform(cfg.lr_head), cfg, "pretrain", hook);
    rec.set_phase(Phase::HeadOnly);
    history
}

/// Crops always come from the segmentation model, as at inference time.
pub fn evaluate_cls<T: Scalar>(
    rec: &RecModel<T>,
    seg: &SegModel<T>,
    manifest: &Manifest,
    split: Split,
) -> Result<MetricsReport> {
    let data = ClsData::load(seg, manifest, split, false)?;
    Ok(MetricsReport { segmentation: None, classification: Some(data.report(rec, 8)?) })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(w: f64, g: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let i = s.add("w", Tensor::full(vec![1], w), Group::Head).unwrap();
        s.get_mut(i).tensor.accumulate_grad(&[g]);
        s
    }

    #[test]
    fn plain_sgd_step() {
        let mut s = store(1.0, 0.5);
        sgd_step(&mut s, &mut OptimizerState::new(), &LearningRates::uniform(0.1), 0.0).unwrap();
        assert!((s.get(0).tensor.data()[0] - 0.95).abs() < 1e-15);
        assert!(s.get(0).tensor.grad().is_none());
    }

    #[test]
    fn momentum_recursion() {
        let mut s = store(0.0, 1.0);
        let mut st = OptimizerState::new();
        let lrs = LearningRates::uniform(0.1);
        sgd_step(&mut s, &mut st, &lrs, 0.9).unwrap();
        assert!((s.get(0).tensor.data()[0] + 0.1).abs() < 1e-15);
        s.get_mut(0).tensor.accumulate_grad(&[1.0]);
        sgd_step(&mut s, &mut st, &lrs, 0.9).unwrap();
        assert!((st.velocity("w").unwrap()[0] - 1.9).abs() < 1e-15);
        assert!((s.get(0).tensor.data()[0] + 0.29).abs() < 1e-15);
    }

    #[test]
    fn frozen_parameter_with_stale_grad_is_untouched() {
        let mut s = store(1.0, 0.5);
        s.get_mut(0).trainable = false;
        let mut st = OptimizerState::new();
        sgd_step(&mut s, &mut st, &LearningRates::uniform(0.1), 0.9).unwrap();
        assert_eq!(s.get(0).tensor.data(), &[1.0]);
        assert!(st.is_empty());
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut s = ParamStore::<f64>::new();
        s.add("w", Tensor::full(vec![1], 1.0), Group::Head).unwrap();
        assert!(sgd_step(&mut s, &mut OptimizerState::new(), &LearningRates::uniform(0.1), 0.0).is_err());
    }

    #[test]
    fn buffers_pruned_when_frozen() {
        let mut s = store(1.0, 0.5);
        let mut st = OptimizerState::new();
        sgd_step(&mut s, &mut st, &LearningRates::uniform(0.1), 0.9).unwrap();
        assert_eq!(st.len(), 1);
        s.get_mut(0).trainable = false;
        sgd_step(&mut s, &mut st, &LearningRates::uniform(0.1), 0.9).unwrap();
        assert!(st.is_empty());
    }

    #[test]
    fn group_rates() {
        let cfg = TrainConfig::default();
        let lrs = LearningRates::from_config(&cfg);
        assert_eq!(lrs.for_group(Group::Head), 1e-2);
        assert!((lrs.for_group(Group::BackboneCrop) - 1e-3).abs() < 1e-18);
        assert!(TrainConfig { batch_size: 0, ..cfg.clone() }.validate().is_err());
        assert!(TrainConfig { lr_head: 0.0, ..cfg }.validate().is_err());
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[0.25, 0.5, 0.25]), 1);
        assert_eq!(argmax(&[0.4, 0.4, 0.2]), 0);
        assert_eq!(argmax(&[1.0 / 3.0; 3]), 0);
    }

    #[test]
    fn epoch_orders_differ_but_repeat() {
        assert_eq!(epoch_order(20, 1, 1), epoch_order(20, 1, 1));
        assert_ne!(epoch_order(20, 1, 1), epoch_order(20, 1, 2));
        let mut o = epoch_order(20, 1, 3);
        o.sort();
        assert_eq!(o, (0..20).collect::<Vec<_>>());
    }
}
