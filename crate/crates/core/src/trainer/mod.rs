//! Mean-teacher training.
//!
//! Each step the student sees one augmented view of a labeled and an
//! unlabeled batch, the teacher a second, independent view. The student is
//! updated by Adam on
//!
//! ```text
//! L_class(labeled) + w(t) · L_consist(all) + λ_pseudo · L_pseudo(unlabeled)
//! ```
//!
//! and the teacher then tracks the student by an exponential moving average.
//! Randomness is drawn from streams keyed by `(seed, epoch, step, slot)`, so
//! an epoch is reproducible from the state at its start.

mod augment;
mod checkpoint;
mod optim;

use std::collections::BTreeMap;

use log::{debug, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use augment::{augment, erase, hflip, rescale, rot90, sample_erase_rect, vflip, AugmentConfig};
pub use checkpoint::{
    decode_entries, encode_entries, read_checkpoint, state_entries, state_from_entries, write_checkpoint,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use optim::{adam_step, ema_update, AdamState, ADAM_EPS, BETA1, BETA2};

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::losses;
use crate::model::{self, BackboneConfig, Head, ModelParams, CLASS_WEIGHT};
use crate::plate_data::{DatasetManifest, NormalizedImages, Split};
use crate::rng::stream;

const TAG_SHUFFLE_LABELED: u64 = 11;
const TAG_SHUFFLE_UNLABELED: u64 = 12;
const TAG_AUGMENT: u64 = 13;

/// Row batch size used for gradient-free inference.
pub const INFERENCE_BATCH: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub base_lr: f64,
    /// `(epoch fraction, lr)`: from that fraction of `total_epochs` on, use `lr`.
    pub lr_schedule: Vec<(f64, f64)>,
    pub total_epochs: usize,
    pub weight_decay: f64,
    /// EMA decay `α`.
    pub ema_decay: f64,
    pub consistency_weight_max: f64,
    pub consistency_rampup_epochs: usize,
    pub pseudo_label_weight: f64,
    pub seed: u64,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            base_lr: 3e-4,
            lr_schedule: vec![(100.0 / 160.0, 1e-4), (140.0 / 160.0, 1e-5)],
            total_epochs: 30,
            weight_decay: 2e-4,
            ema_decay: 0.99,
            consistency_weight_max: 1.0,
            consistency_rampup_epochs: 10,
            pseudo_label_weight: 0.5,
            seed: 0,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("ema_decay must be in [0, 1], got {}", self.ema_decay)));
        }
        let mut prev = 0.0;
        for &(f, lr) in &self.lr_schedule {
            if !(f > prev && f <= 1.0) {
                return Err(Error::Config(
                    "lr_schedule fractions must be strictly increasing in (0, 1]".into(),
                ));
            }
            if !(lr >= 0.0) {
                return Err(Error::Config(format!("negative learning rate {lr}")));
            }
            prev = f;
        }
        if self.consistency_weight_max < 0.0 || self.pseudo_label_weight < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config("loss weights and weight decay must be >= 0".into()));
        }
        Ok(())
    }

    /// Learning rate for (zero-based) `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let frac = epoch as f64 / self.total_epochs.max(1) as f64;
        self.lr_schedule
            .iter()
            .filter(|(f, _)| frac >= *f)
            .last()
            .map_or(self.base_lr, |&(_, lr)| lr)
    }

    /// `w_max · exp(−5 (1 − min(t / T, 1))²)` at fractional epoch `t`.
    pub fn consistency_weight(&self, t: f64) -> f64 {
        if self.consistency_rampup_epochs == 0 {
            return self.consistency_weight_max;
        }
        let p = (t / self.consistency_rampup_epochs as f64).min(1.0);
        self.consistency_weight_max * (-5.0 * (1.0 - p).powi(2)).exp()
    }

    /// Plain supervised training: no teacher signal, teacher mirrors student.
    pub fn supervised(&self) -> Self {
        Self {
            ema_decay: 0.0,
            consistency_weight_max: 0.0,
            pseudo_label_weight: 0.0,
            ..self.clone()
        }
    }

    fn wants_unlabeled(&self) -> bool {
        self.consistency_weight_max > 0.0 || self.pseudo_label_weight > 0.0
    }
}

/// Student, teacher and optimizer state of one mean-teacher model.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub head: Head,
    pub student: ModelParams,
    pub teacher: ModelParams,
    pub adam: AdamState,
    /// Epochs completed.
    pub epoch: usize,
    pub seed: u64,
    pub best_val_accuracy: f64,
}

impl TrainState {
    /// Fresh state; the teacher starts as an exact copy of the student.
    pub fn new(backbone: &BackboneConfig, head: Head, seed: u64) -> Result<Self> {
        let student = model::build(backbone, seed)?;
        Ok(Self {
            head,
            teacher: student.clone(),
            adam: AdamState::for_params(&student),
            student,
            epoch: 0,
            seed,
            best_val_accuracy: f64::NEG_INFINITY,
        })
    }
}

/// Indices into a [`NormalizedImages`] store, split by role.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainData {
    /// `(image_index, class)`.
    pub labeled: Vec<(usize, usize)>,
    pub unlabeled: Vec<usize>,
    pub validation: Vec<(usize, usize)>,
}

impl TrainData {
    /// Training wells as labeled, test wells as unlabeled, validation wells
    /// for model selection. Records failing `keep` are dropped.
    pub fn from_manifest_filtered(manifest: &DatasetManifest, keep: impl Fn(&crate::plate_data::WellRecord) -> bool) -> Self {
        let mut d = TrainData::default();
        let mut records: Vec<_> = manifest.records.iter().filter(|r| keep(r)).collect();
        records.sort_by_key(|r| r.image_index);
        for r in records {
            let i = r.image_index as usize;
            match (r.split, r.visible_label()) {
                (Split::Train, Some(y)) => d.labeled.push((i, y)),
                (Split::Val, Some(y)) => d.validation.push((i, y)),
                (Split::Test, _) => d.unlabeled.push(i),
                _ => {}
            }
        }
        d
    }

    pub fn from_manifest(manifest: &DatasetManifest) -> Self {
        Self::from_manifest_filtered(manifest, |_| true)
    }
}

/// `image_index → (class, confident)`.
pub type PseudoLabels = BTreeMap<u32, (usize, bool)>;

/// Inputs of one optimization step.
#[derive(Debug, Clone)]
pub struct StepBatch {
    pub labeled: Vec<usize>,
    pub labels: Vec<usize>,
    pub unlabeled: Vec<usize>,
    /// Student view: labeled rows first, then unlabeled rows.
    pub student_input: Tensor,
    /// Teacher view of the same images, when the consistency term is active.
    pub teacher_input: Option<Tensor>,
    /// Fractional epoch at this step.
    pub progress: f64,
}

fn shuffled(len: usize, seed: u64, tag: u64, epoch: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut perm: Vec<usize> = (0..len).collect();
    perm.shuffle(&mut stream(seed, &[tag, epoch as u64]));
    perm
}

fn view(
    images: &NormalizedImages,
    indices: &[usize],
    cfg: &AugmentConfig,
    seed: u64,
    tags: [u64; 4],
) -> Result<Tensor> {
    let views: Vec<Tensor> = indices
        .par_iter()
        .enumerate()
        .map(|(slot, &i)| {
            let mut rng = stream(seed, &[TAG_AUGMENT, tags[0], tags[1], tags[2], tags[3], slot as u64]);
            augment(&images.tensor(i), cfg, &mut rng)
        })
        .collect::<Result<_>>()?;
    Tensor::stack(&views)
}

/// Deterministic plan of the steps in epoch `state.epoch`.
pub fn plan_epoch(state: &TrainState, cfg: &TrainConfig, data: &TrainData, images: &NormalizedImages) -> Result<Vec<StepBatch>> {
    if data.labeled.is_empty() {
        return Err(Error::Config("no labeled training images".into()));
    }
    let epoch = state.epoch;
    let b = cfg.batch_size;
    let steps = data.labeled.len().div_ceil(b);
    let lab_perm = shuffled(data.labeled.len(), state.seed, TAG_SHUFFLE_LABELED, epoch);
    let use_unlabeled = cfg.wants_unlabeled() && !data.unlabeled.is_empty();
    let unl_perm = if use_unlabeled {
        shuffled(data.unlabeled.len(), state.seed, TAG_SHUFFLE_UNLABELED, epoch)
    } else {
        Vec::new()
    };
    let mut unl_cursor = 0;
    (0..steps)
        .map(|step| {
            let chunk = &lab_perm[step * b..((step + 1) * b).min(lab_perm.len())];
            let labeled: Vec<usize> = chunk.iter().map(|&k| data.labeled[k].0).collect();
            let labels: Vec<usize> = chunk.iter().map(|&k| data.labeled[k].1).collect();
            let unlabeled: Vec<usize> = if use_unlabeled {
                let n = b.min(data.unlabeled.len());
                (0..n)
                    .map(|_| {
                        let i = data.unlabeled[unl_perm[unl_cursor % unl_perm.len()]];
                        unl_cursor += 1;
                        i
                    })
                    .collect()
            } else {
                Vec::new()
            };
            let all: Vec<usize> = labeled.iter().chain(&unlabeled).copied().collect();
            let tags = |v: u64| [epoch as u64, step as u64, v, 0];
            let student_input = view(images, &all, &cfg.augment, state.seed, tags(0))?;
            let teacher_input = if cfg.consistency_weight_max > 0.0 {
                Some(view(images, &all, &cfg.augment, state.seed, tags(1))?)
            } else {
                None
            };
            Ok(StepBatch {
                labeled,
                labels,
                unlabeled,
                student_input,
                teacher_input,
                progress: epoch as f64 + step as f64 / steps as f64,
            })
        })
        .collect()
}

/// Per-step loss breakdown.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub total: f64,
    pub classification: f64,
    pub consistency: f64,
    pub pseudo: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub steps: Vec<StepLoss>,
}

impl EpochLog {
    pub fn mean_loss(&self) -> f64 {
        self.steps.iter().map(|s| s.total).sum::<f64>() / self.steps.len().max(1) as f64
    }
}

/// Builds the step objective on `tape` and returns `(total, parts)`.
fn step_objective(
    tape: &mut Tape,
    state: &TrainState,
    cfg: &TrainConfig,
    batch: &StepBatch,
    pseudo: Option<&PseudoLabels>,
) -> Result<(crate::autodiff::Var, crate::model::ParamVars, StepLoss)> {
    let vars = state.student.record(tape, true);
    let w = vars[CLASS_WEIGHT];
    let x = tape.constant(batch.student_input.clone());
    let emb = model::forward(tape, &vars, x)?;
    let n_lab = batch.labeled.len();
    let n_all = n_lab + batch.unlabeled.len();
    let emb_lab = tape.slice_rows(emb, 0, n_lab)?;
    let mut total = state.head.classification_loss(tape, emb_lab, w, &batch.labels)?;
    let mut parts = StepLoss {
        total: 0.0,
        classification: tape.value(total).item(),
        consistency: 0.0,
        pseudo: 0.0,
    };
    let need_logits = batch.teacher_input.is_some() || (cfg.pseudo_label_weight > 0.0 && !batch.unlabeled.is_empty());
    if need_logits {
        let logits = state.head.logits(tape, emb, w)?;
        if let Some(teacher_input) = &batch.teacher_input {
            let tvars = state.teacher.record(tape, false);
            let tx = tape.constant(teacher_input.clone());
            let temb = model::forward(tape, &tvars, tx)?;
            let tlogits = state.head.logits(tape, temb, tvars[CLASS_WEIGHT])?;
            let tp = tape.softmax_rows(tlogits)?;
            let sp = tape.softmax_rows(logits)?;
            let c = losses::consistency_loss(tape, sp, tp)?;
            parts.consistency = tape.value(c).item();
            let weighted = tape.scale(c, cfg.consistency_weight(batch.progress));
            total = tape.add(total, weighted)?;
        }
        if cfg.pseudo_label_weight > 0.0 && !batch.unlabeled.is_empty() {
            let (labels, mask): (Vec<usize>, Vec<bool>) = batch
                .unlabeled
                .iter()
                .map(|&i| match pseudo.and_then(|p| p.get(&(i as u32))) {
                    Some(&(c, confident)) => (c, confident),
                    None => (0, false),
                })
                .unzip();
            let ul = tape.slice_rows(logits, n_lab, n_all)?;
            let pl = losses::pseudo_label_loss(tape, ul, &labels, &mask)?;
            parts.pseudo = tape.value(pl).item();
            let weighted = tape.scale(pl, cfg.pseudo_label_weight);
            total = tape.add(total, weighted)?;
        }
    }
    parts.total = tape.value(total).item();
    Ok((total, vars, parts))
}

/// Objective value of one planned step without updating anything.
pub fn step_loss(state: &TrainState, cfg: &TrainConfig, batch: &StepBatch, pseudo: Option<&PseudoLabels>) -> Result<StepLoss> {
    let mut tape = Tape::new();
    Ok(step_objective(&mut tape, state, cfg, batch, pseudo)?.2)
}

/// One pass over the labeled training images.
pub fn train_epoch(
    state: &mut TrainState,
    cfg: &TrainConfig,
    data: &TrainData,
    images: &NormalizedImages,
    pseudo: Option<&PseudoLabels>,
) -> Result<EpochLog> {
    cfg.validate()?;
    let plan = plan_epoch(state, cfg, data, images)?;
    let lr = cfg.lr_at(state.epoch);
    let mut steps = Vec::with_capacity(plan.len());
    for batch in &plan {
        let mut tape = Tape::new();
        let (total, vars, parts) = step_objective(&mut tape, state, cfg, batch, pseudo)?;
        if !parts.total.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss at epoch {}", state.epoch)));
        }
        tape.backward(total)?;
        let grads: BTreeMap<String, Tensor> = vars
            .iter()
            .filter_map(|(k, v)| tape.grad(*v).map(|g| (k.clone(), g.clone())))
            .collect();
        adam_step(&mut state.student, &grads, &mut state.adam, lr, cfg.weight_decay)?;
        ema_update(&mut state.teacher, &state.student, cfg.ema_decay)?;
        steps.push(parts);
    }
    let log = EpochLog {
        epoch: state.epoch,
        lr,
        steps,
    };
    state.epoch += 1;
    Ok(log)
}

/// Trains until `cfg.total_epochs` epochs are complete.
pub fn fit(
    state: &mut TrainState,
    cfg: &TrainConfig,
    data: &TrainData,
    images: &NormalizedImages,
    pseudo: Option<&PseudoLabels>,
) -> Result<Vec<EpochLog>> {
    let mut logs = Vec::new();
    while state.epoch < cfg.total_epochs {
        let log = train_epoch(state, cfg, data, images, pseudo)?;
        debug!("epoch {} lr {:e} loss {:.5}", log.epoch, log.lr, log.mean_loss());
        logs.push(log);
    }
    Ok(logs)
}

/// Gradient-free class probabilities, one row per index.
pub fn predict_proba(params: &ModelParams, head: &Head, images: &NormalizedImages, indices: &[usize]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(INFERENCE_BATCH) {
        let p = model::predict_proba(params, head, &images.batch(chunk))?;
        let k = p.shape()[1];
        out.extend(p.data().chunks(k).map(<[f64]>::to_vec));
    }
    Ok(out)
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Teacher accuracy on labeled pairs.
pub fn accuracy_on(state: &TrainState, images: &NormalizedImages, pairs: &[(usize, usize)]) -> Result<f64> {
    let idx: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let probs = predict_proba(&state.teacher, &state.head, images, &idx)?;
    let preds: Vec<usize> = probs.iter().map(|r| argmax(r)).collect();
    let labels: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    crate::metrics::multiclass_accuracy(&preds, &labels)
}

/// Teacher classification loss over labeled pairs, without augmentation.
pub fn validation_loss(state: &TrainState, images: &NormalizedImages, pairs: &[(usize, usize)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Config("validation set is empty".into()));
    }
    let mut weighted = 0.0;
    for chunk in pairs.chunks(INFERENCE_BATCH) {
        let idx: Vec<usize> = chunk.iter().map(|p| p.0).collect();
        let labels: Vec<usize> = chunk.iter().map(|p| p.1).collect();
        let mut tape = Tape::new();
        let vars = state.teacher.record(&mut tape, false);
        let x = tape.constant(images.batch(&idx));
        let emb = model::forward(&mut tape, &vars, x)?;
        let l = state.head.classification_loss(&mut tape, emb, vars[CLASS_WEIGHT], &labels)?;
        weighted += tape.value(l).item() * chunk.len() as f64;
    }
    Ok(weighted / pairs.len() as f64)
}

/// Continued training of a jointly trained model on a single cell type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub lr: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { epochs: 0, lr: 1e-4 }
    }
}

/// Training settings used during fine-tuning: constant `ft.lr`, everything
/// else as in `cfg`.
pub fn finetune_config(cfg: &TrainConfig, ft: &FinetuneConfig) -> TrainConfig {
    TrainConfig {
        base_lr: ft.lr,
        lr_schedule: Vec::new(),
        ..cfg.clone()
    }
}

/// Fine-tunes a copy of `joint` on each cell type's records.
///
/// Cell types without labeled training records are skipped.
pub fn finetune_per_celltype(
    joint: &TrainState,
    cfg: &TrainConfig,
    ft: &FinetuneConfig,
    manifest: &DatasetManifest,
    images: &NormalizedImages,
    pseudo: Option<&PseudoLabels>,
) -> Result<BTreeMap<u32, TrainState>> {
    let ft_cfg = finetune_config(cfg, ft);
    let mut out = BTreeMap::new();
    for cell in 0..manifest.cell_types.len() as u32 {
        let data = TrainData::from_manifest_filtered(manifest, |r| r.cell_type == cell);
        if data.labeled.is_empty() {
            warn!("cell type {} has no training records; skipping fine-tune", manifest.cell_types[cell as usize]);
            continue;
        }
        let mut state = joint.clone();
        for _ in 0..ft.epochs {
            train_epoch(&mut state, &ft_cfg, &data, images, pseudo)?;
        }
        out.insert(cell, state);
    }
    Ok(out)
}

/// Sends each image to the model fine-tuned on its cell type, falling back to
/// the joint model.
#[derive(Debug, Clone)]
pub struct CellTypeRouter {
    pub joint: TrainState,
    pub per_cell: BTreeMap<u32, TrainState>,
}

impl CellTypeRouter {
    pub fn model_for(&self, cell_type: u32) -> &TrainState {
        self.per_cell.get(&cell_type).unwrap_or(&self.joint)
    }

    /// Teacher probabilities keyed by image index.
    pub fn predict(
        &self,
        manifest: &DatasetManifest,
        images: &NormalizedImages,
        indices: &[usize],
    ) -> Result<BTreeMap<u32, Vec<f64>>> {
        let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for &i in indices {
            let r = manifest
                .record_for_image(i as u32)
                .ok_or_else(|| Error::Invariant(format!("image {i} has no record")))?;
            groups.entry(r.cell_type).or_default().push(i);
        }
        let mut out = BTreeMap::new();
        for (cell, idx) in groups {
            let m = self.model_for(cell);
            let probs = predict_proba(&m.teacher, &m.head, images, &idx)?;
            out.extend(idx.iter().map(|&i| i as u32).zip(probs));
        }
        Ok(out)
    }
}
