//! Teacher ensembles and plate-balanced pseudo-labels.

use std::collections::BTreeMap;
use std::path::Path;

use log::info;
use rayon::prelude::*;

use crate::assignment::apply_postprocess;
use crate::error::{Error, Result};
use crate::plate_data::{DatasetManifest, NormalizedImages};
use crate::trainer::{self, argmax, train_epoch, EpochLog, PseudoLabels, TrainConfig, TrainData, TrainState};

#[derive(Debug, Clone)]
pub struct EnsembleState {
    pub members: Vec<TrainState>,
    pub pseudo_labels: PseudoLabels,
    pub best_val_accuracy: f64,
}

impl EnsembleState {
    pub fn new(members: Vec<TrainState>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::Config("an ensemble needs at least one member".into()));
        }
        Ok(Self {
            members,
            pseudo_labels: PseudoLabels::new(),
            best_val_accuracy: f64::NEG_INFINITY,
        })
    }

    /// One epoch for every member, each using the current pseudo-labels.
    pub fn train_epoch(&mut self, cfg: &TrainConfig, data: &TrainData, images: &NormalizedImages) -> Result<Vec<EpochLog>> {
        let pseudo = (!self.pseudo_labels.is_empty()).then_some(&self.pseudo_labels);
        self.members
            .iter_mut()
            .map(|m| train_epoch(m, cfg, data, images, pseudo))
            .collect()
    }
}

/// Element-wise mean of probability rows from several models.
pub fn average_probabilities(per_member: &[Vec<Vec<f64>>]) -> Result<Vec<Vec<f64>>> {
    let first = per_member
        .first()
        .ok_or_else(|| Error::Config("an ensemble needs at least one member".into()))?;
    let k = first.first().map_or(0, Vec::len);
    for (m, rows) in per_member.iter().enumerate() {
        if rows.len() != first.len() || rows.iter().any(|r| r.len() != k) {
            return Err(Error::shape(
                "ensemble_predict",
                format!("member {m} does not produce {} rows of {k} classes", first.len()),
            ));
        }
    }
    let scale = 1.0 / per_member.len() as f64;
    Ok((0..first.len())
        .map(|i| {
            (0..k)
                .map(|j| per_member.iter().map(|rows| rows[i][j]).sum::<f64>() * scale)
                .collect()
        })
        .collect())
}

/// Mean teacher probabilities of `members` on `indices`.
pub fn ensemble_predict(members: &[TrainState], images: &NormalizedImages, indices: &[usize]) -> Result<Vec<Vec<f64>>> {
    let mut classes = Vec::with_capacity(members.len());
    for m in members {
        classes.push(m.teacher.num_classes()?);
    }
    if classes.windows(2).any(|w| w[0] != w[1]) {
        return Err(Error::shape("ensemble_predict", format!("members disagree on class count: {classes:?}")));
    }
    let per_member: Vec<Vec<Vec<f64>>> = members
        .par_iter()
        .map(|m| trainer::predict_proba(&m.teacher, &m.head, images, indices))
        .collect::<Result<_>>()?;
    average_probabilities(&per_member)
}

/// [`ensemble_predict`] keyed by image index.
pub fn ensemble_predict_map(
    members: &[TrainState],
    images: &NormalizedImages,
    indices: &[usize],
) -> Result<BTreeMap<u32, Vec<f64>>> {
    let rows = ensemble_predict(members, images, indices)?;
    Ok(indices.iter().map(|&i| i as u32).zip(rows).collect())
}

pub fn ensemble_accuracy(members: &[TrainState], images: &NormalizedImages, pairs: &[(usize, usize)]) -> Result<f64> {
    let idx: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let probs = ensemble_predict(members, images, &idx)?;
    let preds: Vec<usize> = probs.iter().map(|r| argmax(r)).collect();
    let labels: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    crate::metrics::multiclass_accuracy(&preds, &labels)
}

/// Recomputes pseudo-labels when the ensemble's validation accuracy strictly
/// improves on the best seen so far. Returns whether a refresh happened.
///
/// New labels are the plate-balanced assignment of the ensemble's
/// predictions on the unlabeled wells.
pub fn maybe_refresh_pseudo_labels(
    state: &mut EnsembleState,
    manifest: &DatasetManifest,
    images: &NormalizedImages,
    data: &TrainData,
) -> Result<bool> {
    let acc = ensemble_accuracy(&state.members, images, &data.validation)?;
    if !(acc > state.best_val_accuracy) {
        return Ok(false);
    }
    let predictions = ensemble_predict_map(&state.members, images, &data.unlabeled)?;
    let assigned = apply_postprocess(&predictions, manifest)?;
    info!(
        "pseudo-labels refreshed: validation accuracy {:.4} -> {acc:.4}, {} labels",
        state.best_val_accuracy,
        assigned.len()
    );
    state.best_val_accuracy = acc;
    state.pseudo_labels = assigned.into_iter().map(|(w, c)| (w, (c, true))).collect();
    Ok(true)
}

/// Trains every member to `cfg.total_epochs`. From epoch `pseudo_start_epoch`
/// on, pseudo-labels are refreshed after each epoch; each refresh is dumped
/// to `dump_dir` when given.
pub fn fit_ensemble(
    state: &mut EnsembleState,
    cfg: &TrainConfig,
    manifest: &DatasetManifest,
    data: &TrainData,
    images: &NormalizedImages,
    pseudo_start_epoch: usize,
    dump_dir: Option<&Path>,
) -> Result<Vec<Vec<EpochLog>>> {
    let mut logs = Vec::new();
    loop {
        let epoch = state.members[0].epoch;
        if epoch >= cfg.total_epochs {
            break;
        }
        logs.push(state.train_epoch(cfg, data, images)?);
        if epoch + 1 >= pseudo_start_epoch
            && !data.unlabeled.is_empty()
            && maybe_refresh_pseudo_labels(state, manifest, images, data)?
        {
            if let Some(dir) = dump_dir {
                write_pseudo_labels(&dir.join(format!("pseudo_labels_epoch{:03}.json", epoch + 1)), &state.pseudo_labels)?;
            }
        }
    }
    Ok(logs)
}

/// Writes `{"image_index": class, ...}` for the confident pseudo-labels.
pub fn write_pseudo_labels(path: &Path, labels: &PseudoLabels) -> Result<()> {
    let dump: BTreeMap<String, usize> = labels
        .iter()
        .filter(|(_, (_, confident))| *confident)
        .map(|(w, (c, _))| (w.to_string(), *c))
        .collect();
    let text = serde_json::to_string_pretty(&dump).map_err(|e| Error::json("pseudo-labels", e))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_pseudo_labels(path: &Path) -> Result<PseudoLabels> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let dump: BTreeMap<String, usize> =
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
    dump.into_iter()
        .map(|(w, c)| {
            let w: u32 = w
                .parse()
                .map_err(|_| Error::Format(format!("{}: bad image index {w:?}", path.display())))?;
            Ok((w, (c, true)))
        })
        .collect()
}
