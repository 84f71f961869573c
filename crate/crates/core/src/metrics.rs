//! Multi-class accuracy and per-cell-type breakdowns.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plate_data::DatasetManifest;

/// Fraction of positions where `preds` equals `labels`.
pub fn multiclass_accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::shape(
            "multiclass_accuracy",
            format!("{} predictions vs {} labels", preds.len(), labels.len()),
        ));
    }
    if preds.is_empty() {
        return Err(Error::Config("accuracy of an empty prediction set".into()));
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub multiclass_accuracy: f64,
    /// Keyed by cell-type name.
    pub per_cell_type: BTreeMap<String, f64>,
    /// Per-cell-type counts, used to recover the overall accuracy.
    pub per_cell_type_counts: BTreeMap<String, usize>,
    /// `confusion[true][pred]`.
    pub confusion: Vec<Vec<usize>>,
    pub total: usize,
}

impl EvalResult {
    /// Scores `image_index → predicted class` against the manifest's ground
    /// truth.
    pub fn score(predicted: &BTreeMap<u32, usize>, manifest: &DatasetManifest) -> Result<Self> {
        let k = manifest.num_classes as usize;
        let mut confusion = vec![vec![0usize; k]; k];
        let mut hits: BTreeMap<String, (usize, usize)> = BTreeMap::new();
        let mut preds = Vec::with_capacity(predicted.len());
        let mut labels = Vec::with_capacity(predicted.len());
        for (&w, &p) in predicted {
            let r = manifest
                .record_for_image(w)
                .ok_or_else(|| Error::Invariant(format!("prediction for unknown image {w}")))?;
            let y = r
                .true_label()
                .ok_or_else(|| Error::Invariant(format!("image {w} has no ground truth")))?;
            if p >= k {
                return Err(Error::Invariant(format!("predicted class {p} out of range")));
            }
            confusion[y][p] += 1;
            let name = manifest.cell_types[r.cell_type as usize].clone();
            let e = hits.entry(name).or_default();
            e.0 += usize::from(p == y);
            e.1 += 1;
            preds.push(p);
            labels.push(y);
        }
        let acc = multiclass_accuracy(&preds, &labels)?;
        Ok(Self {
            multiclass_accuracy: acc,
            per_cell_type: hits.iter().map(|(k, (h, n))| (k.clone(), *h as f64 / *n as f64)).collect(),
            per_cell_type_counts: hits.iter().map(|(k, (_, n))| (k.clone(), *n)).collect(),
            confusion,
            total: preds.len(),
        })
    }

    pub fn trace(&self) -> usize {
        (0..self.confusion.len()).map(|i| self.confusion[i][i]).sum()
    }
}
