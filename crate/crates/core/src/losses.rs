//! Classification, consistency and pseudo-label objectives.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var, L2_EPS};
use crate::error::{Error, Result};

/// Clamp applied to the target cosine before `acos`.
pub const COS_CLAMP_EPS: f64 = 1e-7;

/// Additive angular margin settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArcFaceConfig {
    /// Feature re-scale `s`.
    pub scale: f64,
    /// Angular margin `m` in radians.
    pub margin: f64,
    pub num_classes: usize,
}

impl ArcFaceConfig {
    pub fn new(scale: f64, margin: f64, num_classes: usize) -> Result<Self> {
        let cfg = Self {
            scale,
            margin,
            num_classes,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) {
            return Err(Error::Config(format!("arcface scale must be > 0, got {}", self.scale)));
        }
        if !(0.0..FRAC_PI_2).contains(&self.margin) {
            return Err(Error::Config(format!("arcface margin must be in [0, pi/2), got {}", self.margin)));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("arcface needs at least 2 classes".into()));
        }
        Ok(())
    }
}

impl Default for ArcFaceConfig {
    fn default() -> Self {
        Self {
            scale: 30.0,
            margin: 0.1,
            num_classes: 16,
        }
    }
}

/// Cosines between row-normalized embeddings `[N, D]` and column-normalized
/// class weights `[D, n]`.
pub fn cosine_similarities(tape: &mut Tape, embeddings: Var, class_weights: Var) -> Result<Var> {
    let emb = tape.value(embeddings);
    if emb.rank() != 2 {
        return Err(Error::shape("cosine_similarities", format!("embeddings {:?}", emb.shape())));
    }
    let d = emb.shape()[1];
    for (i, row) in emb.data().chunks(d.max(1)).enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= L2_EPS {
            return Err(Error::Numeric(format!("embedding row {i} has zero norm")));
        }
    }
    let x = tape.l2_normalize_rows(embeddings)?;
    let wt = tape.transpose(class_weights)?;
    let wt = tape.l2_normalize_rows(wt)?;
    let w = tape.transpose(wt)?;
    tape.matmul(x, w)
}

/// `s · cos θ` logits with no margin, used for inference.
pub fn cosine_logits(tape: &mut Tape, embeddings: Var, class_weights: Var, scale: f64) -> Result<Var> {
    let cos = cosine_similarities(tape, embeddings, class_weights)?;
    Ok(tape.scale(cos, scale))
}

/// Mean additive-angular-margin softmax loss over the batch.
pub fn arcface_loss(
    tape: &mut Tape,
    embeddings: Var,
    class_weights: Var,
    labels: &[usize],
    cfg: &ArcFaceConfig,
) -> Result<Var> {
    cfg.validate()?;
    let n_classes = tape.value(class_weights).shape().get(1).copied().unwrap_or(0);
    if n_classes != cfg.num_classes {
        return Err(Error::shape(
            "arcface_loss",
            format!("class weights have {n_classes} columns, config says {}", cfg.num_classes),
        ));
    }
    let cos = cosine_similarities(tape, embeddings, class_weights)?;
    let with_margin = tape.angular_margin(cos, labels, cfg.margin, COS_CLAMP_EPS)?;
    let logits = tape.scale(with_margin, cfg.scale);
    softmax_ce_loss(tape, logits, labels)
}

/// Mean negative log-softmax of the target class.
pub fn softmax_ce_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let mask = vec![true; labels.len()];
    pseudo_label_loss(tape, logits, labels, &mask)
}

/// Mean over rows of the squared Euclidean distance between probability rows.
///
/// The teacher side is detached: no gradient is ever written to it.
pub fn consistency_loss(tape: &mut Tape, student_out: Var, teacher_out: Var) -> Result<Var> {
    let (s, t) = (tape.value(student_out).shape(), tape.value(teacher_out).shape());
    if s != t || s.len() != 2 {
        return Err(Error::shape("consistency_loss", format!("student {s:?} vs teacher {t:?}")));
    }
    let n = s[0];
    let teacher = tape.detach(teacher_out);
    let diff = tape.sub(student_out, teacher)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq);
    Ok(tape.scale(total, 1.0 / n.max(1) as f64))
}

/// Softmax cross-entropy averaged over rows where `mask` is set; zero when
/// nothing is masked in.
pub fn pseudo_label_loss(tape: &mut Tape, student_logits: Var, pseudo_labels: &[usize], mask: &[bool]) -> Result<Var> {
    let logp = tape.log_softmax_rows(student_logits)?;
    tape.nll_masked(logp, pseudo_labels, mask)
}
