//! Micro depthwise-separable backbone and its wide variant.
//!
//! Layout: a 3×3 stem convolution, `num_blocks` depthwise-separable blocks
//! (stride 2 on every odd block, channel count doubling every second block),
//! global mean pooling and a dense projection to the embedding. The class
//! weight matrix `classifier.weight` (`[embedding_dim, num_classes]`) is part
//! of the same parameter set.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::losses::{self, ArcFaceConfig};

pub const CLASS_WEIGHT: &str = "classifier.weight";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub input_channels: usize,
    pub stem_channels: usize,
    pub num_blocks: usize,
    pub width_multiplier: f64,
    pub embedding_dim: usize,
    pub num_classes: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input_channels: 6,
            stem_channels: 16,
            num_blocks: 4,
            width_multiplier: 1.0,
            embedding_dim: 64,
            num_classes: 16,
        }
    }
}

impl BackboneConfig {
    /// Same network with every channel count scaled by `multiplier`.
    pub fn wide(&self, multiplier: f64) -> Self {
        Self {
            width_multiplier: multiplier,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width_multiplier >= 1.0) {
            return Err(Error::Config(format!("width_multiplier must be >= 1, got {}", self.width_multiplier)));
        }
        if self.embedding_dim < 2 {
            return Err(Error::Config("embedding_dim must be >= 2".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be >= 2".into()));
        }
        if self.input_channels == 0 || self.stem_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        Ok(())
    }

    fn widened(&self, base: usize) -> usize {
        ((base as f64 * self.width_multiplier).round() as usize).max(1)
    }

    pub fn stem_width(&self) -> usize {
        self.widened(self.stem_channels)
    }

    /// Output channels of block `i`.
    pub fn block_width(&self, i: usize) -> usize {
        self.widened(self.stem_channels << (i / 2))
    }

    pub fn block_input_width(&self, i: usize) -> usize {
        if i == 0 {
            self.stem_width()
        } else {
            self.block_width(i - 1)
        }
    }

    /// Depthwise kernel, pointwise kernel and pointwise bias of block `i`.
    pub fn block_param_count(&self, i: usize) -> usize {
        let (cin, cout) = (self.block_input_width(i), self.block_width(i));
        cin * 9 + cin * cout + cout
    }

    pub fn feature_width(&self) -> usize {
        if self.num_blocks == 0 {
            self.stem_width()
        } else {
            self.block_width(self.num_blocks - 1)
        }
    }
}

/// Stride of block `i`: every other block downsamples.
pub fn block_stride(i: usize) -> usize {
    if i % 2 == 1 {
        2
    } else {
        1
    }
}

/// Named parameter set of one network.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor>,
}

/// Tape handles for every parameter of a [`ModelParams`].
pub type ParamVars = BTreeMap<String, Var>;

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn class_weights(&self) -> Result<&Tensor> {
        self.get(CLASS_WEIGHT)
            .ok_or_else(|| Error::Config(format!("parameter set has no {CLASS_WEIGHT}")))
    }

    pub fn num_classes(&self) -> Result<usize> {
        Ok(self.class_weights()?.shape()[1])
    }

    pub fn num_blocks(&self) -> usize {
        (0..).take_while(|i| self.tensors.contains_key(&format!("block{i}.depthwise"))).count()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// Records every parameter on `tape`, differentiable when `trainable`.
    pub fn record(&self, tape: &mut Tape, trainable: bool) -> ParamVars {
        self.tensors
            .iter()
            .map(|(name, t)| {
                let v = if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect()
    }

    /// Errors unless `other` has the same names with the same shapes.
    pub fn check_compatible(&self, other: &ModelParams) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::Invariant(format!(
                "parameter sets differ in size: {} vs {}",
                self.tensors.len(),
                other.tensors.len()
            )));
        }
        for ((a, ta), (b, tb)) in self.tensors.iter().zip(&other.tensors) {
            if a != b {
                return Err(Error::Invariant(format!("parameter name mismatch: {a} vs {b}")));
            }
            if ta.shape() != tb.shape() {
                return Err(Error::Invariant(format!(
                    "parameter {a} shape mismatch: {:?} vs {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Seeded He-style initialization; biases start at zero.
pub fn build(config: &BackboneConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut he = |shape: &[usize], fan_in: usize| Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), &mut rng);
    let mut p = ModelParams::new();
    let stem = config.stem_width();
    p.insert("stem.kernel", he(&[stem, config.input_channels, 3, 3], config.input_channels * 9));
    p.insert("stem.bias", Tensor::zeros(&[stem]));
    for i in 0..config.num_blocks {
        let (cin, cout) = (config.block_input_width(i), config.block_width(i));
        p.insert(format!("block{i}.depthwise"), he(&[cin, 1, 3, 3], 9));
        p.insert(format!("block{i}.pointwise"), he(&[cout, cin, 1, 1], cin));
        p.insert(format!("block{i}.bias"), Tensor::zeros(&[cout]));
    }
    let feat = config.feature_width();
    p.insert("embed.weight", he(&[feat, config.embedding_dim], feat));
    p.insert("embed.bias", Tensor::zeros(&[config.embedding_dim]));
    p.insert(
        CLASS_WEIGHT,
        he(&[config.embedding_dim, config.num_classes], config.embedding_dim),
    );
    Ok(p)
}

fn param(vars: &ParamVars, name: &str) -> Result<Var> {
    vars.get(name)
        .copied()
        .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
}

/// Embeddings `[N, embedding_dim]` for a `[N, C, H, W]` batch.
pub fn forward(tape: &mut Tape, vars: &ParamVars, batch: Var) -> Result<Var> {
    let stem_k = param(vars, "stem.kernel")?;
    let in_ch = tape.value(stem_k).shape()[1];
    match tape.value(batch).shape() {
        [_, c, _, _] if *c == in_ch => {}
        s => {
            return Err(Error::shape(
                "forward",
                format!("batch {s:?} does not match {in_ch} input channels"),
            ))
        }
    }
    let x = tape.conv2d(batch, stem_k, 1, 1)?;
    let x = tape.add_channel_bias(x, param(vars, "stem.bias")?)?;
    let mut x = tape.relu(x);
    for i in 0.. {
        let Some(&dw) = vars.get(&format!("block{i}.depthwise")) else { break };
        let pw = param(vars, &format!("block{i}.pointwise"))?;
        let y = tape.depthwise_separable_conv(x, dw, pw, block_stride(i), 1)?;
        let y = tape.add_channel_bias(y, param(vars, &format!("block{i}.bias"))?)?;
        x = tape.relu(y);
    }
    let pooled = tape.global_mean_pool(x)?;
    tape.dense(pooled, param(vars, "embed.weight")?, Some(param(vars, "embed.bias")?))
}

/// Gradient-free forward pass.
pub fn embed(params: &ModelParams, batch: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = params.record(&mut tape, false);
    let x = tape.constant(batch.clone());
    let e = forward(&mut tape, &vars, x)?;
    Ok(tape.value(e).clone())
}

/// Classification head on top of the embedding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Head {
    /// Linear logits `embedding · W` with plain softmax cross-entropy.
    Softmax,
    /// Scaled cosine logits with an additive angular margin during training.
    ArcFace(ArcFaceConfig),
}

impl Head {
    /// Inference logits (no margin).
    pub fn logits(&self, tape: &mut Tape, embeddings: Var, class_weights: Var) -> Result<Var> {
        match self {
            Head::Softmax => tape.matmul(embeddings, class_weights),
            Head::ArcFace(cfg) => losses::cosine_logits(tape, embeddings, class_weights, cfg.scale),
        }
    }

    pub fn classification_loss(
        &self,
        tape: &mut Tape,
        embeddings: Var,
        class_weights: Var,
        labels: &[usize],
    ) -> Result<Var> {
        match self {
            Head::Softmax => {
                let logits = tape.matmul(embeddings, class_weights)?;
                losses::softmax_ce_loss(tape, logits, labels)
            }
            Head::ArcFace(cfg) => losses::arcface_loss(tape, embeddings, class_weights, labels, cfg),
        }
    }
}

/// Softmax class probabilities `[N, num_classes]` without recording gradients.
pub fn predict_proba(params: &ModelParams, head: &Head, batch: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = params.record(&mut tape, false);
    let x = tape.constant(batch.clone());
    let e = forward(&mut tape, &vars, x)?;
    let logits = head.logits(&mut tape, e, param(&vars, CLASS_WEIGHT)?)?;
    let p = tape.softmax_rows(logits)?;
    Ok(tape.value(p).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> BackboneConfig {
        BackboneConfig {
            input_channels: 6,
            stem_channels: 4,
            num_blocks: 4,
            width_multiplier: 1.0,
            embedding_dim: 8,
            num_classes: 5,
        }
    }

    #[test]
    fn build_is_deterministic() {
        assert_eq!(build(&tiny(), 7).unwrap(), build(&tiny(), 7).unwrap());
        assert_ne!(build(&tiny(), 7).unwrap(), build(&tiny(), 8).unwrap());
    }

    #[test]
    fn class_weight_shape() {
        let cfg = BackboneConfig {
            embedding_dim: 64,
            num_classes: 10,
            ..BackboneConfig::default()
        };
        let p = build(&cfg, 0).unwrap();
        assert_eq!(p.class_weights().unwrap().shape(), &[64, 10]);
    }

    #[test]
    fn block_param_counts_match_tensors() {
        for m in [1.0, 2.0] {
            let cfg = tiny().wide(m);
            let p = build(&cfg, 1).unwrap();
            for i in 0..cfg.num_blocks {
                let actual: usize = ["depthwise", "pointwise", "bias"]
                    .iter()
                    .map(|s| p.get(&format!("block{i}.{s}")).unwrap().len())
                    .sum();
                assert_eq!(actual, cfg.block_param_count(i));
            }
        }
    }

    #[test]
    fn wide_blocks_are_strictly_larger() {
        let base = BackboneConfig::default();
        let wide = base.wide(2.0);
        for i in 0..base.num_blocks {
            assert!(wide.block_param_count(i) > base.block_param_count(i));
            assert!(wide.block_param_count(i) >= 2 * base.block_param_count(i));
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(build(&tiny().wide(0.5), 0).is_err());
        assert!(build(&BackboneConfig { embedding_dim: 1, ..tiny() }, 0).is_err());
        assert!(build(&BackboneConfig { num_classes: 1, ..tiny() }, 0).is_err());
    }

    #[test]
    fn zero_input_gives_identical_rows() {
        let p = build(&tiny(), 3).unwrap();
        let e = embed(&p, &Tensor::zeros(&[3, 6, 8, 8])).unwrap();
        assert_eq!(e.shape(), &[3, 8]);
        assert_eq!(e.row(0), e.row(1));
        assert_eq!(e.row(1), e.row(2));
    }

    #[test]
    fn wrong_channel_count_rejected() {
        let p = build(&tiny(), 3).unwrap();
        assert!(embed(&p, &Tensor::zeros(&[1, 3, 8, 8])).is_err());
    }

    #[test]
    fn batch_rows_are_independent() {
        let p = build(&tiny(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let batch = Tensor::randn(&[3, 6, 8, 8], 1.0, &mut rng);
        let full = embed(&p, &batch).unwrap();
        let items = batch.unstack();
        for (i, item) in items.iter().enumerate() {
            let single = embed(&p, &Tensor::stack(std::slice::from_ref(item)).unwrap()).unwrap();
            for (a, b) in single.data().iter().zip(full.row(i)) {
                assert!((a - b).abs() < 1e-10);
            }
        }
        let permuted = Tensor::stack(&[items[2].clone(), items[0].clone(), items[1].clone()]).unwrap();
        let pe = embed(&p, &permuted).unwrap();
        assert_eq!(pe.row(0), full.row(2));
        assert_eq!(pe.row(1), full.row(0));
        assert_eq!(pe.row(2), full.row(1));
    }

    #[test]
    fn probabilities_sum_to_one() {
        let p = build(&tiny(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = Tensor::randn(&[2, 6, 8, 8], 1.0, &mut rng);
        for head in [Head::Softmax, Head::ArcFace(ArcFaceConfig::new(30.0, 0.1, 5).unwrap())] {
            let probs = predict_proba(&p, &head, &batch).unwrap();
            for row in probs.data().chunks(5) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}
