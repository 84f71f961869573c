//! Single JSON run configuration shared by every command.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::ladder::LadderConfig;
use crate::losses::ArcFaceConfig;
use crate::model::{BackboneConfig, Head};
use crate::plate_data::{Grouping, SyntheticConfig};
use crate::trainer::{FinetuneConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub synthetic: SyntheticConfig,
    /// Backbone of the first ensemble member; the others widen it.
    pub backbone: BackboneConfig,
    pub member_widths: Vec<f64>,
    pub arcface: ArcFaceConfig,
    pub train: TrainConfig,
    pub finetune: FinetuneConfig,
    pub grouping: Grouping,
    pub pseudo_start_epoch: usize,
    /// Groupings under which `ablation` also scores the softmax baseline.
    pub normalization_sweep: Vec<Grouping>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let ladder = LadderConfig::default();
        Self {
            synthetic: SyntheticConfig::default(),
            backbone: ladder.backbone,
            member_widths: ladder.member_widths,
            arcface: ladder.arcface,
            train: ladder.train,
            finetune: FinetuneConfig::default(),
            grouping: ladder.grouping,
            pseudo_start_epoch: ladder.pseudo_start_epoch,
            normalization_sweep: ladder.normalization_sweep,
        }
    }
}

impl RunConfig {
    /// Desk-scale settings: 16×16 images, a narrow backbone and a short,
    /// fast-decaying schedule.
    pub fn desk() -> Self {
        let lr = 1e-2;
        Self {
            synthetic: SyntheticConfig {
                height: 16,
                width: 16,
                ..SyntheticConfig::default()
            },
            backbone: BackboneConfig {
                stem_channels: 8,
                num_blocks: 3,
                embedding_dim: 32,
                ..BackboneConfig::default()
            },
            arcface: ArcFaceConfig {
                scale: 16.0,
                margin: 0.1,
                num_classes: 16,
            },
            train: TrainConfig {
                batch_size: 8,
                base_lr: lr,
                lr_schedule: vec![(0.625, lr / 3.0), (0.875, lr / 30.0)],
                total_epochs: 60,
                ema_decay: 0.9,
                consistency_rampup_epochs: 20,
                ..TrainConfig::default()
            },
            pseudo_start_epoch: 20,
            ..Self::default()
        }
    }

    /// Eight-class, eight-plate dataset for smoke runs.
    pub fn toy() -> Self {
        let mut cfg = Self::desk();
        cfg.synthetic = SyntheticConfig {
            num_classes: 8,
            wells_per_plate: 8,
            plates_per_experiment: 2,
            num_experiments: 4,
            channels: 3,
            height: 12,
            width: 12,
            ..SyntheticConfig::default()
        };
        cfg.backbone.input_channels = 3;
        cfg.backbone.num_classes = 8;
        cfg.backbone.num_blocks = 2;
        cfg.arcface.num_classes = 8;
        cfg.train.total_epochs = 30;
        cfg.train.consistency_rampup_epochs = 10;
        cfg.pseudo_start_epoch = 10;
        cfg
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::default()),
            "desk" => Ok(Self::desk()),
            "toy" => Ok(Self::toy()),
            other => Err(Error::Config(format!("unknown preset {other:?} (expected default, desk or toy)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.synthetic.validate()?;
        self.ladder().validate()?;
        if self.backbone.input_channels != self.synthetic.channels {
            return Err(Error::Config(format!(
                "backbone.input_channels {} differs from synthetic.channels {}",
                self.backbone.input_channels, self.synthetic.channels
            )));
        }
        if self.backbone.num_classes != self.synthetic.num_classes {
            return Err(Error::Config(format!(
                "backbone.num_classes {} differs from synthetic.num_classes {}",
                self.backbone.num_classes, self.synthetic.num_classes
            )));
        }
        Ok(())
    }

    pub fn head(&self) -> Head {
        Head::ArcFace(self.arcface)
    }

    pub fn ladder(&self) -> LadderConfig {
        LadderConfig {
            backbone: self.backbone.clone(),
            member_widths: self.member_widths.clone(),
            arcface: self.arcface,
            train: self.train.clone(),
            grouping: self.grouping,
            normalization_sweep: self.normalization_sweep.clone(),
            pseudo_start_epoch: self.pseudo_start_epoch,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::json("config", e))
    }

    /// Applies `key.path=value` overrides. Values are parsed as JSON and
    /// fall back to plain strings.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut tree = serde_json::to_value(self).map_err(|e| Error::json("config", e))?;
        for o in overrides {
            let (path, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut tree, path, value)?;
        }
        serde_json::from_value(tree).map_err(|e| Error::json("config override", e))
    }
}

fn set_path(tree: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut node = tree;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override path {path:?}: {part:?} is not inside an object")))?;
        if !obj.contains_key(*part) {
            return Err(Error::Config(format!("unknown config key {path:?}")));
        }
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.get_mut(*part).unwrap();
    }
    Err(Error::Config("empty override key".into()))
}
