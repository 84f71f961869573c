//! Ablation ladder: the pipeline assembled one component at a time, each
//! stage scored on the hidden-label wells.
//!
//! | stage | head | teacher signal | models | plate balancing |
//! |-------|------|----------------|--------|-----------------|
//! | Model 1 | softmax | none | 1 | no |
//! | Model 2 | ArcFace | none | 1 | no |
//! | Model 3 | ArcFace | consistency | 1 | no |
//! | Model 4 | ArcFace | consistency + pseudo-labels | base + wide | no |
//! | Model 4 + post-processing | ArcFace | consistency + pseudo-labels | base + wide | yes |
//!
//! Model 1 can additionally be run under every normalization grouping.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use log::info;
use serde::{Deserialize, Serialize};

use crate::assignment::{apply_postprocess, argmax_predictions};
use crate::ensemble::{ensemble_predict_map, fit_ensemble, EnsembleState};
use crate::error::{Error, Result};
use crate::losses::ArcFaceConfig;
use crate::metrics::EvalResult;
use crate::model::{BackboneConfig, Head};
use crate::plate_data::{compute_norm_stats, Dataset, Grouping, NormalizedImages};
use crate::trainer::{fit, TrainConfig, TrainData, TrainState};

/// Accuracies (%) reported for the full-scale screen, per pipeline stage.
/// Shown for orientation only; synthetic runs are not expected to match.
pub const REFERENCE_LADDER: [(&str, f64); 5] = [
    ("Model 1", 74.580),
    ("Model 2", 85.542),
    ("Model 3", 90.145),
    ("Model 4", 95.535),
    ("Model 4 + post-processing", 99.596),
];

/// Reference Model 1 accuracies (%) per normalization grouping.
pub const REFERENCE_NORMALIZATION: [(Grouping, f64); 3] =
    [(Grouping::Cell, 51.549), (Grouping::Batch, 62.901), (Grouping::Plate, 74.580)];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Softmax,
    ArcFace,
    MeanTeacher,
    EnsemblePseudo,
    PostProcessed,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Softmax,
        Stage::ArcFace,
        Stage::MeanTeacher,
        Stage::EnsemblePseudo,
        Stage::PostProcessed,
    ];

    pub fn label(&self) -> &'static str {
        REFERENCE_LADDER[*self as usize].0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LadderConfig {
    pub backbone: BackboneConfig,
    /// Width multiplier of each ensemble member; the first is also the
    /// single-model backbone.
    pub member_widths: Vec<f64>,
    pub arcface: ArcFaceConfig,
    pub train: TrainConfig,
    /// Normalization used by every stage.
    pub grouping: Grouping,
    /// Groupings under which Model 1 is additionally scored.
    pub normalization_sweep: Vec<Grouping>,
    /// First epoch after which pseudo-labels may be refreshed.
    pub pseudo_start_epoch: usize,
}

impl Default for LadderConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            member_widths: vec![1.0, 2.0],
            arcface: ArcFaceConfig::default(),
            train: TrainConfig::default(),
            grouping: Grouping::Plate,
            normalization_sweep: Grouping::ALL.to_vec(),
            pseudo_start_epoch: 10,
        }
    }
}

impl LadderConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.arcface.validate()?;
        self.train.validate()?;
        if self.member_widths.is_empty() || self.member_widths.iter().any(|&m| !(m > 0.0)) {
            return Err(Error::Config("member_widths must be non-empty and positive".into()));
        }
        if self.arcface.num_classes != self.backbone.num_classes {
            return Err(Error::Config(format!(
                "arcface.num_classes {} differs from backbone.num_classes {}",
                self.arcface.num_classes, self.backbone.num_classes
            )));
        }
        Ok(())
    }

    pub fn member_backbones(&self) -> Vec<BackboneConfig> {
        self.member_widths.iter().map(|&m| self.backbone.wide(m)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageResult {
    pub stage: Stage,
    pub label: String,
    pub grouping: Grouping,
    pub eval: EvalResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub claim: String,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderReport {
    pub seed: u64,
    pub normalization: Vec<StageResult>,
    pub stages: Vec<StageResult>,
    pub verdicts: Vec<Verdict>,
    pub reference_ladder: Vec<(String, f64)>,
    pub reference_normalization: Vec<(Grouping, f64)>,
}

impl LadderReport {
    pub fn accuracy(&self, stage: Stage) -> Option<f64> {
        self.stages
            .iter()
            .find(|s| s.stage == stage)
            .map(|s| s.eval.multiclass_accuracy)
    }

    pub fn normalization_accuracy(&self, grouping: Grouping) -> Option<f64> {
        self.normalization
            .iter()
            .find(|s| s.grouping == grouping)
            .map(|s| s.eval.multiclass_accuracy)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "ablation ladder (seed {})", self.seed).unwrap();
        writeln!(out, "reference accuracies from the full-scale screen, not reproduced here:").unwrap();
        for (name, acc) in &self.reference_ladder {
            writeln!(out, "  {name:<28} {acc:>7.3}%").unwrap();
        }
        for (g, acc) in &self.reference_normalization {
            writeln!(out, "  Model 1, {:<19} {acc:>7.3}%", format!("{g} normalization")).unwrap();
        }
        if !self.normalization.is_empty() {
            writeln!(out, "\nModel 1 by normalization").unwrap();
            for s in &self.normalization {
                writeln!(out, "  {:<28} {:>7.3}%", s.grouping.to_string(), 100.0 * s.eval.multiclass_accuracy).unwrap();
            }
        }
        writeln!(out, "\nstages").unwrap();
        for s in &self.stages {
            writeln!(out, "  {:<28} {:>7.3}%", s.label, 100.0 * s.eval.multiclass_accuracy).unwrap();
        }
        writeln!(out, "\nverdicts").unwrap();
        for v in &self.verdicts {
            writeln!(out, "  [{}] {}", if v.holds { "yes" } else { "no " }, v.claim).unwrap();
        }
        out
    }

    /// Horizontal bar chart of stage accuracies.
    pub fn to_svg(&self) -> String {
        let rows: Vec<(String, f64)> = self
            .normalization
            .iter()
            .map(|s| (format!("Model 1 ({})", s.grouping), s.eval.multiclass_accuracy))
            .chain(self.stages.iter().map(|s| (s.label.clone(), s.eval.multiclass_accuracy)))
            .collect();
        let (bar_h, label_w, plot_w) = (22, 220, 400);
        let height = rows.len() * bar_h + 20;
        let mut out = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{height}\" font-family=\"sans-serif\" font-size=\"12\">\n",
            label_w + plot_w + 70
        );
        for (i, (name, acc)) in rows.iter().enumerate() {
            let y = 10 + i * bar_h;
            let w = (acc * plot_w as f64).round();
            writeln!(out, "  <text x=\"4\" y=\"{}\">{name}</text>", y + 15).unwrap();
            writeln!(out, "  <rect x=\"{label_w}\" y=\"{y}\" width=\"{w}\" height=\"{}\" fill=\"#4a7ab5\"/>", bar_h - 6).unwrap();
            writeln!(out, "  <text x=\"{}\" y=\"{}\">{:.1}%</text>", label_w as f64 + w + 4.0, y + 15, 100.0 * acc).unwrap();
        }
        out.push_str("</svg>\n");
        out
    }

    /// Writes `report.json`, `report.txt` and `report.svg` into `dir`,
    /// creating it if needed.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::json("report", e))?;
        for (name, body) in [
            ("report.json", json + "\n"),
            ("report.txt", self.to_text()),
            ("report.svg", self.to_svg()),
        ] {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

fn normalized(dataset: &Dataset, grouping: Grouping) -> Result<NormalizedImages> {
    let stats = compute_norm_stats(&dataset.manifest, &dataset.images, grouping)?;
    NormalizedImages::new(dataset, &stats)
}

fn score_single(state: &TrainState, dataset: &Dataset, images: &NormalizedImages, data: &TrainData) -> Result<EvalResult> {
    let preds = ensemble_predict_map(std::slice::from_ref(state), images, &data.unlabeled)?;
    EvalResult::score(&argmax_predictions(&preds), &dataset.manifest)
}

fn run_single(
    cfg: &LadderConfig,
    head: Head,
    train: &TrainConfig,
    dataset: &Dataset,
    images: &NormalizedImages,
    data: &TrainData,
) -> Result<EvalResult> {
    let mut state = TrainState::new(&cfg.member_backbones()[0], head, train.seed)?;
    fit(&mut state, train, data, images, None)?;
    score_single(&state, dataset, images, data)
}

/// Model 1 (softmax, supervised) under `grouping`.
pub fn run_softmax_baseline(dataset: &Dataset, cfg: &LadderConfig, grouping: Grouping) -> Result<EvalResult> {
    let images = normalized(dataset, grouping)?;
    let data = TrainData::from_manifest(&dataset.manifest);
    run_single(cfg, Head::Softmax, &cfg.train.supervised(), dataset, &images, &data)
}

fn stage_result(stage: Stage, grouping: Grouping, eval: EvalResult) -> StageResult {
    info!("{}: accuracy {:.4}", stage.label(), eval.multiclass_accuracy);
    StageResult {
        stage,
        label: stage.label().to_string(),
        grouping,
        eval,
    }
}

/// Runs every stage with shared seeds and compares neighbouring stages.
pub fn run_ablation_ladder(dataset: &Dataset, cfg: &LadderConfig) -> Result<LadderReport> {
    cfg.validate()?;
    let data = TrainData::from_manifest(&dataset.manifest);
    let mut normalization = Vec::new();
    let mut cached: BTreeMap<Grouping, EvalResult> = BTreeMap::new();
    for &g in &cfg.normalization_sweep {
        let eval = run_softmax_baseline(dataset, cfg, g)?;
        info!("Model 1 / {g}: accuracy {:.4}", eval.multiclass_accuracy);
        cached.insert(g, eval.clone());
        normalization.push(StageResult {
            stage: Stage::Softmax,
            label: format!("Model 1 ({g})"),
            grouping: g,
            eval,
        });
    }

    let g = cfg.grouping;
    let images = normalized(dataset, g)?;
    let arcface = Head::ArcFace(cfg.arcface);
    let supervised = cfg.train.supervised();
    let mean_teacher = TrainConfig {
        pseudo_label_weight: 0.0,
        ..cfg.train.clone()
    };

    let mut stages = Vec::new();
    let m1 = match cached.remove(&g) {
        Some(e) => e,
        None => run_single(cfg, Head::Softmax, &supervised, dataset, &images, &data)?,
    };
    stages.push(stage_result(Stage::Softmax, g, m1));
    let m2 = run_single(cfg, arcface, &supervised, dataset, &images, &data)?;
    stages.push(stage_result(Stage::ArcFace, g, m2));
    let m3 = run_single(cfg, arcface, &mean_teacher, dataset, &images, &data)?;
    stages.push(stage_result(Stage::MeanTeacher, g, m3));

    let members = cfg
        .member_backbones()
        .iter()
        .enumerate()
        .map(|(i, b)| TrainState::new(b, arcface, cfg.train.seed.wrapping_add(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let mut ens = EnsembleState::new(members)?;
    fit_ensemble(&mut ens, &cfg.train, &dataset.manifest, &data, &images, cfg.pseudo_start_epoch, None)?;
    let preds = ensemble_predict_map(&ens.members, &images, &data.unlabeled)?;
    let m4 = EvalResult::score(&argmax_predictions(&preds), &dataset.manifest)?;
    stages.push(stage_result(Stage::EnsemblePseudo, g, m4));
    let m5 = EvalResult::score(&apply_postprocess(&preds, &dataset.manifest)?, &dataset.manifest)?;
    stages.push(stage_result(Stage::PostProcessed, g, m5));

    let mut verdicts: Vec<Verdict> = stages
        .windows(2)
        .map(|w| Verdict {
            claim: format!("{} >= {}", w[1].label, w[0].label),
            holds: w[1].eval.multiclass_accuracy >= w[0].eval.multiclass_accuracy,
        })
        .collect();
    let acc = |g: Grouping| normalization.iter().find(|s| s.grouping == g).map(|s| s.eval.multiclass_accuracy);
    for (hi, lo) in [(Grouping::Plate, Grouping::Batch), (Grouping::Batch, Grouping::Cell)] {
        if let (Some(a), Some(b)) = (acc(hi), acc(lo)) {
            verdicts.push(Verdict {
                claim: format!("Model 1: {hi} normalization > {lo} normalization"),
                holds: a > b,
            });
        }
    }

    Ok(LadderReport {
        seed: cfg.train.seed,
        normalization,
        stages,
        verdicts,
        reference_ladder: REFERENCE_LADDER.iter().map(|(n, a)| (n.to_string(), *a)).collect(),
        reference_normalization: REFERENCE_NORMALIZATION.to_vec(),
    })
}
