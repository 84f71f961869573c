//! Small synthetic screens shared by the training tests.
#![allow(dead_code)]

use platescope::losses::ArcFaceConfig;
use platescope::model::{BackboneConfig, Head};
use platescope::plate_data::*;
use platescope::trainer::{TrainConfig, TrainData, TrainState};

pub struct Setup {
    pub dataset: Dataset,
    pub images: NormalizedImages,
    pub data: TrainData,
    pub backbone: BackboneConfig,
}

pub fn synthetic(classes: usize, seed: u64) -> SyntheticConfig {
    SyntheticConfig {
        num_classes: classes,
        wells_per_plate: classes,
        plates_per_experiment: 2,
        num_experiments: 2,
        channels: 2,
        height: 8,
        width: 8,
        seed,
        ..SyntheticConfig::default()
    }
}

pub fn setup_from(cfg: &SyntheticConfig) -> Setup {
    let dataset = generate_synthetic(cfg).unwrap();
    let stats = compute_norm_stats(&dataset.manifest, &dataset.images, Grouping::Plate).unwrap();
    let images = NormalizedImages::new(&dataset, &stats).unwrap();
    let data = TrainData::from_manifest(&dataset.manifest);
    let backbone = BackboneConfig {
        input_channels: cfg.channels,
        stem_channels: 4,
        num_blocks: 2,
        embedding_dim: 8,
        num_classes: cfg.num_classes,
        ..BackboneConfig::default()
    };
    Setup {
        dataset,
        images,
        data,
        backbone,
    }
}

pub fn setup(seed: u64) -> Setup {
    setup_from(&synthetic(8, seed))
}

pub fn arcface(classes: usize) -> Head {
    Head::ArcFace(ArcFaceConfig::new(16.0, 0.1, classes).unwrap())
}

pub fn train_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        base_lr: 1e-2,
        lr_schedule: vec![(0.5, 3e-3)],
        total_epochs: epochs,
        ema_decay: 0.9,
        consistency_rampup_epochs: 2,
        ..TrainConfig::default()
    }
}

impl Setup {
    pub fn state(&self, seed: u64) -> TrainState {
        TrainState::new(&self.backbone, arcface(self.backbone.num_classes), seed).unwrap()
    }
}

pub mod cli {
    use std::path::Path;
    use std::process::{Command, Output};
    use std::time::{Duration, Instant};

    pub fn platescope(args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_platescope"))
            .args(args)
            .env("RUST_LOG", "warn")
            .output()
            .expect("binary runs")
    }

    pub fn ok(args: &[&str]) -> Output {
        let out = platescope(args);
        assert!(
            out.status.success(),
            "platescope {args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        out
    }

    pub fn code(out: &Output) -> i32 {
        out.status.code().expect("exited normally")
    }

    pub struct Smoke {
        pub elapsed: Duration,
        /// Accuracy of the post-processed CSV against the hidden labels.
        pub accuracy: f64,
    }

    /// `generate → train → evaluate → postprocess` with the toy preset.
    pub fn toy_pipeline(root: &Path) -> Smoke {
        let p = |name: &str| root.join(name).display().to_string();
        let start = Instant::now();
        ok(&["generate", "--preset", "toy", "--out", &p("data")]);
        ok(&["train", "--preset", "toy", "--dataset", &p("data"), "--out", &p("run")]);
        ok(&["evaluate", "--checkpoints", &p("run"), "--dataset", &p("data")]);
        ok(&[
            "postprocess",
            "--predictions",
            &p("run/predictions.json"),
            "--manifest",
            &p("data"),
            "--out",
            &p("run/balanced.csv"),
        ]);
        let elapsed = start.elapsed();
        let manifest = platescope::plate_data::read_manifest(&root.join("data")).unwrap();
        let csv = std::fs::read_to_string(root.join("run/balanced.csv")).unwrap();
        let mut hits = 0;
        let mut total = 0;
        for line in csv.lines().skip(1) {
            let (w, c) = line.split_once(',').unwrap();
            let truth = manifest.record_for_image(w.parse().unwrap()).unwrap().true_label().unwrap();
            hits += usize::from(c.parse::<usize>().unwrap() == truth);
            total += 1;
        }
        Smoke {
            elapsed,
            accuracy: hits as f64 / total as f64,
        }
    }
}
