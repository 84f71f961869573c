//! Synthetic plate screen with controllable batch and plate nuisance.
//!
//! Each `(class, channel)` pair owns a set of Gaussian blobs, and each
//! `(class, channel, cell type)` triple adds a weaker cell-specific set on top
//! of a per-cell-type background level. A well's image is
//!
//! ```text
//! plate_gain · batch_gain · template + batch_offset + plate_offset + noise
//! ```
//!
//! with gains `exp(std · z)` and offsets `std · z` drawn once per group and
//! channel.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::manifest::{Dataset, DatasetManifest, ImageStore, Split, WellRecord};
use crate::error::{Error, Result};
use crate::rng::stream;

const TAG_CLASS_BLOBS: u64 = 1;
const TAG_CELL_BLOBS: u64 = 2;
const TAG_BACKGROUND: u64 = 3;
const TAG_BATCH: u64 = 4;
const TAG_PLATE: u64 = 5;
const TAG_LAYOUT: u64 = 6;
const TAG_PIXELS: u64 = 7;

pub const CELL_TYPE_NAMES: [&str; 4] = ["HUVEC", "RPE", "HepG2", "U2OS"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    /// Must equal `num_classes`: every plate holds each class once.
    pub wells_per_plate: usize,
    pub plates_per_experiment: usize,
    pub num_experiments: usize,
    pub num_cell_types: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub batch_gain_std: f64,
    pub batch_offset_std: f64,
    pub plate_gain_std: f64,
    pub plate_offset_std: f64,
    pub pixel_noise_std: f64,
    /// Per-well displacement of all blobs, in pixels.
    pub blob_jitter_std: f64,
    /// Amplitude of the cell-type-specific blobs relative to the shared ones.
    pub cell_signal_strength: f64,
    /// Fraction of each plate's wells whose labels are hidden.
    pub test_fraction: f64,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_classes: 16,
            wells_per_plate: 16,
            plates_per_experiment: 2,
            num_experiments: 4,
            num_cell_types: 2,
            channels: 6,
            height: 32,
            width: 32,
            batch_gain_std: 0.3,
            batch_offset_std: 0.3,
            plate_gain_std: 0.3,
            plate_offset_std: 0.3,
            pixel_noise_std: 0.1,
            blob_jitter_std: 1.0,
            cell_signal_strength: 0.5,
            test_fraction: 0.3,
            val_fraction: 0.15,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes < 2 {
            return bad("num_classes must be >= 2".into());
        }
        if self.wells_per_plate != self.num_classes {
            return bad(format!(
                "wells_per_plate ({}) must equal num_classes ({})",
                self.wells_per_plate, self.num_classes
            ));
        }
        if self.plates_per_experiment == 0 || self.num_experiments == 0 || self.num_cell_types == 0 {
            return bad("plate, experiment and cell-type counts must be positive".into());
        }
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return bad("image dimensions must be positive".into());
        }
        let stds = [
            ("batch_gain_std", self.batch_gain_std),
            ("batch_offset_std", self.batch_offset_std),
            ("plate_gain_std", self.plate_gain_std),
            ("plate_offset_std", self.plate_offset_std),
            ("pixel_noise_std", self.pixel_noise_std),
            ("blob_jitter_std", self.blob_jitter_std),
            ("cell_signal_strength", self.cell_signal_strength),
        ];
        for (name, v) in stds {
            if !(v >= 0.0) {
                return bad(format!("{name} must be >= 0, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.test_fraction) || !(0.0..1.0).contains(&self.val_fraction) {
            return bad("split fractions must lie in [0, 1)".into());
        }
        let (test, val) = self.split_counts();
        if test + val >= self.num_classes {
            return bad("split fractions leave no training wells on a plate".into());
        }
        Ok(())
    }

    /// `(test, val)` wells per plate.
    pub fn split_counts(&self) -> (usize, usize) {
        let k = self.num_classes as f64;
        ((self.test_fraction * k).round() as usize, (self.val_fraction * k).round() as usize)
    }

    pub fn grid(&self) -> (usize, usize) {
        let cols = (self.wells_per_plate as f64).sqrt().ceil() as usize;
        (self.wells_per_plate.div_ceil(cols), cols)
    }
}

#[derive(Debug, Clone)]
struct Blob {
    cy: f64,
    cx: f64,
    sigma: f64,
    amp: f64,
}

fn draw_blobs<R: Rng>(rng: &mut R, h: usize, w: usize, amp_scale: f64) -> Vec<Blob> {
    let count = rng.random_range(1..=3);
    let size = h.min(w) as f64;
    (0..count)
        .map(|_| Blob {
            cy: rng.random_range(0.15..0.85) * h as f64,
            cx: rng.random_range(0.15..0.85) * w as f64,
            sigma: rng.random_range(0.06..0.15) * size,
            amp: rng.random_range(0.3..1.0) * amp_scale,
        })
        .collect()
}

struct Templates {
    /// `[class][cell][channel]` blob lists.
    blobs: Vec<Vec<Vec<Vec<Blob>>>>,
    /// `[cell][channel]` background level.
    background: Vec<Vec<f64>>,
}

impl Templates {
    fn new(cfg: &SyntheticConfig) -> Self {
        let blobs = (0..cfg.num_classes)
            .map(|c| {
                (0..cfg.num_cell_types)
                    .map(|t| {
                        (0..cfg.channels)
                            .map(|ch| {
                                let mut shared = stream(cfg.seed, &[TAG_CLASS_BLOBS, c as u64, ch as u64]);
                                let mut own =
                                    stream(cfg.seed, &[TAG_CELL_BLOBS, c as u64, ch as u64, t as u64]);
                                let mut b = draw_blobs(&mut shared, cfg.height, cfg.width, 1.0);
                                if cfg.cell_signal_strength > 0.0 {
                                    b.extend(draw_blobs(&mut own, cfg.height, cfg.width, cfg.cell_signal_strength));
                                }
                                b
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let background = (0..cfg.num_cell_types)
            .map(|t| {
                let mut rng = stream(cfg.seed, &[TAG_BACKGROUND, t as u64]);
                (0..cfg.channels).map(|_| rng.random_range(0.2..0.6)).collect()
            })
            .collect();
        Self { blobs, background }
    }
}

#[derive(Debug, Clone, Copy)]
struct Nuisance {
    gain: f64,
    offset: f64,
}

fn draw_nuisance(seed: u64, tag: &[u64], channels: usize, gain_std: f64, offset_std: f64) -> Vec<Nuisance> {
    let mut rng = stream(seed, tag);
    (0..channels)
        .map(|_| {
            let zg: f64 = StandardNormal.sample(&mut rng);
            let zo: f64 = StandardNormal.sample(&mut rng);
            Nuisance {
                gain: (gain_std * zg).exp(),
                offset: offset_std * zo,
            }
        })
        .collect()
}

/// Builds a dataset in which every plate holds each class exactly once.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    cfg.validate()?;
    let templates = Templates::new(cfg);
    let (_, cols) = cfg.grid();
    let (n_test, n_val) = cfg.split_counts();

    let mut records = Vec::with_capacity(cfg.num_experiments * cfg.plates_per_experiment * cfg.num_classes);
    for e in 0..cfg.num_experiments {
        for p in 0..cfg.plates_per_experiment {
            let mut layout = stream(cfg.seed, &[TAG_LAYOUT, e as u64, p as u64]);
            let mut classes: Vec<u32> = (0..cfg.num_classes as u32).collect();
            classes.shuffle(&mut layout);
            let mut wells: Vec<usize> = (0..cfg.wells_per_plate).collect();
            wells.shuffle(&mut layout);
            let mut split = vec![Split::Train; cfg.wells_per_plate];
            for (rank, &w) in wells.iter().enumerate() {
                if rank < n_test {
                    split[w] = Split::Test;
                } else if rank < n_test + n_val {
                    split[w] = Split::Val;
                }
            }
            for (well, &class) in classes.iter().enumerate() {
                records.push(WellRecord {
                    experiment_id: e as u32,
                    plate_index: p as u32,
                    well_position: ((well / cols) as u32, (well % cols) as u32),
                    cell_type: (e % cfg.num_cell_types) as u32,
                    class_label: Some(class),
                    image_index: records.len() as u32,
                    split: split[well],
                });
            }
        }
    }

    let batch: Vec<Vec<Nuisance>> = (0..cfg.num_experiments)
        .map(|e| draw_nuisance(cfg.seed, &[TAG_BATCH, e as u64], cfg.channels, cfg.batch_gain_std, cfg.batch_offset_std))
        .collect();
    let plate: Vec<Vec<Vec<Nuisance>>> = (0..cfg.num_experiments)
        .map(|e| {
            (0..cfg.plates_per_experiment)
                .map(|p| {
                    draw_nuisance(
                        cfg.seed,
                        &[TAG_PLATE, e as u64, p as u64],
                        cfg.channels,
                        cfg.plate_gain_std,
                        cfg.plate_offset_std,
                    )
                })
                .collect()
        })
        .collect();

    let (h, w) = (cfg.height, cfg.width);
    let per_image = cfg.channels * h * w;
    let mut data = vec![0f32; records.len() * per_image];
    data.par_chunks_mut(per_image)
        .zip(records.par_iter())
        .for_each(|(img, r)| {
            let mut rng = stream(cfg.seed, &[TAG_PIXELS, r.image_index as u64]);
            let (dy, dx) = if cfg.blob_jitter_std > 0.0 {
                let zy: f64 = StandardNormal.sample(&mut rng);
                let zx: f64 = StandardNormal.sample(&mut rng);
                (zy * cfg.blob_jitter_std, zx * cfg.blob_jitter_std)
            } else {
                (0.0, 0.0)
            };
            let (e, p, t) = (r.experiment_id as usize, r.plate_index as usize, r.cell_type as usize);
            let class = r.class_label.expect("synthetic wells are labeled") as usize;
            for ch in 0..cfg.channels {
                let bn = batch[e][ch];
                let pn = plate[e][p][ch];
                let gain = pn.gain * bn.gain;
                let offset = bn.offset + pn.offset;
                let blobs = &templates.blobs[class][t][ch];
                let background = templates.background[t][ch];
                for y in 0..h {
                    for x in 0..w {
                        let mut v = background;
                        for b in blobs {
                            let ddy = y as f64 - (b.cy + dy);
                            let ddx = x as f64 - (b.cx + dx);
                            v += b.amp * (-(ddy * ddy + ddx * ddx) / (2.0 * b.sigma * b.sigma)).exp();
                        }
                        let noise = if cfg.pixel_noise_std > 0.0 {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            z * cfg.pixel_noise_std
                        } else {
                            0.0
                        };
                        img[(ch * h + y) * w + x] = (gain * v + offset + noise) as f32;
                    }
                }
            }
        });

    let cell_types = (0..cfg.num_cell_types)
        .map(|t| CELL_TYPE_NAMES.get(t).map_or_else(|| format!("cell{t}"), |s| s.to_string()))
        .collect();
    let manifest = DatasetManifest {
        num_classes: cfg.num_classes as u32,
        num_experiments: cfg.num_experiments as u32,
        plates_per_experiment: cfg.plates_per_experiment as u32,
        channels: cfg.channels as u32,
        height: h as u32,
        width: w as u32,
        cell_types,
        records,
    };
    let dataset = Dataset {
        manifest,
        images: ImageStore::new(cfg.channels, h, w, data)?,
    };
    dataset.validate()?;
    Ok(dataset)
}
