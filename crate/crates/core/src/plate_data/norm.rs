//! Per-group, per-channel standardization by cell type, batch or plate.

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::manifest::{Dataset, DatasetManifest, ImageStore, Split, WellRecord};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Floor applied to the standard deviation at normalization time.
pub const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Grouping {
    Cell,
    Batch,
    Plate,
}

impl Grouping {
    pub const ALL: [Grouping; 3] = [Grouping::Cell, Grouping::Batch, Grouping::Plate];

    pub fn key(&self, r: &WellRecord) -> String {
        match self {
            Grouping::Cell => r.cell_type.to_string(),
            Grouping::Batch => r.experiment_id.to_string(),
            Grouping::Plate => format!("{}/{}", r.experiment_id, r.plate_index),
        }
    }
}

impl fmt::Display for Grouping {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Grouping::Cell => "cell",
            Grouping::Batch => "batch",
            Grouping::Plate => "plate",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub grouping: Grouping,
    pub groups: BTreeMap<String, ChannelStats>,
}

/// Population mean and std (ddof 0) per channel over the training images of
/// each group.
///
/// Images are visited in image-index order, so the result does not depend on
/// the order of the manifest records.
pub fn compute_norm_stats(manifest: &DatasetManifest, images: &ImageStore, grouping: Grouping) -> Result<NormStats> {
    let mut members: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for r in &manifest.records {
        let entry = members.entry(grouping.key(r)).or_default();
        if r.split == Split::Train {
            entry.push(r.image_index as usize);
        }
    }
    let channels = images.channels;
    let plane = images.height * images.width;
    let mut groups = BTreeMap::new();
    for (key, mut idx) in members {
        if idx.is_empty() {
            return Err(Error::EmptyGroup(format!("{grouping}:{key}")));
        }
        idx.sort_unstable();
        let count = (idx.len() * plane) as f64;
        let mut mean = vec![0.0; channels];
        let mut std = vec![0.0; channels];
        for ch in 0..channels {
            let pixels = || idx.iter().flat_map(|&i| images.image(i)[ch * plane..(ch + 1) * plane].iter());
            let m = pixels().map(|&v| v as f64).sum::<f64>() / count;
            let var = pixels().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / count;
            mean[ch] = m;
            std[ch] = var.sqrt();
        }
        groups.insert(key, ChannelStats { mean, std });
    }
    Ok(NormStats { grouping, groups })
}

impl NormStats {
    pub fn stats_for(&self, record: &WellRecord) -> Result<&ChannelStats> {
        let key = self.grouping.key(record);
        self.groups
            .get(&key)
            .ok_or_else(|| Error::MissingGroup(format!("{}:{key}", self.grouping)))
    }
}

/// `(x − mean) / max(std, STD_FLOOR)` per channel of a `[C, H, W]` image.
pub fn normalize(image: &Tensor, record: &WellRecord, stats: &NormStats) -> Result<Tensor> {
    let s = stats.stats_for(record)?;
    let c = image.shape().first().copied().unwrap_or(0);
    if image.rank() != 3 || c != s.mean.len() {
        return Err(Error::shape(
            "normalize",
            format!("image {:?} vs {} channel stats", image.shape(), s.mean.len()),
        ));
    }
    let plane = image.len() / c;
    let mut out = image.clone();
    for (ch, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let (m, sd) = (s.mean[ch], s.std[ch].max(STD_FLOOR));
        chunk.iter_mut().for_each(|v| *v = (*v - m) / sd);
    }
    Ok(out)
}

/// Every image of a dataset normalized once, indexed by image index.
#[derive(Debug, Clone)]
pub struct NormalizedImages {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    data: Vec<f64>,
}

impl NormalizedImages {
    pub fn new(dataset: &Dataset, stats: &NormStats) -> Result<Self> {
        let images = &dataset.images;
        let per = images.image_len();
        let mut data = vec![0.0; images.len() * per];
        let mut by_index: Vec<Option<&WellRecord>> = vec![None; images.len()];
        for r in &dataset.manifest.records {
            by_index[r.image_index as usize] = Some(r);
        }
        let plane = images.height * images.width;
        data.par_chunks_mut(per)
            .enumerate()
            .try_for_each(|(i, out)| -> Result<()> {
                let r = by_index[i].ok_or_else(|| Error::Invariant(format!("image {i} has no record")))?;
                let s = stats.stats_for(r)?;
                for (ch, (o, src)) in out.chunks_mut(plane).zip(images.image(i).chunks(plane)).enumerate() {
                    let (m, sd) = (s.mean[ch], s.std[ch].max(STD_FLOOR));
                    for (ov, &sv) in o.iter_mut().zip(src) {
                        *ov = (sv as f64 - m) / sd;
                    }
                }
                Ok(())
            })?;
        Ok(Self {
            channels: images.channels,
            height: images.height,
            width: images.width,
            data,
        })
    }

    pub fn image(&self, index: usize) -> &[f64] {
        let per = self.channels * self.height * self.width;
        &self.data[index * per..(index + 1) * per]
    }

    pub fn tensor(&self, index: usize) -> Tensor {
        Tensor::new(vec![self.channels, self.height, self.width], self.image(index).to_vec()).expect("image shape")
    }

    /// `[N, C, H, W]` batch of the given images.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let per = self.channels * self.height * self.width;
        let mut data = Vec::with_capacity(per * indices.len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        Tensor::new(vec![indices.len(), self.channels, self.height, self.width], data).expect("batch shape")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plate_data::{generate_synthetic, SyntheticConfig};

    fn one_image_dataset(values: &[f32]) -> Dataset {
        let manifest = DatasetManifest {
            num_classes: 2,
            num_experiments: 1,
            plates_per_experiment: 1,
            channels: 1,
            height: 2,
            width: 2,
            cell_types: vec!["HUVEC".into()],
            records: vec![WellRecord {
                experiment_id: 0,
                plate_index: 0,
                well_position: (0, 0),
                cell_type: 0,
                class_label: Some(0),
                image_index: 0,
                split: Split::Train,
            }],
        };
        Dataset {
            manifest,
            images: ImageStore::new(1, 2, 2, values.to_vec()).unwrap(),
        }
    }

    #[test]
    fn hand_computed_stats_and_normalization() {
        let d = one_image_dataset(&[1.0, 2.0, 3.0, 4.0]);
        let stats = compute_norm_stats(&d.manifest, &d.images, Grouping::Plate).unwrap();
        let s = &stats.groups["0/0"];
        assert!((s.mean[0] - 2.5).abs() < 1e-15);
        assert!((s.std[0] - 1.25f64.sqrt()).abs() < 1e-15);

        let out = normalize(&d.images.tensor(0), &d.manifest.records[0], &stats).unwrap();
        let expected = [-1.341641, -0.447214, 0.447214, 1.341641];
        for (a, b) in out.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_channel_is_guarded() {
        let d = one_image_dataset(&[5.0; 4]);
        let stats = compute_norm_stats(&d.manifest, &d.images, Grouping::Cell).unwrap();
        assert_eq!(stats.groups["0"].std[0], 0.0);
        let out = normalize(&d.images.tensor(0), &d.manifest.records[0], &stats).unwrap();
        assert!(out.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn missing_group_is_fatal() {
        let d = one_image_dataset(&[1.0, 2.0, 3.0, 4.0]);
        let stats = compute_norm_stats(&d.manifest, &d.images, Grouping::Batch).unwrap();
        let mut r = d.manifest.records[0].clone();
        r.experiment_id = 9;
        assert!(matches!(normalize(&d.images.tensor(0), &r, &stats), Err(Error::MissingGroup(_))));
    }

    #[test]
    fn group_without_training_images_is_fatal() {
        let mut d = one_image_dataset(&[1.0, 2.0, 3.0, 4.0]);
        d.manifest.records[0].split = Split::Test;
        let err = compute_norm_stats(&d.manifest, &d.images, Grouping::Plate).unwrap_err();
        assert!(err.to_string().contains("plate:0/0"), "{err}");
    }

    #[test]
    fn group_counts() {
        let cfg = SyntheticConfig {
            num_classes: 8,
            wells_per_plate: 8,
            plates_per_experiment: 2,
            num_experiments: 3,
            channels: 2,
            height: 6,
            width: 6,
            ..SyntheticConfig::default()
        };
        let d = generate_synthetic(&cfg).unwrap();
        let count = |g| compute_norm_stats(&d.manifest, &d.images, g).unwrap().groups.len();
        assert_eq!(count(Grouping::Plate), 6);
        assert_eq!(count(Grouping::Batch), 3);
        assert_eq!(count(Grouping::Cell), 2);
    }
}
