use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Which part of the pipeline may see a record's label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    /// Unlabeled during training; ground truth kept for scoring only.
    Test,
}

/// An experimental plate: plate `plate` of experiment (batch) `experiment`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PlateKey {
    pub experiment: u32,
    pub plate: u32,
}

impl fmt::Display for PlateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.experiment, self.plate)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WellRecord {
    pub experiment_id: u32,
    pub plate_index: u32,
    /// `(row, col)` on the plate grid.
    pub well_position: (u32, u32),
    pub cell_type: u32,
    pub class_label: Option<u32>,
    pub image_index: u32,
    pub split: Split,
}

impl WellRecord {
    pub fn plate_key(&self) -> PlateKey {
        PlateKey {
            experiment: self.experiment_id,
            plate: self.plate_index,
        }
    }

    /// Label visible to training and validation; `None` for test wells.
    pub fn visible_label(&self) -> Option<usize> {
        match self.split {
            Split::Test => None,
            _ => self.class_label.map(|c| c as usize),
        }
    }

    /// Ground truth regardless of split, for scoring.
    pub fn true_label(&self) -> Option<usize> {
        self.class_label.map(|c| c as usize)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub num_classes: u32,
    pub num_experiments: u32,
    pub plates_per_experiment: u32,
    pub channels: u32,
    pub height: u32,
    pub width: u32,
    /// Display names, indexed by `WellRecord::cell_type`.
    pub cell_types: Vec<String>,
    pub records: Vec<WellRecord>,
}

impl DatasetManifest {
    pub fn num_plates(&self) -> usize {
        (self.num_experiments * self.plates_per_experiment) as usize
    }

    pub fn records_in(&self, split: Split) -> impl Iterator<Item = &WellRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn plates(&self) -> BTreeSet<PlateKey> {
        self.records.iter().map(WellRecord::plate_key).collect()
    }

    /// Records grouped by plate, each group in image-index order.
    pub fn by_plate(&self) -> BTreeMap<PlateKey, Vec<&WellRecord>> {
        let mut map: BTreeMap<PlateKey, Vec<&WellRecord>> = BTreeMap::new();
        for r in &self.records {
            map.entry(r.plate_key()).or_default().push(r);
        }
        for v in map.values_mut() {
            v.sort_by_key(|r| r.image_index);
        }
        map
    }

    pub fn record_for_image(&self, image_index: u32) -> Option<&WellRecord> {
        self.records.iter().find(|r| r.image_index == image_index)
    }

    /// Classes a test well of `plate` may hold: all classes minus those
    /// already carried by the plate's labeled wells.
    pub fn eligible_test_classes(&self, plate: PlateKey) -> Vec<usize> {
        let taken: BTreeSet<usize> = self
            .records
            .iter()
            .filter(|r| r.plate_key() == plate && r.split != Split::Test)
            .filter_map(WellRecord::visible_label)
            .collect();
        (0..self.num_classes as usize).filter(|c| !taken.contains(c)).collect()
    }

    /// Checks the structural invariants of the manifest.
    pub fn validate(&self) -> Result<()> {
        let plates = self.plates();
        if plates.len() != self.num_plates() {
            return Err(Error::Invariant(format!(
                "{} plates present, expected {} x {}",
                plates.len(),
                self.num_experiments,
                self.plates_per_experiment
            )));
        }
        let mut indices: Vec<u32> = self.records.iter().map(|r| r.image_index).collect();
        indices.sort_unstable();
        if indices.iter().enumerate().any(|(i, &v)| v as usize != i) {
            return Err(Error::Invariant("image_index values are not unique and dense".into()));
        }
        let mut cell_of_experiment: BTreeMap<u32, u32> = BTreeMap::new();
        let mut seen: BTreeSet<(PlateKey, u32)> = BTreeSet::new();
        for r in &self.records {
            if let Some(&c) = cell_of_experiment.get(&r.experiment_id) {
                if c != r.cell_type {
                    return Err(Error::Invariant(format!(
                        "experiment {} mixes cell types {c} and {}",
                        r.experiment_id, r.cell_type
                    )));
                }
            }
            cell_of_experiment.insert(r.experiment_id, r.cell_type);
            if r.cell_type as usize >= self.cell_types.len() {
                return Err(Error::Invariant(format!("unknown cell type {}", r.cell_type)));
            }
            if let Some(label) = r.class_label {
                if label >= self.num_classes {
                    return Err(Error::Invariant(format!("class label {label} out of range")));
                }
                if !seen.insert((r.plate_key(), label)) {
                    return Err(Error::Invariant(format!(
                        "class {label} occurs twice on plate {}",
                        r.plate_key()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Raw images as 32-bit floats, `[N, C, H, W]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageStore {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    data: Vec<f32>,
}

impl ImageStore {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        let per = channels * height * width;
        if per == 0 || data.len() % per != 0 {
            return Err(Error::shape(
                "ImageStore::new",
                format!("{} values do not tile images of {channels}x{height}x{width}", data.len()),
            ));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.image_len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn image(&self, index: usize) -> &[f32] {
        let n = self.image_len();
        &self.data[index * n..(index + 1) * n]
    }

    pub fn raw(&self) -> &[f32] {
        &self.data
    }

    /// One image as a `[C, H, W]` tensor.
    pub fn tensor(&self, index: usize) -> Tensor {
        let data = self.image(index).iter().map(|&v| v as f64).collect();
        Tensor::new(vec![self.channels, self.height, self.width], data).expect("image shape")
    }
}

/// Manifest plus the image store it indexes.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub images: ImageStore,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        self.manifest.validate()?;
        if self.manifest.records.len() != self.images.len() {
            return Err(Error::Invariant(format!(
                "manifest has {} records but image store holds {} images",
                self.manifest.records.len(),
                self.images.len()
            )));
        }
        let m = &self.manifest;
        if (m.channels as usize, m.height as usize, m.width as usize)
            != (self.images.channels, self.images.height, self.images.width)
        {
            return Err(Error::Invariant("manifest image dimensions differ from image store".into()));
        }
        Ok(())
    }
}
