//! Plate-screen metadata, normalization strategies, the synthetic generator
//! and the dataset file formats.

mod io;
mod manifest;
mod norm;
mod synthetic;

pub use io::{
    decode_images, encode_images, read_dataset, read_manifest, read_manifest_file, read_stats, write_dataset, write_stats,
    IMAGES_FILE, IMAGES_MAGIC, MANIFEST_FILE, STATS_FILE,
};
pub use manifest::{Dataset, DatasetManifest, ImageStore, PlateKey, Split, WellRecord};
pub use norm::{compute_norm_stats, normalize, ChannelStats, Grouping, NormStats, NormalizedImages, STD_FLOOR};
pub use synthetic::{generate_synthetic, SyntheticConfig, CELL_TYPE_NAMES};
