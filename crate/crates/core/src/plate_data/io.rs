//! On-disk dataset layout.
//!
//! A dataset directory holds `manifest.json` and `images.bin`. The binary file
//! is `"PLT1"`, then `N, C, H, W` as little-endian `u32`, then `N·C·H·W`
//! little-endian `f32` values, then the CRC32 of those value bytes.

use std::fs;
use std::path::Path;

use super::manifest::{Dataset, DatasetManifest, ImageStore};
use super::norm::NormStats;
use crate::error::{Error, Result};

pub const IMAGES_MAGIC: &[u8; 4] = b"PLT1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const IMAGES_FILE: &str = "images.bin";
pub const STATS_FILE: &str = "stats.json";

pub fn encode_images(images: &ImageStore) -> Vec<u8> {
    let raw = images.raw();
    let mut out = Vec::with_capacity(4 + 16 + raw.len() * 4 + 4);
    out.extend_from_slice(IMAGES_MAGIC);
    for dim in [images.len(), images.channels, images.height, images.width] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    let payload_start = out.len();
    for v in raw {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out[payload_start..]);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn decode_images(bytes: &[u8], path: &Path) -> Result<ImageStore> {
    if bytes.len() < 4 || &bytes[..4] != IMAGES_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "PLT1",
        });
    }
    if bytes.len() < 20 {
        return Err(Error::Truncated(path.to_path_buf()));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (n, c, h, w) = (dim(0), dim(1), dim(2), dim(3));
    let values = n
        .checked_mul(c)
        .and_then(|v| v.checked_mul(h))
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| Error::Format(format!("{}: header dimensions overflow", path.display())))?;
    let end = 20 + values * 4;
    if bytes.len() < end + 4 {
        return Err(Error::Truncated(path.to_path_buf()));
    }
    if bytes.len() > end + 4 {
        return Err(Error::Format(format!("{}: trailing bytes after checksum", path.display())));
    }
    let payload = &bytes[20..end];
    let stored = u32::from_le_bytes(bytes[end..end + 4].try_into().unwrap());
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(Error::Checksum {
            path: path.to_path_buf(),
            stored,
            computed,
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    ImageStore::new(c, h, w, data)
}

pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    dataset.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = serde_json::to_string_pretty(&dataset.manifest).map_err(|e| Error::json("manifest", e))?;
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, manifest + "\n").map_err(|e| Error::io(&mpath, e))?;
    let ipath = dir.join(IMAGES_FILE);
    fs::write(&ipath, encode_images(&dataset.images)).map_err(|e| Error::io(&ipath, e))
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    read_manifest_file(&dir.join(MANIFEST_FILE))
}

pub fn read_manifest_file(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
    manifest.validate()?;
    Ok(manifest)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let ipath = dir.join(IMAGES_FILE);
    let bytes = fs::read(&ipath).map_err(|e| Error::io(&ipath, e))?;
    let images = decode_images(&bytes, &ipath)?;
    let dataset = Dataset { manifest, images };
    dataset.validate()?;
    Ok(dataset)
}

pub fn write_stats(path: &Path, stats: &NormStats) -> Result<()> {
    let text = serde_json::to_string_pretty(stats).map_err(|e| Error::json("stats", e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_stats(path: &Path) -> Result<NormStats> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plate_data::{compute_norm_stats, generate_synthetic, Grouping, SyntheticConfig};

    fn small() -> Dataset {
        generate_synthetic(&SyntheticConfig {
            num_classes: 4,
            wells_per_plate: 4,
            plates_per_experiment: 1,
            num_experiments: 2,
            channels: 2,
            height: 4,
            width: 4,
            test_fraction: 0.25,
            val_fraction: 0.0,
            ..SyntheticConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let d = small();
        write_dataset(dir.path(), &d).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back, d);
        assert_eq!(encode_images(&back.images), fs::read(dir.path().join(IMAGES_FILE)).unwrap());
        assert_eq!(back.manifest.records.len(), back.images.len());
    }

    #[test]
    fn corruption_is_classified() {
        let d = small();
        let bytes = encode_images(&d.images);
        let p = Path::new("images.bin");

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_images(&bad, p), Err(Error::BadMagic { .. })));

        assert!(matches!(decode_images(&bytes[..bytes.len() - 5], p), Err(Error::Truncated(_))));

        let mut flipped = bytes.clone();
        flipped[30] ^= 0x01;
        assert!(matches!(decode_images(&flipped, p), Err(Error::Checksum { .. })));
    }

    #[test]
    fn stats_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = small();
        let stats = compute_norm_stats(&d.manifest, &d.images, Grouping::Plate).unwrap();
        let path = dir.path().join(STATS_FILE);
        write_stats(&path, &stats).unwrap();
        assert_eq!(read_stats(&path).unwrap(), stats);
    }
}
