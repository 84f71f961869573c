//! Binary checkpoint codec.
//!
//! Layout: `"CKPT"`, `u32` version, `u32` entry count, then per entry a `u16`
//! name length, the UTF-8 name, a `u8` rank, `rank` × `u32` dimensions and the
//! values as little-endian `f64`. A trailing CRC32 covers every preceding
//! byte. All integers are little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::optim::AdamState;
use super::TrainState;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{Head, ModelParams};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

const STUDENT: &str = "student/";
const TEACHER: &str = "teacher/";
const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";
const META_STEP: &str = "meta/adam_step";
const META_EPOCH: &str = "meta/epoch";
const META_SEED: &str = "meta/seed";
const META_BEST: &str = "meta/best_val_accuracy";

fn scalar(v: f64) -> Tensor {
    Tensor::new(vec![1], vec![v]).unwrap()
}

/// Flattens a training state into named tensors.
pub fn state_entries(state: &TrainState) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    for (k, t) in state.student.iter() {
        out.push((format!("{STUDENT}{k}"), t.clone()));
    }
    for (k, t) in state.teacher.iter() {
        out.push((format!("{TEACHER}{k}"), t.clone()));
    }
    for (prefix, moments) in [(ADAM_M, &state.adam.m), (ADAM_V, &state.adam.v)] {
        for (k, v) in moments {
            let shape = state.student.get(k).map_or_else(|| vec![v.len()], |t| t.shape().to_vec());
            out.push((format!("{prefix}{k}"), Tensor::new(shape, v.clone()).unwrap()));
        }
    }
    // u64 values split into exact 32-bit halves
    let split = |v: u64| Tensor::new(vec![2], vec![(v & 0xFFFF_FFFF) as f64, (v >> 32) as f64]).unwrap();
    out.push((META_STEP.into(), split(state.adam.step)));
    out.push((META_EPOCH.into(), scalar(state.epoch as f64)));
    out.push((META_SEED.into(), split(state.seed)));
    out.push((META_BEST.into(), scalar(state.best_val_accuracy)));
    out
}

pub fn encode_entries(entries: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len()).map_err(|_| Error::Format(format!("entry name too long: {name}")))?;
        let rank = u8::try_from(t.rank()).map_err(|_| Error::Format(format!("rank too large for {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(bytes);
        out.push(rank);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated(self.path.to_path_buf()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_entries(bytes: &[u8], path: &Path) -> Result<Vec<(String, Tensor)>> {
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "CKPT",
        });
    }
    if bytes.len() < 16 {
        return Err(Error::Truncated(path.to_path_buf()));
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum {
            path: path.to_path_buf(),
            stored,
            computed,
        });
    }
    let mut r = Reader { bytes: body, pos: 4, path };
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("{}: unsupported checkpoint version {version}", path.display())));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format(format!("{}: entry name is not UTF-8", path.display())))?
            .to_string();
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Truncated(path.to_path_buf()))?)?;
        let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        entries.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != body.len() {
        return Err(Error::Format(format!("{}: trailing bytes before checksum", path.display())));
    }
    Ok(entries)
}

/// Rebuilds a training state; `head` is not stored in the checkpoint.
pub fn state_from_entries(entries: Vec<(String, Tensor)>, head: Head) -> Result<TrainState> {
    let mut student = ModelParams::new();
    let mut teacher = ModelParams::new();
    let mut m = BTreeMap::new();
    let mut v = BTreeMap::new();
    let mut meta: BTreeMap<String, Tensor> = BTreeMap::new();
    for (name, t) in entries {
        if let Some(k) = name.strip_prefix(STUDENT) {
            student.insert(k, t);
        } else if let Some(k) = name.strip_prefix(TEACHER) {
            teacher.insert(k, t);
        } else if let Some(k) = name.strip_prefix(ADAM_M) {
            m.insert(k.to_string(), t.into_data());
        } else if let Some(k) = name.strip_prefix(ADAM_V) {
            v.insert(k.to_string(), t.into_data());
        } else {
            meta.insert(name, t);
        }
    }
    let get = |key: &str| {
        meta.get(key)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks {key}")))
            .map(|t| t.data().to_vec())
    };
    let join = |v: Vec<f64>| -> Result<u64> {
        match v[..] {
            [lo, hi] => Ok(lo as u64 | ((hi as u64) << 32)),
            _ => Err(Error::Format("malformed 64-bit entry".into())),
        }
    };
    student.check_compatible(&teacher)?;
    Ok(TrainState {
        head,
        student,
        teacher,
        adam: AdamState {
            step: join(get(META_STEP)?)?,
            m,
            v,
        },
        epoch: get(META_EPOCH)?[0] as usize,
        seed: join(get(META_SEED)?)?,
        best_val_accuracy: get(META_BEST)?[0],
    })
}

pub fn write_checkpoint(path: &Path, state: &TrainState) -> Result<()> {
    let bytes = encode_entries(&state_entries(state))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path, head: Head) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    state_from_entries(decode_entries(&bytes, path)?, head)
}
