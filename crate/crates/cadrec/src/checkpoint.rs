//! Binary tensor archive used for checkpoints and density-map exports.
//!
//! Layout: magic string, format version, then one record per tensor in
//! path-sorted order:
//!
//! ```text
//! u64 LE  path byte length
//! [u8]    path (UTF-8)
//! u64 LE  rank
//! u64 LE  extent, per axis
//! u64 LE  bytes per value: 8 or 4
//! f64/f32 LE  data, row-major
//! ```
//!
//! Values are stored as f64 so a load reproduces the written tensors
//! bit for bit; the 4-byte mode is an opt-in compact form that widens
//! back to f64 on load. Writing the same tensors twice produces
//! byte-identical files.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::{Error, Result};

const MAGIC: &[u8] = b"CADREC-TENSORS\n";
const VERSION: u64 = 2;

/// On-disk value width. `F64` is lossless and the default; `F32` halves
/// the file at the cost of rounding values on write.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Storage {
    F64,
    F32,
}

impl Storage {
    fn value_bytes(self) -> u64 {
        match self {
            Storage::F64 => 8,
            Storage::F32 => 4,
        }
    }
}

pub fn write_tensors<'a>(
    path: &Path,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<()> {
    write_tensors_with(path, tensors, Storage::F64)
}

pub fn write_tensors_with<'a>(
    path: &Path,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
    storage: Storage,
) -> Result<()> {
    let mut entries: Vec<(&str, &Tensor)> = tensors.into_iter().collect();
    entries.sort_by_key(|(name, _)| *name);
    for pair in entries.windows(2) {
        if pair[0].0 == pair[1].0 {
            return Err(Error::Checkpoint(format!(
                "duplicate tensor name {:?}",
                pair[0].0
            )));
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for (name, t) in entries {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u64).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        w.write_all(&storage.value_bytes().to_le_bytes())?;
        match storage {
            Storage::F64 => {
                for &v in t.data() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            Storage::F32 => {
                for &v in t.data() {
                    w.write_all(&(v as f32).to_le_bytes())?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = vec![0u8; MAGIC.len()];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("file too short for magic".into()))?;
    if magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = read_u64(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let mut out = Vec::new();
    loop {
        let mut probe = [0u8; 8];
        match r.read(&mut probe)? {
            0 => break,
            8 => {}
            n => {
                // partial length prefix: finish the read to fail cleanly
                let mut rest = probe[n..].to_vec();
                if r.read_exact(&mut rest).is_err() {
                    return Err(Error::Checkpoint("truncated record header".into()));
                }
                return Err(Error::Checkpoint("misaligned record header".into()));
            }
        }
        let name_len = u64::from_le_bytes(probe) as usize;
        if name_len > 1 << 20 {
            return Err(Error::Checkpoint(format!(
                "implausible path length {name_len}"
            )));
        }
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)
            .map_err(|_| Error::Checkpoint("truncated path".into()))?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Checkpoint("path is not UTF-8".into()))?;
        let rank = read_u64(&mut r)? as usize;
        if rank > 16 {
            return Err(Error::Checkpoint(format!("implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        match read_u64(&mut r)? {
            8 => {
                let mut buf = [0u8; 8];
                for _ in 0..numel {
                    r.read_exact(&mut buf)
                        .map_err(|_| Error::Checkpoint(format!("truncated data for {name:?}")))?;
                    data.push(f64::from_le_bytes(buf));
                }
            }
            4 => {
                let mut buf = [0u8; 4];
                for _ in 0..numel {
                    r.read_exact(&mut buf)
                        .map_err(|_| Error::Checkpoint(format!("truncated data for {name:?}")))?;
                    data.push(f32::from_le_bytes(buf) as f64);
                }
            }
            other => {
                return Err(Error::Checkpoint(format!(
                    "tensor {name:?} has unsupported value width {other}"
                )));
            }
        }
        let t = Tensor::new(shape, data)
            .map_err(|e| Error::Checkpoint(format!("tensor {name:?}: {e}")))?;
        out.push((name, t));
    }
    Ok(out)
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|_| Error::Checkpoint("truncated integer field".into()))?;
    Ok(u64::from_le_bytes(b))
}

/// Writes every parameter in the store, losslessly.
pub fn save_params(path: &Path, store: &ParamStore) -> Result<()> {
    write_tensors(path, store.iter())
}

/// Loads parameters into an already-initialised store. The file must
/// contain exactly the store's paths with matching shapes, so a checkpoint
/// from a different configuration is rejected rather than half-applied.
pub fn load_params(path: &Path, store: &mut ParamStore) -> Result<()> {
    let tensors = read_tensors(path)?;
    if tensors.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "parameter count mismatch: file has {}, model expects {}",
            tensors.len(),
            store.len()
        )));
    }
    for (name, t) in &tensors {
        if !store.contains(name) {
            return Err(Error::Checkpoint(format!(
                "file contains unknown parameter {name:?}"
            )));
        }
        let expected = store.get(name)?.shape().to_vec();
        if expected != t.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {name:?} has shape {:?}, model expects {:?}",
                t.shape(),
                expected
            )));
        }
    }
    for (name, t) in tensors {
        store.set_value(&name, t)?;
    }
    Ok(())
}
