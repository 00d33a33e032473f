//! Named-parameter checkpoint table.
//!
//! Layout (all integers little-endian u32):
//! `"MCKP"`, entry count, then per entry: name length, name bytes (UTF-8),
//! rank, dims, and `product(dims)` little-endian f64 values.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::params::ParamStore;
use super::{Result, Tensor, TensorError};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MCKP";

pub fn write_checkpoint<W: Write>(mut w: W, entries: &[(String, Tensor)]) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, t) in entries {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
        for &d in &t.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in &t.values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn corrupt(path: &str, msg: impl Into<String>) -> TensorError {
    TensorError::Checkpoint {
        path: path.to_string(),
        msg: msg.into(),
    }
}

/// Parses a checkpoint; `origin` names the source in error messages.
pub fn read_checkpoint<R: Read>(mut r: R, origin: &str) -> Result<Vec<(String, Tensor)>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        if pos + n > bytes.len() {
            return Err(corrupt(origin, format!("truncated at byte {pos}")));
        }
        let s = &bytes[pos..pos + n];
        pos += n;
        Ok(s)
    };
    let magic = take(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(corrupt(
            origin,
            format!("bad magic bytes {magic:?}, expected {:?} (\"MCKP\")", CHECKPOINT_MAGIC),
        ));
    }
    let u32_at = |b: &[u8]| u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize;
    let count = u32_at(take(4)?);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u32_at(take(4)?);
        let name = String::from_utf8(take(name_len)?.to_vec()).map_err(|_| corrupt(origin, "entry name is not UTF-8"))?;
        let rank = u32_at(take(4)?);
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32_at(take(4)?));
        }
        let n: usize = shape.iter().product();
        let raw = take(n * 8)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        out.push((name, Tensor { shape, values }));
    }
    if pos != bytes.len() {
        return Err(corrupt(origin, format!("{} trailing bytes", bytes.len() - pos)));
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, store: &ParamStore) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &store.to_tensors())?;
    fs::write(path, buf).map_err(|e| corrupt(&path.display().to_string(), e.to_string()))
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    let origin = path.display().to_string();
    let f = fs::File::open(path).map_err(|e| corrupt(&origin, e.to_string()))?;
    ParamStore::from_tensors(read_checkpoint(f, &origin)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn roundtrip(values in proptest::collection::vec(-1e6f64..1e6, 1..40), rows in 1usize..4) {
            let cols = values.len();
            let t = Tensor::new(vec![rows, cols], values.iter().cycle().take(rows * cols).copied().collect()).unwrap();
            let entries = vec![("a/b".to_string(), t), ("s".to_string(), Tensor::new(vec![], vec![0.5]).unwrap())];
            let mut buf = Vec::new();
            write_checkpoint(&mut buf, &entries).unwrap();
            let back = read_checkpoint(&buf[..], "mem").unwrap();
            prop_assert_eq!(back, entries);
        }
    }

    #[test]
    fn bad_magic_names_file_and_expected_bytes() {
        let err = read_checkpoint(&b"XXXX\0\0\0\0"[..], "model.mckp").unwrap_err().to_string();
        assert!(err.contains("model.mckp") && err.contains("MCKP"), "{err}");
    }
}
