//! Versioned checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes   "FLAVACKP"
//! version    u32       1
//! meta_len   u64       length of the JSON metadata blob
//! meta       bytes     UTF-8 JSON object
//! count      u64       number of tensors
//! repeated `count` times, in ascending name order:
//!   name_len u32, name bytes (UTF-8),
//!   rows u64, cols u64, rows*cols f64 row-major
//! ```
//!
//! Values are stored as raw IEEE-754 bits, so a save/load round trip is exact.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{FlavaError, Result};

pub const MAGIC: &[u8; 8] = b"FLAVACKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub metadata: serde_json::Value,
    pub tensors: BTreeMap<String, Array2<f64>>,
}

impl Container {
    pub fn new(metadata: serde_json::Value) -> Self {
        Self {
            metadata,
            tensors: BTreeMap::new(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| FlavaError::io(dir, e))?;
        }
        let file = std::fs::File::create(path).map_err(|e| FlavaError::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| FlavaError::io(path, e))?;
        w.flush().map_err(|e| FlavaError::io(path, e))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        let meta = serde_json::to_vec(&self.metadata)?;
        w.write_all(&(meta.len() as u64).to_le_bytes())?;
        w.write_all(&meta)?;
        w.write_all(&(self.tensors.len() as u64).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.nrows() as u64).to_le_bytes())?;
            w.write_all(&(t.ncols() as u64).to_le_bytes())?;
            for v in t.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| FlavaError::io(path, e))?;
        Self::read_from(&mut BufReader::new(file)).map_err(|detail| FlavaError::Checkpoint {
            path: path.to_path_buf(),
            detail,
        })
    }

    pub fn read_from<R: Read>(r: &mut R) -> std::result::Result<Self, String> {
        let io = |e: std::io::Error| e.to_string();
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err("not a checkpoint (bad magic)".into());
        }
        let version = read_u32(r).map_err(io)?;
        if version != FORMAT_VERSION {
            return Err(format!("unsupported format version {version}"));
        }
        let meta_len = read_u64(r).map_err(io)? as usize;
        let mut meta = vec![0u8; meta_len];
        r.read_exact(&mut meta).map_err(io)?;
        let metadata = serde_json::from_slice(&meta).map_err(|e| e.to_string())?;
        let count = read_u64(r).map_err(io)?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = read_u32(r).map_err(io)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name).map_err(io)?;
            let name = String::from_utf8(name).map_err(|e| e.to_string())?;
            let rows = read_u64(r).map_err(io)? as usize;
            let cols = read_u64(r).map_err(io)? as usize;
            let mut data = Vec::with_capacity(rows * cols);
            let mut buf = [0u8; 8];
            for _ in 0..rows * cols {
                r.read_exact(&mut buf).map_err(io)?;
                data.push(f64::from_le_bytes(buf));
            }
            let t = Array2::from_shape_vec((rows, cols), data).map_err(|e| e.to_string())?;
            tensors.insert(name, t);
        }
        Ok(Self { metadata, tensors })
    }
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            values in proptest::collection::vec(any::<f64>(), 6),
            name in "[a-z.]{1,12}",
        ) {
            let mut c = Container::new(serde_json::json!({"step": 3}));
            c.tensors.insert(name, Array2::from_shape_vec((2, 3), values.clone()).unwrap());
            let mut buf = Vec::new();
            c.write_to(&mut buf).unwrap();
            let back = Container::read_from(&mut buf.as_slice()).unwrap();
            let orig: Vec<u64> = values.iter().map(|v| v.to_bits()).collect();
            let got: Vec<u64> = back.tensors.values().next().unwrap().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(orig, got);
            prop_assert_eq!(back.metadata, c.metadata);
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        assert!(Container::read_from(&mut &b"NOTACKPT0000"[..]).is_err());
    }
}
