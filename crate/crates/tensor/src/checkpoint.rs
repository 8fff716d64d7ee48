//! Versioned binary container of named tensors.
//!
//! Layout (all integers little-endian):
//! magic `"GAVT"`, format version `u32`, entry count `u32`, then per entry:
//! name length `u32` + UTF-8 name, rank `u32`, dims `u64[rank]`,
//! dtype tag `u32` (0 = f32, 1 = f64), payload.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::tensor::Tensor;
use crate::Error;

pub const MAGIC: &[u8; 4] = b"GAVT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

/// In-memory checkpoint. Values are held as f64 tensors; the dtype controls
/// the storage precision on disk (f32 is enough for inference weights).
#[derive(Default, Clone)]
pub struct Checkpoint {
    entries: BTreeMap<String, (Tensor, Dtype)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.insert(name.into(), (t, Dtype::F64));
    }

    pub fn insert_f32(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.insert(name.into(), (t, Dtype::F32));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, Error> {
        self.entries
            .get(name)
            .map(|(t, _)| t)
            .ok_or_else(|| Error::Checkpoint(format!("missing entry {}", name)))
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|(t, _)| t)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter().map(|(k, (t, _))| (k, t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Scalar convenience accessor.
    pub fn scalar(&self, name: &str) -> Result<f64, Error> {
        let t = self.get(name)?;
        if t.len() != 1 {
            return Err(Error::Checkpoint(format!("entry {} is not a scalar", name)));
        }
        Ok(t.item())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<(), Error> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, (t, dtype)) in &self.entries {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            match dtype {
                Dtype::F32 => {
                    w.write_all(&0u32.to_le_bytes())?;
                    for &v in t.data() {
                        w.write_all(&(v as f32).to_le_bytes())?;
                    }
                }
                Dtype::F64 => {
                    w.write_all(&1u32.to_le_bytes())?;
                    for &v in t.data() {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, Error> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!("bad magic {:?}", magic)));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", version)));
        }
        let count = read_u32(r)? as usize;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let name_len = read_u32(r)? as usize;
            if name_len > 1 << 20 {
                return Err(Error::Checkpoint("entry name too long".into()));
            }
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?;
            let rank = read_u32(r)? as usize;
            if rank == 0 || rank > 16 {
                return Err(Error::Checkpoint(format!("bad rank {} for {}", rank, name)));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let dtype = match read_u32(r)? {
                0 => Dtype::F32,
                1 => Dtype::F64,
                tag => return Err(Error::Checkpoint(format!("bad dtype tag {}", tag))),
            };
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            match dtype {
                Dtype::F32 => {
                    for _ in 0..n {
                        let mut b = [0u8; 4];
                        r.read_exact(&mut b)?;
                        data.push(f32::from_le_bytes(b) as f64);
                    }
                }
                Dtype::F64 => {
                    for _ in 0..n {
                        let mut b = [0u8; 8];
                        r.read_exact(&mut b)?;
                        data.push(f64::from_le_bytes(b));
                    }
                }
            }
            entries.insert(name, (Tensor::new(&shape, data)?, dtype));
        }
        Ok(Self { entries })
    }

    /// Atomic save: write to a temp file in the same directory, then rename.
    pub fn save(&self, path: &Path) -> Result<(), Error> {
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        std::fs::create_dir_all(dir)?;
        let tmp = dir.join(format!(
            ".{}.tmp",
            path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
        ));
        {
            let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
            self.write_to(&mut f)?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32, Error> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_names_shapes_values() {
        let mut ck = Checkpoint::new();
        ck.insert("a/w", Tensor::new(&[2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-12, 7.0]).unwrap());
        ck.insert_f32("b", Tensor::scalar(0.25));
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], MAGIC);
        let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back.get("a/w").unwrap(), ck.get("a/w").unwrap());
        assert_eq!(back.get("b").unwrap().item(), 0.25);
    }

    #[test]
    fn rejects_bad_magic() {
        let buf = b"NOPE\x01\x00\x00\x00\x00\x00\x00\x00".to_vec();
        assert!(Checkpoint::read_from(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn f32_storage_is_lossy_but_close() {
        let mut ck = Checkpoint::new();
        ck.insert_f32("x", Tensor::scalar(0.1));
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
        let v = back.get("x").unwrap().item();
        assert!((v - 0.1).abs() < 1e-7 && v != 0.1);
    }
}
