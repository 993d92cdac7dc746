//! PCKP: named-tensor checkpoint container.
//!
//! Layout: magic "PCKP" (4) + version u16 + entry count u32, then per
//! entry (name-sorted): name_len u16 + UTF-8 name + rank u8 +
//! extents u32×rank + f32 payload. Little-endian throughout.

use super::{io_err, Result, StoreError};
use crate::numcore::Tensor;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

pub const PCKP_MAGIC: [u8; 4] = *b"PCKP";
pub const PCKP_VERSION: u16 = 1;

/// A named collection of f32 tensors; write order is name-sorted so
/// files are byte-identical for equal contents.
#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    tensors: BTreeMap<String, Tensor<f32>>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<f32>) {
        self.tensors.insert(name.to_string(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.get(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<f32>> {
        self.tensors.remove(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&PCKP_MAGIC);
        bytes.extend_from_slice(&PCKP_VERSION.to_le_bytes());
        bytes.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, tensor) in &self.tensors {
            let nb = name.as_bytes();
            bytes.extend_from_slice(&(nb.len() as u16).to_le_bytes());
            bytes.extend_from_slice(nb);
            bytes.push(tensor.shape().len() as u8);
            for &e in tensor.shape() {
                bytes.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for &v in tensor.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
        f.write_all(&bytes).map_err(|e| io_err(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes).map_err(|e| io_err(path, e))?;
        let mut off = 0usize;
        let take = |off: &mut usize, n: usize| -> Result<std::ops::Range<usize>> {
            if *off + n > bytes.len() {
                return Err(StoreError::Truncated {
                    expected: n,
                    found: bytes.len() - *off,
                    offset: *off,
                });
            }
            let r = *off..*off + n;
            *off += n;
            Ok(r)
        };
        let magic: [u8; 4] = bytes[take(&mut off, 4)?].try_into().expect("len");
        if magic != PCKP_MAGIC {
            return Err(StoreError::BadMagic {
                expected: PCKP_MAGIC,
                found: magic,
            });
        }
        let version = u16::from_le_bytes(bytes[take(&mut off, 2)?].try_into().expect("len"));
        if version != PCKP_VERSION {
            return Err(StoreError::BadVersion {
                expected: PCKP_VERSION,
                found: version,
                offset: 4,
            });
        }
        let count = u32::from_le_bytes(bytes[take(&mut off, 4)?].try_into().expect("len"));
        let mut out = Checkpoint::new();
        for _ in 0..count {
            let name_len =
                u16::from_le_bytes(bytes[take(&mut off, 2)?].try_into().expect("len")) as usize;
            let name_off = off;
            let name = String::from_utf8(bytes[take(&mut off, name_len)?].to_vec())
                .map_err(|e| StoreError::Malformed {
                    what: "checkpoint tensor name",
                    line: name_off,
                    detail: e.to_string(),
                })?;
            let rank = bytes[take(&mut off, 1)?][0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(
                    u32::from_le_bytes(bytes[take(&mut off, 4)?].try_into().expect("len"))
                        as usize,
                );
            }
            let numel: usize = shape.iter().product();
            let data: Vec<f32> = bytes[take(&mut off, numel * 4)?]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("len")))
                .collect();
            let tensor = Tensor::new(&shape, data).map_err(|e| StoreError::Malformed {
                what: "checkpoint tensor",
                line: name_off,
                detail: e.to_string(),
            })?;
            out.insert(&name, tensor);
        }
        Ok(out)
    }
}
