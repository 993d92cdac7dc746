//! V4DC: raw little-endian 4D volume container.
//!
//! Layout: magic "V4DC" (4) + version u16 (2) + dtype u8 (1) +
//! dims u32×4 as T,Z,Y,X (16) + spacing f32×3 as Z,Y,X mm (12) = 35-byte
//! header, then the payload with X fastest-varying.

use super::{io_err, Result, StoreError};
use std::io::{Read, Write};
use std::path::Path;

pub const V4DC_MAGIC: [u8; 4] = *b"V4DC";
pub const V4DC_VERSION: u16 = 1;
pub const V4DC_HEADER_LEN: usize = 35;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum V4dcDtype {
    /// 32-bit real intensities.
    F32 = 0,
    /// 8-bit label ids.
    U8Label = 1,
}

#[derive(Debug, Clone, PartialEq)]
pub struct V4dcHeader {
    pub dtype: V4dcDtype,
    /// (T, Z, Y, X).
    pub dims: [u32; 4],
    /// (Z, Y, X) mm.
    pub spacing: [f32; 3],
}

impl V4dcHeader {
    pub fn numel(&self) -> usize {
        self.dims.iter().map(|&d| d as usize).product()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum V4dcData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl V4dcData {
    pub fn len(&self) -> usize {
        match self {
            V4dcData::F32(v) => v.len(),
            V4dcData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> V4dcDtype {
        match self {
            V4dcData::F32(_) => V4dcDtype::F32,
            V4dcData::U8(_) => V4dcDtype::U8Label,
        }
    }
}

pub fn write_v4dc(path: &Path, header: &V4dcHeader, data: &V4dcData) -> Result<()> {
    if data.len() != header.numel() {
        return Err(StoreError::PayloadMismatch {
            expected: header.numel(),
            got: data.len(),
        });
    }
    if data.dtype() != header.dtype {
        return Err(StoreError::BadDtype {
            found: data.dtype() as u8,
            offset: 6,
        });
    }
    let mut bytes = Vec::with_capacity(V4DC_HEADER_LEN + data.len() * 4);
    bytes.extend_from_slice(&V4DC_MAGIC);
    bytes.extend_from_slice(&V4DC_VERSION.to_le_bytes());
    bytes.push(header.dtype as u8);
    for d in header.dims {
        bytes.extend_from_slice(&d.to_le_bytes());
    }
    for s in header.spacing {
        bytes.extend_from_slice(&s.to_le_bytes());
    }
    match data {
        V4dcData::F32(v) => {
            for x in v {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        V4dcData::U8(v) => bytes.extend_from_slice(v),
    }
    let mut f = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(&bytes).map_err(|e| io_err(path, e))
}

pub fn read_v4dc(path: &Path) -> Result<(V4dcHeader, V4dcData)> {
    let mut f = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes).map_err(|e| io_err(path, e))?;
    if bytes.len() < V4DC_HEADER_LEN {
        return Err(StoreError::Truncated {
            expected: V4DC_HEADER_LEN,
            found: bytes.len(),
            offset: 0,
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().expect("slice len");
    if magic != V4DC_MAGIC {
        return Err(StoreError::BadMagic {
            expected: V4DC_MAGIC,
            found: magic,
        });
    }
    let version = u16::from_le_bytes(bytes[4..6].try_into().expect("slice len"));
    if version != V4DC_VERSION {
        return Err(StoreError::BadVersion {
            expected: V4DC_VERSION,
            found: version,
            offset: 4,
        });
    }
    let dtype = match bytes[6] {
        0 => V4dcDtype::F32,
        1 => V4dcDtype::U8Label,
        other => {
            return Err(StoreError::BadDtype {
                found: other,
                offset: 6,
            })
        }
    };
    let mut dims = [0u32; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        *d = u32::from_le_bytes(bytes[7 + 4 * i..11 + 4 * i].try_into().expect("len"));
    }
    let mut spacing = [0f32; 3];
    for (i, s) in spacing.iter_mut().enumerate() {
        *s = f32::from_le_bytes(bytes[23 + 4 * i..27 + 4 * i].try_into().expect("len"));
    }
    let header = V4dcHeader {
        dtype,
        dims,
        spacing,
    };
    let elem = match dtype {
        V4dcDtype::F32 => 4,
        V4dcDtype::U8Label => 1,
    };
    let need = header.numel() * elem;
    let avail = bytes.len() - V4DC_HEADER_LEN;
    if avail != need {
        return Err(StoreError::Truncated {
            expected: need,
            found: avail,
            offset: V4DC_HEADER_LEN,
        });
    }
    let payload = &bytes[V4DC_HEADER_LEN..];
    let data = match dtype {
        V4dcDtype::F32 => V4dcData::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("len")))
                .collect(),
        ),
        V4dcDtype::U8Label => V4dcData::U8(payload.to_vec()),
    };
    Ok((header, data))
}
