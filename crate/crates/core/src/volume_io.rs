//! `VOL3` volume files.
//!
//! | offset | size | field |
//! |-------:|-----:|-------|
//! | 0  | 4  | magic `VOL3` |
//! | 4  | 4  | version (u32, 1) |
//! | 8  | 1  | dtype: 0 = f64, 1 = u8 labels |
//! | 9  | 1  | rank (4) |
//! | 10 | 16 | extents C, H, W, D (u32 each) |
//! | 26 | …  | data, little-endian, row-major |

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::labels::LabelVolume;
use crate::tensor::{Shape, Tensor};

pub const VOLUME_MAGIC: &[u8; 4] = b"VOL3";
pub const VOLUME_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 26;

const DTYPE_REAL: u8 = 0;
const DTYPE_LABEL: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Volume {
    Real(Tensor),
    Labels(LabelVolume),
}

impl Volume {
    pub fn shape(&self) -> Shape {
        match self {
            Volume::Real(t) => t.shape(),
            Volume::Labels(l) => l.shape(),
        }
    }

    pub fn into_real(self) -> Result<Tensor> {
        match self {
            Volume::Real(t) => Ok(t),
            Volume::Labels(_) => Err(Error::Contract("expected a real volume, found labels".into())),
        }
    }

    pub fn into_labels(self) -> Result<LabelVolume> {
        match self {
            Volume::Labels(l) => Ok(l),
            Volume::Real(_) => Err(Error::Contract("expected a label volume, found reals".into())),
        }
    }
}

impl From<Tensor> for Volume {
    fn from(t: Tensor) -> Self {
        Volume::Real(t)
    }
}

impl From<LabelVolume> for Volume {
    fn from(l: LabelVolume) -> Self {
        Volume::Labels(l)
    }
}

pub fn encode_volume(v: &Volume) -> Vec<u8> {
    let shape = v.shape();
    let (dtype, elem) = match v {
        Volume::Real(_) => (DTYPE_REAL, 8),
        Volume::Labels(_) => (DTYPE_LABEL, 1),
    };
    let mut out = Vec::with_capacity(HEADER_LEN + shape.numel() * elem);
    out.extend_from_slice(VOLUME_MAGIC);
    out.extend_from_slice(&VOLUME_VERSION.to_le_bytes());
    out.push(dtype);
    out.push(4);
    for e in shape.dims() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    match v {
        Volume::Real(t) => t.data().iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        Volume::Labels(l) => out.extend_from_slice(l.data()),
    }
    out
}

pub fn decode_volume(bytes: &[u8]) -> Result<Volume> {
    let need = |n: usize, what: &str| -> Result<()> {
        if bytes.len() < n {
            return Err(Error::format(
                bytes.len() as u64,
                format!("truncated {what}: file has {} bytes, need {n}", bytes.len()),
            ));
        }
        Ok(())
    };
    need(4, "magic")?;
    if &bytes[..4] != VOLUME_MAGIC {
        return Err(Error::format(0, "bad magic, expected VOL3"));
    }
    need(HEADER_LEN, "header")?;
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != VOLUME_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let elem = match bytes[8] {
        DTYPE_REAL => 8,
        DTYPE_LABEL => 1,
        other => return Err(Error::format(8, format!("unknown dtype code {other}"))),
    };
    if bytes[9] != 4 {
        return Err(Error::format(9, format!("rank must be 4, found {}", bytes[9])));
    }
    let dims = [10, 14, 18, 22].map(|o| u32_at(o) as usize);
    let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]).map_err(|e| Error::format(10, e.to_string()))?;
    if elem == 1 && shape.c != 1 {
        return Err(Error::format(10, format!("label volumes have one channel, found {}", shape.c)));
    }
    let total = HEADER_LEN + shape.numel() * elem;
    need(total, "data")?;
    if bytes.len() > total {
        return Err(Error::format(total as u64, "trailing bytes after volume data"));
    }
    let body = &bytes[HEADER_LEN..];
    Ok(if elem == 8 {
        let data = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Volume::Real(Tensor::from_data(shape, data)?)
    } else {
        Volume::Labels(LabelVolume::new(shape.h, shape.w, shape.d, body.to_vec())?)
    })
}

pub fn save_volume(path: impl AsRef<Path>, v: &Volume) -> Result<()> {
    fs::write(path, encode_volume(v))?;
    Ok(())
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    decode_volume(&fs::read(path)?)
}
