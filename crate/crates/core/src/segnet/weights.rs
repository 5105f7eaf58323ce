//! `R3DW` weight files.
//!
//! ```text
//! "R3DW" | version u32 | config digest [32] | count u32 |
//!   count × ( name_len u32 | name | C H W D u32 | f64 data )
//! ```
//! All integers and reals are little-endian. Tensors appear in build order.

use std::fs;
use std::path::Path;

use super::{NetConfig, SegNet};
use crate::error::{Error, Result};
use crate::tensor::{Rng, Shape, Tensor};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"R3DW";
pub const WEIGHTS_VERSION: u32 = 1;

pub fn write_weights(net: &SegNet) -> Vec<u8> {
    let store = net.params();
    let mut out = Vec::with_capacity(48 + store.scalar_count() * 8);
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    out.extend_from_slice(&net.config().digest());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        for e in t.shape().dims() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_weights(net: &SegNet, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, write_weights(net))?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Parses weights for `config`. The stored digest must match the config's.
pub fn read_weights(bytes: &[u8], config: &NetConfig) -> Result<SegNet> {
    let mut net = SegNet::build(config.clone(), &mut Rng::new(0))?;
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != WEIGHTS_MAGIC {
        return Err(Error::format(0, "bad magic, expected R3DW"));
    }
    let version = r.u32("version")?;
    if version != WEIGHTS_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    if r.take(32, "config digest")? != config.digest() {
        return Err(Error::Compatibility);
    }
    let at = r.pos;
    let count = r.u32("tensor count")? as usize;
    if count != net.params().len() {
        return Err(Error::format(
            at as u64,
            format!("expected {} tensors, file has {count}", net.params().len()),
        ));
    }
    let ids: Vec<_> = net.params().ids().collect();
    for id in ids {
        let name_at = r.pos;
        let len = r.u32("name length")? as usize;
        let name = r.take(len, "tensor name")?;
        if name != net.params().name(id).as_bytes() {
            return Err(Error::format(
                name_at as u64,
                format!("expected tensor `{}`", net.params().name(id)),
            ));
        }
        let shape_at = r.pos;
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = r.u32("tensor shape")? as usize;
        }
        let expected = net.params().get(id).shape();
        if dims != expected.dims() {
            return Err(Error::format(
                shape_at as u64,
                format!("tensor `{}` should be {expected}, file says {dims:?}", net.params().name(id)),
            ));
        }
        let raw = r.take(expected.numel() * 8, "tensor data")?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        *net.params_mut().get_mut(id) = Tensor::from_data(Shape::new(dims[0], dims[1], dims[2], dims[3])?, data)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::format(r.pos as u64, "trailing bytes after last tensor"));
    }
    Ok(net)
}

pub fn load_weights(path: impl AsRef<Path>, config: &NetConfig) -> Result<SegNet> {
    read_weights(&fs::read(path)?, config)
}
