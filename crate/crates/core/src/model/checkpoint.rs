//! Binary checkpoint:
//!
//! ```text
//! "PSW1" | version u32 | config_len u32 | config (key=value lines)
//!        | { name_len u16 | name | rank u8 | dims u32×rank | f32 values }*
//!        | crc32 of everything after the magic
//! ```
//!
//! All integers and reals are little-endian.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::config::ModelConfig;
use super::net::PinSiteNet;
use crate::error::{Error, Result};
use crate::tensor::Scalar;

pub const MAGIC: &[u8; 4] = b"PSW1";
pub const VERSION: u32 = 1;

pub fn to_bytes<T: Scalar>(net: &PinSiteNet<T>) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&VERSION.to_le_bytes());
    let config = net.config().to_text();
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    for (name, t) in net.named_tensors() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out[4..]);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated(format!("reading {what} at byte {}", self.pos + 4)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<PinSiteNet<T>> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic, not a PSW1 checkpoint".into()));
    }
    if bytes.len() < 12 {
        return Err(Error::Truncated("header incomplete".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Version { expected: VERSION, found: version });
    }
    let config_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    if bytes.len() < 12 + config_len + 4 {
        return Err(Error::Truncated("file ends inside the config block".into()));
    }
    let (body, crc) = bytes[4..].split_at(bytes.len() - 8);
    let stored = u32::from_le_bytes(crc.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Crc { stored, computed });
    }

    let mut cur = Cursor { bytes: body, pos: 8 };
    let text = std::str::from_utf8(cur.take(config_len, "config")?)
        .map_err(|_| Error::Format("config block is not UTF-8".into()))?;
    let config = ModelConfig::from_text(text).map_err(|e| Error::Format(format!("config block: {e}")))?;

    let mut records: HashMap<String, (Vec<usize>, Vec<T>)> = HashMap::new();
    while !cur.done() {
        let n = u16::from_le_bytes(cur.take(2, "name length")?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(cur.take(n, "name")?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = cur.take(1, "rank")?[0] as usize;
        let dims = (0..rank)
            .map(|_| cur.u32("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len: usize = dims.iter().product();
        let raw = cur.take(len * 4, &name)?;
        let values = raw
            .chunks_exact(4)
            .map(|c| T::from_f64(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect();
        if records.insert(name.clone(), (dims, values)).is_some() {
            return Err(Error::Format(format!("duplicate tensor {name:?}")));
        }
    }

    let mut net = PinSiteNet::<T>::new(config)?;
    let mut failure = None;
    net.named_tensors_mut(&mut |name, t| {
        if failure.is_some() {
            return;
        }
        match records.remove(name) {
            Some((dims, values)) if dims == t.dims() => t.data_mut().copy_from_slice(&values),
            Some((dims, _)) => {
                failure = Some(format!("tensor {name:?} has dims {dims:?}, model expects {:?}", t.dims()))
            }
            None => failure = Some(format!("missing tensor {name:?}")),
        }
    });
    if let Some(msg) = failure {
        return Err(Error::Format(msg));
    }
    if let Some(extra) = records.keys().next() {
        return Err(Error::Format(format!("unexpected tensor {extra:?}")));
    }
    Ok(net)
}

pub fn save_checkpoint<T: Scalar>(net: &PinSiteNet<T>, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(net))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<PinSiteNet<f32>> {
    from_bytes(&fs::read(path)?)
}
