//! `PEPCKPT1` checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"PEPCKPT1"
//! u32                       layer count L
//! L x (u32 in, u32 out, u8 activation)   activation: 0 identity, 1 relu
//! u64                       parameter count P
//! P x f64                   parameters in layout order
//! u32                       CRC-32 (IEEE) of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{Activation, LayerSpec, NetworkSpec, ParamVector};

pub const MAGIC: &[u8; 8] = b"PEPCKPT1";

pub fn encode(spec: &NetworkSpec, params: &ParamVector) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 + 9 * spec.layers().len() + 8 + 8 * params.len() + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(spec.layers().len() as u32).to_le_bytes());
    for l in spec.layers() {
        out.extend_from_slice(&(l.input as u32).to_le_bytes());
        out.extend_from_slice(&(l.output as u32).to_le_bytes());
        out.push(l.activation.code());
    }
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for v in params.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at + n;
        let s = self.bytes.get(self.at..end).ok_or(Error::Truncated {
            what: "checkpoint",
            needed: end,
            found: self.bytes.len(),
        })?;
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(NetworkSpec, ParamVector)> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("missing PEPCKPT1 magic".into()));
    }
    if bytes.len() < 12 {
        return Err(Error::Truncated {
            what: "checkpoint",
            needed: 12,
            found: bytes.len(),
        });
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Error::Checkpoint(format!(
            "CRC mismatch: stored {stored:#010x}, computed {actual:#010x}"
        )));
    }
    let mut r = Reader { bytes: body, at: 8 };
    let layer_count = r.u32()? as usize;
    let mut layers = Vec::with_capacity(layer_count.min(1024));
    for l in 0..layer_count {
        let input = r.u32()? as usize;
        let output = r.u32()? as usize;
        let code = r.take(1)?[0];
        let activation = Activation::from_code(code)
            .ok_or_else(|| Error::Checkpoint(format!("layer {l}: unknown activation code {code}")))?;
        layers.push(LayerSpec {
            input,
            output,
            activation,
        });
    }
    let spec = NetworkSpec::new(layers)?;
    let p = r.u64()? as usize;
    if p != spec.param_count() {
        return Err(Error::Checkpoint(format!(
            "header declares {p} parameters, architecture needs {}",
            spec.param_count()
        )));
    }
    let raw = r.take(8 * p)?;
    if r.at != body.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", body.len() - r.at)));
    }
    let values = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let params = ParamVector::from_values(&spec, values)?;
    Ok((spec, params))
}

pub fn save(path: &Path, spec: &NetworkSpec, params: &ParamVector) -> Result<()> {
    fs::write(path, encode(spec, params)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(NetworkSpec, ParamVector)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
