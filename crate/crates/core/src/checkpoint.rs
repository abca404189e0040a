//! Little-endian binary checkpoints.
//!
//! Layout: magic `HPRB`, `u32` schema version, `u32`-length-prefixed UTF-8
//! architecture descriptor, `u32` record count, then one record per
//! parameter or buffer: `u32` name length, name, `u32` rank, `u32` extents,
//! raw `f64` values.

use std::fs;
use std::path::Path;

use crate::error::Result;
use crate::io::ByteReader;
use crate::network::{parse_descriptor, Network, Parameter};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"HPRB";
pub const SCHEMA_VERSION: u32 = 1;

pub fn encode(net: &Network) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&SCHEMA_VERSION.to_le_bytes());
    let desc = net.descriptor();
    out.extend_from_slice(&(desc.len() as u32).to_le_bytes());
    out.extend_from_slice(desc.as_bytes());
    let records: Vec<&Parameter> = net.params().iter().chain(net.buffers()).collect();
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for p in records {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.tensor.rank() as u32).to_le_bytes());
        for &d in p.tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Network> {
    let mut r = ByteReader::new(bytes);
    if r.take(4)? != MAGIC {
        return Err(r.error_at(0, "bad magic, expected HPRB"));
    }
    let version = r.u32()?;
    if version != SCHEMA_VERSION {
        return Err(r.error_at(4, format!("unsupported checkpoint schema version {version}")));
    }
    let desc_len = r.u32()? as usize;
    let desc_at = r.offset();
    let desc = std::str::from_utf8(r.take(desc_len)?).map_err(|_| r.error_at(desc_at, "descriptor is not UTF-8"))?;
    let desc = parse_descriptor(desc).map_err(|e| r.error_at(desc_at, e.to_string()))?;
    let count = r.u32()? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let at = r.offset();
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| r.error_at(at, "parameter name is not UTF-8"))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let tensor = Tensor::new(shape, data).map_err(|e| r.error_at(at, e.to_string()))?;
        params.push(Parameter { name, tensor });
    }
    if !r.is_done() {
        return Err(r.error_at(r.offset(), "trailing bytes after last record"));
    }
    Network::from_parts(
        desc.input_dims,
        desc.num_classes,
        desc.layers,
        params,
        desc.mode,
        desc.meta,
    )
    .map_err(|e| r.error_at(desc_at, e.to_string()))
}

pub fn save_checkpoint(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(net))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Network> {
    decode(&fs::read(path)?)
}
