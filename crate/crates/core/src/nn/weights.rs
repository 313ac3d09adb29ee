//! Binary weights file.
//!
//! ```text
//! "VSNN"                      magic
//! u32                         format version (1)
//! u32                         layer count
//! per layer:
//!   u8                        kind tag (1 conv, 2 maxpool, 3 relu, 4 dense, 5 dropout)
//!   u32                       shape rank (0 for parameterless layers)
//!   u32 × rank                weight extents
//!   f64 × (prod(extents) + extents[0])
//!                             weights then bias, row-major
//! u32                         CRC32 of every preceding byte
//! ```
//!
//! All integers and floats are little-endian. Layer hyper-parameters
//! (strides, padding, pool windows) are not stored; loading checks the file
//! against an architecture supplied by the caller.

use std::fs;
use std::path::Path;

use super::network::{Affine, LayerSpec, Network};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"VSNN";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode(net: &Network) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + net.param_count() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(net.specs().len() as u32).to_le_bytes());
    for (spec, p) in net.specs().iter().zip(net.params()) {
        out.push(spec.kind_tag());
        match p {
            None => out.extend_from_slice(&0u32.to_le_bytes()),
            Some(a) => {
                out.extend_from_slice(&(a.weight.shape().len() as u32).to_le_bytes());
                for &e in a.weight.shape() {
                    out.extend_from_slice(&(e as u32).to_le_bytes());
                }
                for v in a.weight.data().iter().chain(a.bias.data()) {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::format("weights file", "truncated"))?;
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::format("weights file", "size overflow"))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

/// Decodes a weights file for the given architecture.
pub fn decode(bytes: &[u8], input_shape: &[usize], specs: &[LayerSpec]) -> Result<Network> {
    if bytes.len() < 16 {
        return Err(Error::format("weights file", "too short"));
    }
    let (body, crc) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(crc.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(Error::format("weights file", "CRC32 mismatch"));
    }
    let mut r = Reader { bytes: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::format("weights file", "bad magic"));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::format("weights file", format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    if count != specs.len() {
        return Err(Error::format(
            "weights file",
            format!("{count} layers stored, architecture has {}", specs.len()),
        ));
    }
    let mut params = Vec::with_capacity(count);
    for (i, spec) in specs.iter().enumerate() {
        let tag = r.u8()?;
        if tag != spec.kind_tag() {
            return Err(Error::format(
                "weights file",
                format!("layer {i}: kind tag {tag}, expected {} ({spec})", spec.kind_tag()),
            ));
        }
        let rank = r.u32()? as usize;
        if rank == 0 {
            params.push(None);
            continue;
        }
        let shape = (0..rank)
            .map(|_| r.u32().map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let weight = Tensor::new(shape.clone(), r.f64s(n)?)?;
        let bias = Tensor::new(vec![shape[0]], r.f64s(shape[0])?)?;
        params.push(Some(Affine { weight, bias }));
    }
    if r.pos != body.len() {
        return Err(Error::format("weights file", "trailing bytes"));
    }
    Network::from_params(input_shape, specs, params)
}

pub fn save(net: &Network, path: &Path) -> Result<()> {
    fs::write(path, encode(net)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path, input_shape: &[usize], specs: &[LayerSpec]) -> Result<Network> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, input_shape, specs)
}
