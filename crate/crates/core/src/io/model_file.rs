//! Versioned binary model file.
//!
//! Layout (little-endian throughout):
//!
//! ```text
//! "ADVL"            4 bytes
//! format_version    u32 (= 1)
//! temperature       f64
//! input rank        u32, then one u32 per dimension
//! layer count       u32, then per layer: kind u8, arg0 u32, arg1 u32
//! parameters        per tensor in layer order (weights, bias):
//!                   element count u64, then f64 values row-major
//! checksum          u32 CRC-32 of every preceding byte
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{param_shapes, LayerSpec, Network};

pub const MAGIC: &[u8; 4] = b"ADVL";
pub const FORMAT_VERSION: u32 = 1;

fn spec_code(spec: &LayerSpec) -> (u8, u32, u32) {
    match *spec {
        LayerSpec::ConvRelu { filters, kernel } => (0, filters as u32, kernel as u32),
        LayerSpec::Maxpool => (1, 0, 0),
        LayerSpec::Flatten => (2, 0, 0),
        LayerSpec::DenseRelu { units } => (3, units as u32, 0),
        LayerSpec::DenseLinear { units } => (4, units as u32, 0),
    }
}

fn spec_from_code(kind: u8, a: u32, b: u32) -> Result<LayerSpec> {
    let (a, b) = (a as usize, b as usize);
    Ok(match kind {
        0 => LayerSpec::ConvRelu { filters: a, kernel: b },
        1 => LayerSpec::Maxpool,
        2 => LayerSpec::Flatten,
        3 => LayerSpec::DenseRelu { units: a },
        4 => LayerSpec::DenseLinear { units: a },
        other => return Err(Error::ModelFormat(format!("unknown layer kind {other}"))),
    })
}

pub fn encode(net: &Network) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&net.temperature().to_le_bytes());
    out.extend_from_slice(&(net.input_shape().len() as u32).to_le_bytes());
    for &d in net.input_shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    let specs = net.specs();
    out.extend_from_slice(&(specs.len() as u32).to_le_bytes());
    for spec in &specs {
        let (kind, a, b) = spec_code(spec);
        out.push(kind);
        out.extend_from_slice(&a.to_le_bytes());
        out.extend_from_slice(&b.to_le_bytes());
    }
    for p in net.params() {
        out.extend_from_slice(&(p.len() as u64).to_le_bytes());
        for v in p.data() {
            out.extend_from_slice(&v.to_le_bytes());
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
        if self.bytes.len() - self.pos < n {
            return Err(Error::ModelFormat(format!("truncated at byte {}", self.pos)));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Network> {
    if bytes.len() < MAGIC.len() + 4 + 4 {
        return Err(Error::ModelFormat("file too short".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::ModelFormat("bad magic".into()));
    }
    let (payload, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let mut r = Reader { bytes: payload, pos: 4 };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::ModelFormat(format!("unsupported format version {version}")));
    }
    let temperature = r.f64()?;
    let rank = r.u32()? as usize;
    let input_shape = (0..rank)
        .map(|_| r.u32().map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let layer_count = r.u32()? as usize;
    let mut specs = Vec::with_capacity(layer_count);
    for _ in 0..layer_count {
        let kind = r.take(1)?[0];
        let (a, b) = (r.u32()?, r.u32()?);
        specs.push(spec_from_code(kind, a, b)?);
    }
    let shapes = param_shapes(&input_shape, &specs)?;
    let mut net = Network::zeros(&input_shape, &specs, temperature)?;
    for (param, shape) in net.params_mut().into_iter().zip(&shapes) {
        let count = r.u64()? as usize;
        let expected: usize = shape.iter().product();
        if count != expected {
            return Err(Error::ModelFormat(format!(
                "parameter block of {count} values, architecture needs {expected}"
            )));
        }
        for v in param.data_mut() {
            *v = r.f64()?;
        }
    }
    if r.pos != payload.len() {
        return Err(Error::ModelFormat("trailing bytes before checksum".into()));
    }
    Ok(net)
}

pub fn save(net: &Network, path: &Path) -> Result<()> {
    std::fs::write(path, encode(net)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Network> {
    decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
