//! Model files: `"DCFM"`, u32 version, u32-length-prefixed JSON config, then
//! each parameter as (u32 name length, name, u32 ndim, u32 dims, f32 data).
//! All integers and floats little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MODEL_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"DCFM";

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v)
        .map_err(|_| Error::InvalidArgument(format!("{v} does not fit the u32 fields")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_model(model: &Model<f32>) -> Result<Vec<u8>> {
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&MODEL_FORMAT_VERSION.to_le_bytes());
    let config = serde_json::to_vec(model.config())?;
    put_u32(&mut out, config.len())?;
    out.extend_from_slice(&config);
    for p in model.params().iter() {
        put_u32(&mut out, p.name.len())?;
        out.extend_from_slice(p.name.as_bytes());
        put_u32(&mut out, p.value.shape().len())?;
        for &d in p.value.shape() {
            put_u32(&mut out, d)?;
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format(format!(
                "truncated model file: {what} needs {n} bytes at offset {}",
                self.pos
            ))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<Model<f32>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("not a model file (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != MODEL_FORMAT_VERSION as usize {
        return Err(Error::Format(format!(
            "model format version {version} unsupported (expected {MODEL_FORMAT_VERSION})"
        )));
    }
    let len = r.u32("config length")?;
    let config: ModelConfig = serde_json::from_slice(r.take(len, "config")?)
        .map_err(|e| Error::Format(format!("model config: {e}")))?;
    config
        .validate()
        .map_err(|e| Error::Format(format!("model config: {e}")))?;
    let mut params = ParamStore::new();
    while r.pos < bytes.len() {
        let name_len = r.u32("name length")?;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u32("ndim")?;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(r.u32("dims")?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format(format!("parameter {name}: shape overflows")))?;
        let raw = r.take(numel, &name)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params
            .add(name, Tensor::new(shape, data)?)
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    Model::from_parts(config, params).map_err(|e| Error::Format(e.to_string()))
}

pub fn save_model(path: impl AsRef<Path>, model: &Model<f32>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_model(model)?).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}
