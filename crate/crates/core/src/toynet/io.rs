//! Flat binary parameter files.
//!
//! Layout, all little-endian: 8-byte magic, `u32` format version, `u64`
//! config hash, `u64` parameter count, then every parameter as `f64` in
//! model order.

use std::io::{Read, Write};
use std::path::Path;

use super::model::{DecoderConfig, Model};
use crate::error::{Error, Result};
use crate::scalar::Real;

pub const MAGIC: &[u8; 8] = b"RAYDNMDL";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8 + 8;

pub fn to_bytes<T: Real>(model: &Model<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * model.n_params());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&model.config().hash().to_le_bytes());
    out.extend_from_slice(&(model.n_params() as u64).to_le_bytes());
    for p in model.params() {
        for v in &p.data {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    out
}

/// Parse a parameter file for a model with configuration `cfg`.
pub fn from_bytes<T: Real>(bytes: &[u8], cfg: DecoderConfig) -> Result<Model<T>> {
    if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
        return Err(Error::Format("not a model file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Compat(format!("model format version {version}, expected {FORMAT_VERSION}")));
    }
    let hash = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    if hash != cfg.hash() {
        return Err(Error::Compat(format!(
            "model config hash {hash:016x} does not match configuration {:016x}",
            cfg.hash()
        )));
    }
    let count = u64::from_le_bytes(bytes[20..28].try_into().expect("8 bytes")) as usize;
    let mut model = Model::<T>::new(cfg, 0)?;
    if count != model.n_params() {
        return Err(Error::Compat(format!("model has {count} parameters, expected {}", model.n_params())));
    }
    let body = &bytes[HEADER_LEN..];
    if body.len() != 8 * count {
        return Err(Error::Format(format!("parameter block is {} bytes, expected {}", body.len(), 8 * count)));
    }
    let mut values = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    for p in model.params_mut() {
        for v in p.data.iter_mut() {
            let x = values.next().expect("length checked");
            if !x.is_finite() {
                return Err(Error::NonFinite("stored parameter".into()));
            }
            *v = T::lit(x);
        }
    }
    Ok(model)
}

pub fn save<T: Real>(model: &Model<T>, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load<T: Real>(path: &Path, cfg: DecoderConfig) -> Result<Model<T>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, cfg)
}
