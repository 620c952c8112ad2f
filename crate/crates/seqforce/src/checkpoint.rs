//! Binary checkpoint format.
//!
//! Layout: magic `SQFC`, u16 version, u32 JSON config length + bytes, u32
//! parameter count, then per parameter a u16 name length + UTF-8 name, u8
//! rank, u32 dims, and the values as little-endian f64. Round-trips are
//! bit-exact.

use crate::autodiff::ParamSet;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"SQFC";
const VERSION: u16 = 1;

pub fn save(path: &Path, config: &ModelConfig, params: &ParamSet) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let cfg_json = serde_json::to_vec(config)
        .map_err(|e| Error::Io(format!("encoding checkpoint config: {e}")))?;
    buf.extend_from_slice(&(cfg_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&cfg_json);
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params.iter() {
        let name = p.id.as_bytes();
        if name.len() > u16::MAX as usize {
            return Err(Error::Io(format!("parameter name too long: {}", p.id)));
        }
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(p.value.shape().len() as u8);
        for &d in p.value.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)
        .map_err(|e| Error::Io(format!("creating {}: {e}", path.display())))?;
    f.write_all(&buf)
        .map_err(|e| Error::Io(format!("writing {}: {e}", path.display())))?;
    Ok(())
}

struct Reader {
    buf: Vec<u8>,
    pos: usize,
}

impl Reader {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Io("checkpoint truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

/// Raw checkpoint contents: the architecture description plus named
/// parameter tensors in file order.
pub struct Checkpoint {
    pub config: ModelConfig,
    pub entries: Vec<(String, Tensor)>,
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Io(format!("opening {}: {e}", path.display())))?
        .read_to_end(&mut buf)
        .map_err(|e| Error::Io(format!("reading {}: {e}", path.display())))?;
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Io(format!("{} is not a checkpoint file", path.display())));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Io(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let cfg_len = r.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(cfg_len)?)
        .map_err(|e| Error::Io(format!("decoding checkpoint config: {e}")))?;
    let n = r.u32()? as usize;
    let mut entries = Vec::with_capacity(n);
    for _ in 0..n {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|e| Error::Io(format!("bad parameter name: {e}")))?;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
        }
        entries.push((name, Tensor::new(shape, data)?));
    }
    Ok(Checkpoint { config, entries })
}

/// Rebuild a model from a checkpoint: the architecture comes from the
/// embedded config and every parameter value from the stored tensors.
pub fn load_model(path: &Path) -> Result<Model> {
    let ckpt = load(path)?;
    let mut model = Model::init(&ckpt.config, 0)?;
    if ckpt.entries.len() != model.params.len() {
        return Err(Error::Contract(format!(
            "checkpoint holds {} parameters, architecture expects {}",
            ckpt.entries.len(),
            model.params.len()
        )));
    }
    for (name, tensor) in ckpt.entries {
        let slot = model.params.slot_of(&name).ok_or_else(|| {
            Error::Contract(format!("checkpoint parameter '{name}' not in architecture"))
        })?;
        let p = model.params.get_mut(slot);
        if p.value.shape() != tensor.shape() {
            return Err(Error::Contract(format!(
                "parameter '{name}' has shape {:?} in checkpoint but {:?} in architecture",
                tensor.shape(),
                p.value.shape()
            )));
        }
        p.value = tensor;
    }
    Ok(model)
}
