//! Flat named-tensor checkpoint format.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "NTCKPT\0\0"
//! version    u32      = 1
//! config_len u32, config bytes (UTF-8 `key = value` lines)
//! count      u32
//! count × { name_len u32, name bytes, rank u32, dims rank × u64,
//!           trainable u8, data numel × f64 }
//! ```

use std::io::{Read, Write};
use std::path::Path;

use nighttrack_autograd::Tensor;

use crate::config::ModelConfig;
use crate::error::{CoreError, Result};
use crate::model::Model;

pub const MAGIC: &[u8; 8] = b"NTCKPT\0\0";
pub const VERSION: u32 = 1;

pub fn write_checkpoint(model: &Model, mut w: impl Write) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let cfg = model.cfg.to_kv();
    w.write_all(&(cfg.len() as u32).to_le_bytes())?;
    w.write_all(cfg.as_bytes())?;
    w.write_all(&(model.store.len() as u32).to_le_bytes())?;
    for (_, e) in model.store.entries() {
        w.write_all(&(e.name.len() as u32).to_le_bytes())?;
        w.write_all(e.name.as_bytes())?;
        w.write_all(&(e.value.rank() as u32).to_le_bytes())?;
        for &d in e.value.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        w.write_all(&[u8::from(e.trainable)])?;
        for v in e.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_string(r: &mut impl Read) -> Result<String> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| CoreError::Checkpoint(format!("invalid UTF-8: {e}")))
}

/// Rebuild the model from the stored configuration and overwrite every
/// tensor. Names, shapes and the trainable flag must all match.
pub fn read_checkpoint(mut r: impl Read) -> Result<Model> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CoreError::Checkpoint("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(CoreError::Checkpoint(format!("unsupported version {version}")));
    }
    let cfg = ModelConfig::from_kv(&read_string(&mut r)?)?;
    let mut model = Model::new(cfg, 0)?;
    let count = read_u32(&mut r)? as usize;
    if count != model.store.len() {
        return Err(CoreError::Checkpoint(format!(
            "checkpoint holds {count} tensors, model has {}",
            model.store.len()
        )));
    }
    for _ in 0..count {
        let name = read_string(&mut r)?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut b = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        let id = model
            .store
            .id(&name)
            .ok_or_else(|| CoreError::Checkpoint(format!("unknown tensor {name}")))?;
        if model.store.entry(id).trainable != (flag[0] == 1) {
            return Err(CoreError::Checkpoint(format!("trainable flag mismatch for {name}")));
        }
        model.store.set(id, Tensor::new(shape, data)?)?;
    }
    Ok(model)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_checkpoint(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    let file = std::fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(file))
}
