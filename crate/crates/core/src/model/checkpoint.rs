//! Binary parameter snapshots.
//!
//! ```text
//! magic      8 bytes  "LAINCKPT"
//! version    u32 LE   (1)
//! digest     u32 LE length + UTF-8 model-config digest
//! count      u32 LE
//! manifest   count × { u32 name length, name, u32 ndim, ndim × u64 dims,
//!                      u8 frozen, u64 payload byte offset }
//! payload    f64 LE values, each tensor row-major at its offset
//! ```

use std::path::Path;

use super::Lain;
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"LAINCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub digest: String,
    pub params: ParamStore,
}

pub fn to_bytes(params: &ParamStore, digest: &str) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(digest.len() as u32).to_le_bytes());
    out.extend_from_slice(digest.as_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for (name, p) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let shape = p.value.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.push(u8::from(!p.trainable));
        out.extend_from_slice(&offset.to_le_bytes());
        offset += 8 * p.value.numel() as u64;
    }
    for (_, p) in params.iter() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
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
            None => Err(Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Checkpoint(format!("{what} is not UTF-8")))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let digest = r.string("digest")?;
    let count = r.u32("entry count")? as usize;
    let mut manifest = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name = r.string("parameter name")?;
        let ndim = r.u32("rank")? as usize;
        let shape = (0..ndim)
            .map(|_| r.u64("dimension").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let frozen = match r.take(1, "frozen flag")?[0] {
            0 => false,
            1 => true,
            b => return Err(Error::Checkpoint(format!("`{name}`: frozen flag {b} is not 0 or 1"))),
        };
        let offset = r.u64("payload offset")? as usize;
        manifest.push((name, shape, frozen, offset));
    }
    let payload = &bytes[r.pos..];
    let mut params = ParamStore::new();
    for (name, shape, frozen, offset) in manifest {
        let numel: usize = shape.iter().product();
        let end = offset.checked_add(numel * 8).filter(|&e| e <= payload.len());
        let Some(end) = end else {
            return Err(Error::Checkpoint(format!("`{name}`: payload out of bounds")));
        };
        let data = payload[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params
            .insert(name.clone(), Tensor::new(shape, data)?, !frozen)
            .map_err(|_| Error::Checkpoint(format!("duplicate parameter `{name}`")))?;
    }
    Ok(Checkpoint { digest, params })
}

pub fn save(model: &Lain, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(&model.params, &model.cfg.digest())).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Replaces the model's parameters with the checkpoint's. A config digest
/// mismatch is refused unless `force`; names, shapes and frozen flags must
/// match the model either way.
pub fn restore(model: &mut Lain, ckpt: Checkpoint, force: bool) -> Result<()> {
    let expected = model.cfg.digest();
    if ckpt.digest != expected && !force {
        return Err(Error::DigestMismatch {
            expected,
            found: ckpt.digest,
        });
    }
    if ckpt.params.len() != model.params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameters, model has {}",
            ckpt.params.len(),
            model.params.len()
        )));
    }
    for (name, p) in model.params.iter() {
        let c = ckpt
            .params
            .get(name)
            .map_err(|_| Error::Checkpoint(format!("missing parameter `{name}`")))?;
        if c.value.shape() != p.value.shape() {
            return Err(Error::Checkpoint(format!(
                "`{name}`: shape {:?} in checkpoint, {:?} in model",
                c.value.shape(),
                p.value.shape()
            )));
        }
        if c.trainable != p.trainable {
            return Err(Error::Checkpoint(format!("`{name}`: frozen flag differs")));
        }
    }
    model.params = ckpt.params;
    Ok(())
}

pub fn load(model: &mut Lain, path: &Path, force: bool) -> Result<()> {
    restore(model, read(path)?, force)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::category::CategorySpace;
    use crate::model::ModelConfig;

    fn tiny() -> Lain {
        let cfg = ModelConfig {
            layers: 1,
            width: 16,
            heads: 2,
            adapter_dim: 8,
            adapter_heads: 2,
            grid: 4,
            patch_size: 4,
            det_dim: 8,
            text_dim: 8,
            ..ModelConfig::default()
        };
        Lain::new(cfg, CategorySpace::toy(3, 2).unwrap()).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let mut m = tiny();
        m.params.value_mut("text.log_tau").unwrap().data_mut()[0] = -0.125;
        let bytes = to_bytes(&m.params, &m.cfg.digest());
        let c = from_bytes(&bytes).unwrap();
        assert_eq!(c.digest, m.cfg.digest());
        assert_eq!(c.params.checksum(true), m.params.checksum(true));
        assert_eq!(c.params.checksum(false), m.params.checksum(false));
        let mut other = tiny();
        restore(&mut other, c, false).unwrap();
        assert_eq!(other.params.value("text.log_tau").unwrap().data()[0], -0.125);
    }

    #[test]
    fn digest_mismatch_needs_force() {
        let m = tiny();
        let mut other = tiny();
        other.cfg.init_seed = 9;
        let c = from_bytes(&to_bytes(&m.params, &m.cfg.digest())).unwrap();
        assert!(matches!(restore(&mut other, c.clone(), false), Err(Error::DigestMismatch { .. })));
        restore(&mut other, c, true).unwrap();
    }

    #[test]
    fn truncation_and_magic_rejected() {
        let m = tiny();
        let bytes = to_bytes(&m.params, "x");
        for cut in [0, 7, 12, bytes.len() / 2, bytes.len() - 1] {
            assert!(from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(from_bytes(&bad).is_err());
    }
}
