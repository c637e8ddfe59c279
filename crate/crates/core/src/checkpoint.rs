//! Binary checkpoints.
//!
//! Layout, all integers `u32` little-endian:
//! magic `DET1`, manifest byte length, manifest text (`key=value` lines),
//! parameter count, then per parameter its name length, name, dimension
//! count, dimensions and `f32` little-endian values.

use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{DetModel, ModelConfig};

pub const MAGIC: &[u8; 4] = b"DET1";

/// Model entries are checked against the parameter blobs; any other entry
/// is run metadata carried alongside.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Vec<(String, String)>,
    pub params: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl Checkpoint {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.manifest.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

pub fn encode(model: &DetModel, extra: &[(String, String)]) -> Result<Vec<u8>> {
    let mut manifest = String::new();
    for (k, v) in model.config.manifest().iter().chain(extra) {
        if k.contains(['=', '\n']) || v.contains('\n') {
            return Err(Error::Checkpoint(format!("manifest entry `{k}` cannot be encoded")));
        }
        manifest.push_str(k);
        manifest.push('=');
        manifest.push_str(v);
        manifest.push('\n');
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_len(&mut out, manifest.len())?;
    out.extend_from_slice(manifest.as_bytes());
    put_len(&mut out, model.params.len())?;
    for (_, name, t) in model.params.iter() {
        put_len(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_len(&mut out, 2)?;
        put_len(&mut out, t.rows())?;
        put_len(&mut out, t.cols())?;
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

fn put_len(out: &mut Vec<u8>, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| Error::Checkpoint(format!("length {n} exceeds u32")))?;
    out.extend_from_slice(&n.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn len(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")) as usize)
    }

    fn text(&mut self, n: usize) -> Result<&'a str> {
        std::str::from_utf8(self.take(n)?).map_err(|_| Error::Checkpoint("non-UTF-8 text".into()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a DET1 checkpoint".into()));
    }
    let n = r.len()?;
    let manifest = r
        .text(n)?
        .lines()
        .map(|line| {
            line.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::Checkpoint(format!("manifest line `{line}` lacks `=`")))
        })
        .collect::<Result<Vec<_>>>()?;
    let count = r.len()?;
    let mut params = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let n = r.len()?;
        let name = r.text(n)?.to_string();
        let ndims = r.len()?;
        let dims = (0..ndims).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let size = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("parameter `{name}` is too large")))?;
        let raw = r.take(size.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
            .collect();
        params.push((name, dims, values));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint { manifest, params })
}

/// Rebuilds the model described by the manifest and fills in the stored
/// values. Names, order and shapes must match what the manifest implies.
pub fn restore(ckpt: &Checkpoint) -> Result<DetModel> {
    let config = ModelConfig::from_manifest(&ckpt.manifest)?;
    let mut model = DetModel::new(config, 0)?;
    if model.params.len() != ckpt.params.len() {
        return Err(Error::Checkpoint(format!(
            "manifest implies {} parameters, file holds {}",
            model.params.len(),
            ckpt.params.len()
        )));
    }
    let ids: Vec<_> = model.params.ids().collect();
    for (id, (name, dims, values)) in ids.into_iter().zip(&ckpt.params) {
        let expected = model.params.get(id).shape();
        if model.params.name(id) != name || dims.as_slice() != expected {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}` {dims:?} does not match `{}` {expected:?}",
                model.params.name(id)
            )));
        }
        let t = Tensor::new(dims[0], dims[1], values.iter().map(|&v| v as f64).collect())?;
        if !t.is_finite() {
            return Err(Error::Checkpoint(format!("parameter `{name}` holds non-finite values")));
        }
        model.params.set(id, t)?;
    }
    Ok(model)
}

pub fn save(path: &Path, model: &DetModel, extra: &[(String, String)]) -> Result<()> {
    std::fs::write(path, encode(model, extra)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(DetModel, Checkpoint)> {
    let ckpt = decode(&std::fs::read(path)?)?;
    Ok((restore(&ckpt)?, ckpt))
}
