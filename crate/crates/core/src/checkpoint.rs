//! Binary model container.
//!
//! Layout, all integers little-endian:
//! `"HREB"`, u32 version, config text, token list, tag list, parameters
//! (name, rank, dims, f64 values), gate caches (name, g_F, g_x). Strings
//! and lists are prefixed with a u64 length.

use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::Tensor;
use crate::pipeline::corpus::Vocab;

pub const MAGIC: &[u8; 4] = b"HREB";
pub const VERSION: u32 = 1;

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.0.extend_from_slice(s.as_bytes());
    }

    fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }

    fn strs(&mut self, v: &[String]) {
        self.u64(v.len() as u64);
        for s in v {
            self.str(s);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        if n > self.buf.len() as u64 {
            return Err(Error::Checkpoint(format!("implausible length {n} at byte {}", self.pos)));
        }
        Ok(n as usize)
    }

    fn str(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8 string".into()))
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len()?;
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn strs(&mut self) -> Result<Vec<String>> {
        let n = self.len()?;
        (0..n).map(|_| self.str()).collect()
    }
}

/// Serialize a model with the configuration it was trained under.
pub fn to_bytes(cfg: &RunConfig, model: &Model) -> Vec<u8> {
    let mut w = Writer::default();
    w.0.extend_from_slice(MAGIC);
    w.0.extend_from_slice(&VERSION.to_le_bytes());
    w.str(&cfg.to_text());
    w.strs(model.vocab.tokens());
    w.strs(model.vocab.tags());
    w.u64(model.store.len() as u64);
    for (name, t) in model.store.iter() {
        w.str(name);
        w.u64(t.shape().len() as u64);
        for &d in t.shape() {
            w.u64(d as u64);
        }
        w.f64s(t.data());
    }
    let caches = model.gate_caches();
    w.u64(caches.len() as u64);
    for (name, f, x) in &caches {
        w.str(name);
        w.f64s(f);
        w.f64s(x);
    }
    w.0
}

pub fn from_bytes(buf: &[u8]) -> Result<(RunConfig, Model)> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Checkpoint("not a checkpoint (bad magic bytes)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let cfg = RunConfig::parse(&r.str()?).map_err(|e| Error::Checkpoint(format!("stored config: {e}")))?;
    let vocab = Vocab::from_lists(r.strs()?, r.strs()?)?;
    let mut model = Model::new(cfg.model.clone(), vocab, 0, None)?;
    let n = r.len()?;
    if n != model.store.len() {
        return Err(Error::Checkpoint(format!(
            "{n} stored parameters, model expects {}",
            model.store.len()
        )));
    }
    for _ in 0..n {
        let name = r.str()?;
        let rank = r.len()?;
        let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let tensor = Tensor::new(shape, r.f64s()?).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        model
            .store
            .set(&name, tensor)
            .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
    }
    let n = r.len()?;
    let caches = (0..n)
        .map(|_| Ok((r.str()?, r.f64s()?, r.f64s()?)))
        .collect::<Result<Vec<_>>>()?;
    model.set_gate_caches(&caches)?;
    if r.pos != buf.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok((cfg, model))
}

pub fn save(path: &Path, cfg: &RunConfig, model: &Model) -> Result<()> {
    std::fs::write(path, to_bytes(cfg, model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(RunConfig, Model)> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&buf).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}
