//! Binary checkpoints.
//!
//! Layout (little-endian): magic `MTRK`, `u32` version, `u64` seed,
//! `u64` step, `u32` config length and UTF-8 TOML config, `u32` record
//! count, then per record: `u32` name length, name bytes, `u32` rank,
//! `rank × u32` dims and the `f32` payload.

use std::path::Path;

use crate::autodiff::Tensor;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::Model;

pub const MAGIC: &[u8; 4] = b"MTRK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: Config,
    pub seed: u64,
    pub step: u64,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, step: u64) -> Self {
        let mut tensors = Vec::new();
        model.params.for_each(&mut |name, t| tensors.push((name, t.clone())));
        Self {
            config: model.config.clone(),
            seed: model.config.seed,
            step,
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        let cfg = self.config.to_toml();
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(r.fail(0, "bad magic, not a checkpoint"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(r.fail(4, &format!("unsupported version {version}, expected {VERSION}")));
        }
        let seed = r.u64("seed")?;
        let step = r.u64("step")?;
        let len = r.u32("config length")? as usize;
        let at = r.pos;
        let text = std::str::from_utf8(r.take(len, "config")?).map_err(|_| r.fail(at, "config is not UTF-8"))?;
        let config = Config::from_toml(text).map_err(|e| r.fail(at, &format!("bad config: {e}")))?;
        let count = r.u32("record count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let at = r.pos;
            let n = r.u32("name length")? as usize;
            let name = String::from_utf8(r.take(n, "name")?.to_vec()).map_err(|_| r.fail(at, "name is not UTF-8"))?;
            let rank = r.u32("rank")? as usize;
            if rank > 8 {
                return Err(r.fail(at, &format!("record `{name}` has implausible rank {rank}")));
            }
            let dims = (0..rank).map(|_| r.u32("dims").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let size = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| r.fail(at, "tensor size overflows"))?;
            let payload = r.take(size.checked_mul(4).ok_or_else(|| r.fail(at, "tensor size overflows"))?, "payload")?;
            let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push((name, Tensor::new(dims, data)?));
        }
        if r.pos != bytes.len() {
            return Err(r.fail(r.pos, "trailing bytes after last record"));
        }
        Ok(Self {
            config,
            seed,
            step,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Build a model for `config` and fill it from the stored tensors;
    /// every parameter must be present with exactly the expected shape.
    pub fn into_model_with(&self, config: Config) -> Result<Model> {
        let mut model = Model::new(config)?;
        let mut missing = None;
        let mut mismatch = None;
        model.params.for_each_mut(&mut |name, t| {
            if missing.is_some() || mismatch.is_some() {
                return;
            }
            match self.tensors.iter().find(|(n, _)| *n == name) {
                None => missing = Some(name),
                Some((_, stored)) if stored.shape() != t.shape() => {
                    mismatch = Some(Error::ShapeMismatch {
                        name,
                        expected: t.shape().to_vec(),
                        found: stored.shape().to_vec(),
                    })
                }
                Some((_, stored)) => *t = stored.clone(),
            }
        });
        if let Some(e) = mismatch {
            return Err(e);
        }
        if let Some(name) = missing {
            return Err(Error::Checkpoint {
                offset: 0,
                message: format!("parameter `{name}` missing from checkpoint"),
            });
        }
        if self.tensors.len() != model.params.to_vec().len() {
            return Err(Error::Checkpoint {
                offset: 0,
                message: format!("{} records for {} parameters", self.tensors.len(), model.params.to_vec().len()),
            });
        }
        Ok(model)
    }

    /// Model with the stored config.
    pub fn into_model(&self) -> Result<Model> {
        self.into_model_with(self.config.clone())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, offset: usize, message: &str) -> Error {
        Error::Checkpoint {
            offset,
            message: message.to_string(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(
                self.pos,
                &format!("truncated reading {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let bytes: &'a [u8] = self.bytes;
        let s = &bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn save(model: &Model, step: u64, path: &Path) -> Result<()> {
    Checkpoint::from_model(model, step).save(path)
}

pub fn load(path: &Path) -> Result<(Model, u64)> {
    let c = Checkpoint::load(path)?;
    Ok((c.into_model()?, c.step))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> Model {
        Model::new(Config {
            seed: 5,
            ..Config::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let m = model();
        let bytes = Checkpoint::from_model(&m, 42).to_bytes();
        let c = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(c.step, 42);
        assert_eq!(c.seed, 5);
        let back = c.into_model().unwrap();
        let (a, b) = (m.params.to_vec(), back.params.to_vec());
        for (x, y) in a.iter().zip(&b) {
            assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
        assert_eq!(back.config, m.config);
    }

    #[test]
    fn every_truncation_is_rejected_with_offset() {
        let bytes = Checkpoint::from_model(&model(), 0).to_bytes();
        for cut in [0, 3, 7, 15, 30, bytes.len() / 2, bytes.len() - 1] {
            match Checkpoint::from_bytes(&bytes[..cut]) {
                Err(Error::Checkpoint { offset, .. }) => assert!(offset <= cut),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn version_mismatch_rejected() {
        let mut bytes = Checkpoint::from_model(&model(), 0).to_bytes();
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        let err = Checkpoint::from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
    }

    #[test]
    fn bad_magic_rejected() {
        let mut bytes = Checkpoint::from_model(&model(), 0).to_bytes();
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint { offset: 0, .. })));
    }

    #[test]
    fn shape_mismatch_is_explicit() {
        let c = Checkpoint::from_model(&model(), 0);
        let mut other = Config::default();
        other.controller.hidden = 32;
        match c.into_model_with(other) {
            Err(Error::ShapeMismatch { name, .. }) => assert!(name.starts_with("attention") || name.starts_with("controller")),
            other => panic!("{other:?}"),
        }
    }
}
