//! Single-file binary checkpoints and atomic file writes.
//!
//! Layout, little-endian: magic `LVGCKPT1`, u64 config length, config JSON,
//! u64 step, u64 epoch, u64 seed, f64 best MPE (NaN when unset), u32 tensor
//! count, then per tensor: u32 name length, name, u32 rank, u64 dims, f32
//! values. A trailing u8 flags Adam state, followed by its step and the
//! first and second moments in tensor order.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::{ParamStore, Tensor};
use crate::train::{AdamState, TrainConfig};

const MAGIC: &[u8; 8] = b"LVGCKPT1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: u64,
    pub epoch: usize,
    pub seed: u64,
    pub best_mpe: Option<f64>,
    pub params: ParamStore<f32>,
    pub adam: Option<AdamState>,
}

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, write: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    {
        let mut w = std::io::BufWriter::new(tmp.as_file_mut());
        write(&mut w)?;
        w.flush()?;
    }
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn put_u32(w: &mut dyn Write, v: u32) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn put_u64(w: &mut dyn Write, v: u64) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn put_f32s(w: &mut dyn Write, v: &[f32]) -> Result<()> {
    let mut buf = Vec::with_capacity(v.len() * 4);
    for x in v {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    Ok(w.write_all(&buf)?)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

impl Checkpoint {
    pub fn write_to(&self, w: &mut dyn Write) -> Result<()> {
        w.write_all(MAGIC)?;
        let cfg = serde_json::to_vec(&self.config)?;
        put_u64(w, cfg.len() as u64)?;
        w.write_all(&cfg)?;
        put_u64(w, self.step)?;
        put_u64(w, self.epoch as u64)?;
        put_u64(w, self.seed)?;
        w.write_all(&self.best_mpe.unwrap_or(f64::NAN).to_le_bytes())?;
        put_u32(w, self.params.tensors.len() as u32)?;
        for t in &self.params.tensors {
            put_u32(w, t.name.len() as u32)?;
            w.write_all(t.name.as_bytes())?;
            put_u32(w, t.shape.len() as u32)?;
            for &d in &t.shape {
                put_u64(w, d as u64)?;
            }
            put_f32s(w, &t.data)?;
        }
        match &self.adam {
            None => w.write_all(&[0])?,
            Some(a) => {
                w.write_all(&[1])?;
                put_u64(w, a.step)?;
                for m in a.m.iter().chain(&a.v) {
                    put_f32s(w, m)?;
                }
            }
        }
        Ok(())
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let n = r.u64()? as usize;
        let config: TrainConfig = serde_json::from_slice(r.take(n)?)?;
        let step = r.u64()?;
        let epoch = r.u64()? as usize;
        let seed = r.u64()?;
        let best = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let size = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let size = size.ok_or_else(|| Error::Checkpoint(format!("tensor {name} too large")))?;
            let data = r.f32s(size)?;
            tensors.push(Tensor { name, shape, data });
        }
        let params = ParamStore { tensors };
        let adam = match r.u8()? {
            0 => None,
            1 => {
                let astep = r.u64()?;
                let sizes: Vec<usize> = params.tensors.iter().map(|t| t.data.len()).collect();
                let m = sizes.iter().map(|&s| r.f32s(s)).collect::<Result<Vec<_>>>()?;
                let v = sizes.iter().map(|&s| r.f32s(s)).collect::<Result<Vec<_>>>()?;
                Some(AdamState { step: astep, m, v })
            }
            f => return Err(Error::Checkpoint(format!("bad optimizer flag {f}"))),
        };
        if r.pos != buf.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Self {
            config,
            step,
            epoch,
            seed,
            best_mpe: (!best.is_nan()).then_some(best),
            params,
            adam,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, |w| self.write_to(w))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Rebuilds the model, checking the stored tensors against the config.
    pub fn model(&self) -> Result<crate::model::Model<f32>> {
        let mut m = crate::model::Model::new(self.config.model.clone(), self.seed)?;
        m.load_params(self.params.clone())?;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::train::Trainer;

    fn small() -> TrainConfig {
        let mut m = ModelConfig::new(2, 8);
        m.gnn.width = 6;
        m.gnn.mlp_hidden = 5;
        m.features.encoder_channels = vec![2, 3];
        TrainConfig::new(m)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let t = Trainer::new(small(), crate::Exec::Sequential).unwrap();
        let mut c = t.checkpoint();
        c.step = 17;
        c.best_mpe = Some(3.25);
        let mut a = c.adam.clone().unwrap();
        a.m[0][0] = 0.125;
        a.v[1][0] = f32::MIN_POSITIVE;
        c.adam = Some(a);
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        assert_eq!(Checkpoint::from_bytes(&buf).unwrap(), c);

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        c.save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), c);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let t = Trainer::new(small(), crate::Exec::Sequential).unwrap();
        let mut buf = Vec::new();
        t.checkpoint().write_to(&mut buf).unwrap();
        assert!(Checkpoint::from_bytes(&buf[..buf.len() - 3]).is_err());
        buf[0] = b'X';
        assert!(Checkpoint::from_bytes(&buf).is_err());
    }
}
