//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "JGRMCKPT"
//! version  u32
//! config   u64 length + UTF-8 TOML
//! counters u64 count + that many u64 (epoch, batch, step, adam_t, vocab, raw_dim)
//! arrays   u64 count, then per array:
//!          u64 name length + UTF-8 name, u64 rank, rank × u64 dims, f64 data
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::tensor::Tensor;

use super::{Result, TrainConfig, TrainError};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"JGRMCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Position in the run. Noise and shuffling are derived from these and the
/// seed, so they are also the random state.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counters {
    pub epoch: u64,
    /// Batches already taken in the current epoch.
    pub batch: u64,
    /// Global step.
    pub step: u64,
    pub adam_t: u64,
    pub vocab_size: u64,
    pub raw_dim: u64,
}

impl Counters {
    fn to_vec(self) -> Vec<u64> {
        vec![self.epoch, self.batch, self.step, self.adam_t, self.vocab_size, self.raw_dim]
    }

    fn from_slice(v: &[u64]) -> Result<Self> {
        if v.len() != 6 {
            return Err(TrainError::Checkpoint(format!("expected 6 counters, found {}", v.len())));
        }
        Ok(Counters {
            epoch: v[0],
            batch: v[1],
            step: v[2],
            adam_t: v[3],
            vocab_size: v[4],
            raw_dim: v[5],
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub counters: Counters,
    pub arrays: Vec<(String, Tensor)>,
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
            .ok_or_else(|| TrainError::Checkpoint("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        usize::try_from(n)
            .ok()
            .filter(|&n| n <= self.buf.len())
            .ok_or_else(|| TrainError::Checkpoint(format!("implausible length {n}")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| TrainError::Checkpoint("invalid UTF-8".into()))
    }
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u64(out, s.len() as u64);
    out.extend_from_slice(s.as_bytes());
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_str(&mut out, &self.config.to_toml());
        let counters = self.counters.to_vec();
        put_u64(&mut out, counters.len() as u64);
        for c in counters {
            put_u64(&mut out, c);
        }
        put_u64(&mut out, self.arrays.len() as u64);
        for (name, t) in &self.arrays {
            put_str(&mut out, name);
            put_u64(&mut out, t.shape().len() as u64);
            for &d in t.shape() {
                put_u64(&mut out, d as u64);
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(TrainError::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(TrainError::Version {
                found: version,
                supported: CHECKPOINT_VERSION,
            });
        }
        let config = TrainConfig::from_toml(&r.string()?)?;
        let nc = r.len()?;
        let counters: Vec<u64> = (0..nc).map(|_| r.u64()).collect::<Result<_>>()?;
        let counters = Counters::from_slice(&counters)?;
        let na = r.len()?;
        let mut arrays = Vec::with_capacity(na);
        for _ in 0..na {
            let name = r.string()?;
            let rank = r.len()?;
            let shape: Vec<usize> = (0..rank).map(|_| r.len()).collect::<Result<_>>()?;
            let count: usize = shape.iter().product();
            let bytes = r.take(count.checked_mul(8).ok_or_else(|| {
                TrainError::Checkpoint(format!("array {name} is too large"))
            })?)?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            arrays.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != buf.len() {
            return Err(TrainError::Checkpoint("trailing bytes".into()));
        }
        Ok(Checkpoint {
            config,
            counters,
            arrays,
        })
    }

    /// Writes to a temporary sibling, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn array(&self, name: &str) -> Option<&Tensor> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}
