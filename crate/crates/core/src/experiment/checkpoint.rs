//! Binary training checkpoints.
//!
//! Layout (all integers and reals little-endian):
//!
//! ```text
//! "DREAMCKPT" u32 version
//! u64 len, config text (UTF-8)
//! u64 iteration
//! [u8; 32] rng seed, u64 rng stream, u128 rng word position
//! u64 adam step, f64 lr, f64 beta1, f64 beta2, f64 eps
//! f64 loss window sum, u64 loss window count
//! u32 n, then n tensors: u32 rank, rank × u64 extents, f64 values
//! u32 n, then n first-moment vectors: u64 len, f64 values
//! u32 n, then n second-moment vectors: u64 len, f64 values
//! ```

use std::path::Path;

use crate::denoiser::DenoiserParams;
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::{AdamState, Tensor};

use super::config::TrainConfig;

pub const MAGIC: &[u8; 9] = b"DREAMCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub iteration: u64,
    pub rng: RngState,
    pub adam: AdamState,
    /// Running loss sum and count since the last evaluation row.
    pub loss_window: (f64, u64),
    pub params: DenoiserParams,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                what: "checkpoint",
                message: format!("truncated at byte {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        // Every length counts at least one byte still to come.
        if n > (self.bytes.len() - self.pos) as u64 {
            return Err(Error::Format {
                what: "checkpoint",
                message: format!("length {n} exceeds remaining data"),
            });
        }
        Ok(n as usize)
    }

    fn reals(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Format {
            what: "checkpoint",
            message: "length overflow".into(),
        })?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

fn put_reals(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let text = self.config.echo();
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        let a = &self.adam;
        out.extend_from_slice(&a.step.to_le_bytes());
        put_reals(&mut out, &[a.lr, a.beta1, a.beta2, a.eps_stability, self.loss_window.0]);
        out.extend_from_slice(&self.loss_window.1.to_le_bytes());
        let tensors = self.params.tensors();
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for t in tensors {
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            put_reals(&mut out, t.data());
        }
        for moments in [&a.m, &a.v] {
            out.extend_from_slice(&(moments.len() as u32).to_le_bytes());
            for m in moments {
                out.extend_from_slice(&(m.len() as u64).to_le_bytes());
                put_reals(&mut out, m);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |m: String| Error::Format {
            what: "checkpoint",
            message: m,
        };
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(fmt("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(fmt(format!("unsupported version {version}")));
        }
        let n = r.len()?;
        let text = std::str::from_utf8(r.take(n)?).map_err(|e| fmt(e.to_string()))?;
        let config = TrainConfig::parse(text)?;
        let iteration = r.u64()?;
        let rng = RngState {
            seed: r.array()?,
            stream: r.u64()?,
            word_pos: u128::from_le_bytes(r.array()?),
        };
        let step = r.u64()?;
        let (lr, beta1, beta2, eps_stability) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
        let loss_window = (r.f64()?, r.u64()?);

        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let rank = r.u32()? as usize;
            let shape: Vec<usize> = (0..rank).map(|_| r.len()).collect::<Result<_>>()?;
            let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| fmt("shape overflow".into()))?;
            tensors.push(Tensor::from_vec(&shape, r.reals(len)?)?);
        }
        let mut moments = [Vec::new(), Vec::new()];
        for m in &mut moments {
            let count = r.u32()? as usize;
            for _ in 0..count {
                let len = r.len()?;
                m.push(r.reals(len)?);
            }
        }
        if r.pos != bytes.len() {
            return Err(fmt(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let params = DenoiserParams::from_tensors(config.denoiser_config(), tensors)?;
        let [m, v] = moments;
        let shapes_ok = m.len() == params.tensors().len()
            && v.len() == m.len()
            && params.tensors().iter().zip(&m).zip(&v).all(|((t, m), v)| m.len() == t.len() && v.len() == t.len());
        if !shapes_ok {
            return Err(fmt("optimizer moments do not match parameters".into()));
        }
        Ok(Self {
            config,
            iteration,
            rng,
            adam: AdamState {
                step,
                lr,
                beta1,
                beta2,
                eps_stability,
                m,
                v,
            },
            loss_window,
            params,
        })
    }

    /// Writes to a temporary sibling, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Atomic file replacement: write `path.tmp`, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
