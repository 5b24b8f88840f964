//! `DRUMCKPT` model checkpoints.
//!
//! Layout (little-endian):
//!
//! | field        | type            |
//! |--------------|-----------------|
//! | magic        | `b"DRUMCKPT"`   |
//! | version      | u32 (= 1)       |
//! | levels       | u32             |
//! | widths       | u32 × levels    |
//! | embed_dim    | u32             |
//! | hidden_dim   | u32             |
//! | step         | u64             |
//! | param count  | u64             |
//! | weights      | f32 × count     |
//!
//! Weights follow declaration order: time MLP, encoder levels (finest first),
//! decoder levels (coarsest first), output convolution; each layer stores its
//! weight matrix then its bias.

use std::io::{Read, Write};
use std::path::Path;

use super::{Architecture, NeuralDenoiser, ScoreModel};
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DRUMCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: NeuralDenoiser,
    /// Number of optimizer steps taken so far.
    pub step: u64,
}

pub fn save_checkpoint(path: &Path, model: &NeuralDenoiser, step: u64) -> Result<()> {
    let bytes = encode(model, step);
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|reason| Error::format(path, reason))
}

fn encode(model: &NeuralDenoiser, step: u64) -> Vec<u8> {
    let arch = model.architecture();
    let mut out = Vec::with_capacity(64 + 4 * model.num_params());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    let put32 = |out: &mut Vec<u8>, v: u32| out.write_all(&v.to_le_bytes()).unwrap();
    put32(&mut out, VERSION);
    put32(&mut out, arch.levels() as u32);
    for &w in &arch.widths {
        put32(&mut out, w as u32);
    }
    put32(&mut out, arch.embed_dim as u32);
    put32(&mut out, arch.hidden_dim as u32);
    out.extend_from_slice(&step.to_le_bytes());
    out.extend_from_slice(&(model.num_params() as u64).to_le_bytes());
    for &p in model.params() {
        out.extend_from_slice(&(p as f32).to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        if self.buf.len() < n {
            return Err("truncated checkpoint".into());
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn decode(bytes: &[u8]) -> Result<Checkpoint, String> {
    let mut c = Cursor { buf: bytes };
    if c.take(8)? != CHECKPOINT_MAGIC {
        return Err("bad magic".into());
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let levels = c.u32()? as usize;
    if levels == 0 || levels > 16 {
        return Err(format!("implausible level count {levels}"));
    }
    let widths = (0..levels)
        .map(|_| c.u32().map(|w| w as usize))
        .collect::<Result<Vec<_>, _>>()?;
    let arch = Architecture {
        widths,
        embed_dim: c.u32()? as usize,
        hidden_dim: c.u32()? as usize,
    };
    let step = c.u64()?;
    let count = c.u64()? as usize;
    let raw = c.take(count.checked_mul(4).ok_or("parameter count overflow")?)?;
    if !c.buf.is_empty() {
        return Err("trailing bytes after weights".into());
    }
    let params = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    let model = NeuralDenoiser::from_params(arch, NoiseSchedule::cosine(), params)
        .map_err(|e| e.to_string())?;
    debug_assert_eq!(model.schedule(), NoiseSchedule::cosine());
    Ok(Checkpoint { model, step })
}
