//! Binary training checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! | field | encoding |
//! |---|---|
//! | magic | `VQMO` |
//! | version | u32 |
//! | config digest | 32 bytes, SHA-256 of the training config text |
//! | config text | u32 length + UTF-8 |
//! | parameters | u32 count, then per parameter: u32 name length, name, u32 rank, u64 dims, f64 payload, u8 trainable |
//! | optimizer | per parameter: u64 update count, f64 first moments, f64 second moments |
//! | step | u64 |
//! | RNG | 32-byte seed, u64 stream, u128 word position |

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::lm::{Model, TrainState};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"VQMO";
pub const VERSION: u32 = 1;

/// A decoded checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub digest: [u8; 32],
    /// Canonical training config the run was started with.
    pub config: RunConfig,
    pub state: TrainState,
}

/// `ckpt_<step>.vqmo`.
pub fn checkpoint_name(step: usize) -> String {
    format!("ckpt_{step}.vqmo")
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

/// Serializes `state`, trained under `cfg`.
pub fn encode(cfg: &RunConfig, state: &TrainState) -> Vec<u8> {
    let store = &state.model.store;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    out.extend_from_slice(&cfg.digest());
    let text = cfg.training_text();
    put_u32(&mut out, text.len() as u32);
    out.extend_from_slice(text.as_bytes());
    put_u32(&mut out, store.len() as u32);
    for (_, p) in store.iter() {
        put_u32(&mut out, p.name.len() as u32);
        out.extend_from_slice(p.name.as_bytes());
        put_u32(&mut out, p.value.rank() as u32);
        for &d in p.value.shape() {
            put_u64(&mut out, d as u64);
        }
        put_f64s(&mut out, p.value.data());
        out.push(p.trainable as u8);
    }
    let opt = &state.opt;
    for i in 0..store.len() {
        put_u64(&mut out, opt.t[i]);
        put_f64s(&mut out, &opt.m[i]);
        put_f64s(&mut out, &opt.v[i]);
    }
    put_u64(&mut out, state.step as u64);
    out.extend_from_slice(&state.rng.get_seed());
    put_u64(&mut out, state.rng.get_stream());
    out.extend_from_slice(&state.rng.get_word_pos().to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated: wanted {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
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

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().expect("16 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("length overflow".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

/// Rebuilds the model from the embedded config and restores every tensor,
/// flag, optimizer moment, the step and the RNG position.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let len = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(len)?)
        .map_err(|_| Error::Checkpoint("config text is not UTF-8".into()))?;
    let config = RunConfig::parse(text)?;
    if config.digest() != digest {
        return Err(Error::Checkpoint("stored digest does not match the stored config".into()));
    }
    let mut model = Model::new(config.model.clone())?;
    let count = r.u32()? as usize;
    if count != model.store.len() {
        return Err(Error::Checkpoint(format!(
            "{count} parameters stored, the config builds {}",
            model.store.len()
        )));
    }
    let ids: Vec<_> = model.store.ids().collect();
    for &id in &ids {
        let n = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        if name != model.store.name(id) {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}` found where `{}` was expected",
                model.store.name(id)
            )));
        }
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if shape != model.store.get(id).shape() {
            return Err(Error::Checkpoint(format!(
                "`{name}` has shape {shape:?}, expected {:?}",
                model.store.get(id).shape()
            )));
        }
        let data = r.f64s(shape.iter().product())?;
        *model.store.get_mut(id) = Tensor::new(shape, data)?;
        let trainable = r.u8()? != 0;
        model.store.set_trainable(id, trainable);
    }
    let mut state = TrainState::new(model, config.train.clone());
    for (i, &id) in ids.iter().enumerate() {
        let n = state.model.store.get(id).numel();
        state.opt.t[i] = r.u64()?;
        state.opt.m[i] = r.f64s(n)?;
        state.opt.v[i] = r.f64s(n)?;
    }
    state.step = r.u64()? as usize;
    let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(r.u64()?);
    rng.set_word_pos(r.u128()?);
    state.rng = rng;
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint { digest, config, state })
}

pub fn save(path: &Path, cfg: &RunConfig, state: &TrainState) -> Result<()> {
    crate::fsutil::write_atomic(path, &encode(cfg, state))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Loads a checkpoint to continue the run configured by `cfg`; the stored
/// digest must match.
pub fn load_for_resume(path: &Path, cfg: &RunConfig) -> Result<TrainState> {
    let ck = load(path)?;
    if ck.digest != cfg.digest() {
        return Err(Error::Checkpoint(format!(
            "{} was written under a different configuration (digest {} vs {})",
            path.display(),
            hex::encode(ck.digest),
            hex::encode(cfg.digest())
        )));
    }
    Ok(ck.state)
}
