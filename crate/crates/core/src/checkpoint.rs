//! On-disk model and optimizer state.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "MDML"  u32 version  u32 count
//! count × { u16 name_len, name (UTF-8), u8 rank, rank × u64 extent, f32 payload }
//! ```
//!
//! Parameters are stored under their own names, momentum buffers under
//! `opt/<name>`, and the loop counters as one-element tensors `state/epoch`,
//! `state/step` and `state/best_acc`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MDML";
pub const VERSION: u32 = 1;
pub const OPT_PREFIX: &str = "opt/";
const EPOCH: &str = "state/epoch";
const STEP: &str = "state/step";
const BEST: &str = "state/best_acc";

/// Loop position and optimizer memory.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Next epoch to run.
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    /// One buffer per parameter, in store order.
    pub momentum: Vec<Tensor<f32>>,
    /// Best evaluation accuracy seen, or -1 before any evaluation.
    pub best_acc: f64,
}

impl TrainState {
    pub fn new(store: &ParamStore<f32>) -> Self {
        Self {
            epoch: 0,
            step: 0,
            momentum: store.iter().map(|(_, p)| Tensor::zeros_like(&p.value)).collect(),
            best_acc: -1.0,
        }
    }
}

/// Serializes named tensors.
pub fn encode(tensors: &[(&str, &Tensor<f32>)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let len = u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("name too long: {name}")))?;
        let rank =
            u8::try_from(t.rank()).map_err(|_| Error::Checkpoint(format!("{name}: rank {} too large", t.rank())))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(rank);
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Parses a checkpoint into named tensors, in file order.
pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a checkpoint".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
    }
    let count = r.u32("tensor count")? as usize;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let len = r.u16(&format!("name length of tensor {i}"))? as usize;
        let name = std::str::from_utf8(r.take(len, &format!("name of tensor {i}"))?)
            .map_err(|_| Error::Checkpoint(format!("tensor {i}: name is not UTF-8")))?
            .to_string();
        let rank = r.take(1, &format!("rank of {name}"))?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64(&format!("extents of {name}"))? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .filter(|n| n.checked_mul(4).is_some())
            .ok_or_else(|| Error::Checkpoint(format!("{name}: extents {shape:?} overflow")))?;
        let payload = r.take(n * 4, &format!("payload of {name}"))?;
        let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        out.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(out)
}

/// Parameters, momentum buffers and counters, in that order.
pub fn encode_state(store: &ParamStore<f32>, state: &TrainState) -> Result<Vec<u8>> {
    if state.momentum.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "{} momentum buffers for {} parameters",
            state.momentum.len(),
            store.len()
        )));
    }
    let opt_names: Vec<String> = store.iter().map(|(_, p)| format!("{OPT_PREFIX}{}", p.name)).collect();
    let counters = [
        (EPOCH, Tensor::scalar(state.epoch as f32)),
        (STEP, Tensor::scalar(state.step as f32)),
        (BEST, Tensor::scalar(state.best_acc as f32)),
    ];
    let mut named: Vec<(&str, &Tensor<f32>)> = store.iter().map(|(_, p)| (p.name.as_str(), &p.value)).collect();
    named.extend(opt_names.iter().map(String::as_str).zip(&state.momentum));
    named.extend(counters.iter().map(|(n, t)| (*n, t)));
    encode(&named)
}

pub fn save_checkpoint(path: &Path, store: &ParamStore<f32>, state: &TrainState) -> Result<()> {
    let bytes = encode_state(store, state)?;
    // Write then rename, so an interrupted save never leaves a torn file.
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Restores every parameter of `store` from `bytes` and returns the loop
/// state. Every parameter must be present with its exact shape. Momentum
/// buffers and counters are optional and default to zero.
pub fn restore(bytes: &[u8], store: &mut ParamStore<f32>) -> Result<TrainState> {
    let tensors = decode(bytes)?;
    let mut state = TrainState::new(store);
    let mut seen = vec![false; store.len()];
    let counter = |t: &Tensor<f32>, name: &str| -> Result<f32> {
        t.item().map_err(|_| Error::Checkpoint(format!("{name} must hold one value")))
    };
    for (name, t) in tensors {
        let (key, is_opt) = match name.strip_prefix(OPT_PREFIX) {
            Some(rest) => (rest, true),
            None => (name.as_str(), false),
        };
        match key {
            EPOCH => state.epoch = counter(&t, &name)? as usize,
            STEP => state.step = counter(&t, &name)? as usize,
            BEST => state.best_acc = counter(&t, &name)? as f64,
            _ => {
                let id = store
                    .find(key)
                    .ok_or_else(|| Error::Checkpoint(format!("{name}: no such parameter in this model")))?;
                let expect = store.get(id).shape();
                if t.shape() != expect {
                    return Err(Error::Checkpoint(format!(
                        "{name}: shape {:?} does not match model shape {expect:?}",
                        t.shape()
                    )));
                }
                if is_opt {
                    state.momentum[id.0] = t;
                } else {
                    *store.get_mut(id) = t;
                    seen[id.0] = true;
                }
            }
        }
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::Checkpoint(format!(
            "{}: missing from checkpoint",
            store.name(crate::params::ParamId(missing))
        )));
    }
    Ok(state)
}

pub fn load_checkpoint(path: &Path, store: &mut ParamStore<f32>) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    restore(&bytes, store).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}
