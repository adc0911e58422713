//! MCKP checkpoint files.
//!
//! Layout (little-endian): `"MCKP"`, version byte, `u32` tensor count, then
//! per tensor `u16` name length, UTF-8 name, `u8` rank, `rank x u32` dims
//! and the f32 payload; finally `u32` metadata length and a UTF-8 JSON
//! object. Optimizer moments are stored as tensors named `adam.m:<param>`
//! and `adam.v:<param>`.

use std::fs;
use std::path::Path;

use diffcore::{AdamState, DTensor, ParamGroup};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};

pub const MCKP_MAGIC: &[u8; 4] = b"MCKP";
pub const MCKP_VERSION: u8 = 1;

const MOMENT_M: &str = "adam.m:";
const MOMENT_V: &str = "adam.v:";

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub optimizer: AdamState<f32>,
    pub step: u64,
    pub seed: u64,
    /// Snapshot of the run configuration that produced the checkpoint.
    pub run_config: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Metadata {
    model: ModelConfig,
    step: u64,
    seed: u64,
    adam_step: u64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    config: serde_json::Value,
}

fn push_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) -> Result<()> {
    let name_len = u16::try_from(name.len()).map_err(|_| Error::Invalid(format!("tensor name too long: {name}")))?;
    out.extend_from_slice(&name_len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut tensors: Vec<(String, Vec<usize>, Vec<f32>)> = ckpt
        .model
        .params
        .iter()
        .map(|(n, t)| (n.to_string(), t.shape().to_vec(), t.data().to_vec()))
        .collect();
    for (name, t) in ckpt.model.params.iter() {
        if let Some((m, v)) = ckpt.optimizer.moments(name) {
            tensors.push((format!("{MOMENT_M}{name}"), t.shape().to_vec(), m.to_vec()));
            tensors.push((format!("{MOMENT_V}{name}"), t.shape().to_vec(), v.to_vec()));
        }
    }
    let mut out = Vec::new();
    out.extend_from_slice(MCKP_MAGIC);
    out.push(MCKP_VERSION);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, shape, data) in &tensors {
        push_tensor(&mut out, name, shape, data)?;
    }
    let meta = Metadata {
        model: ckpt.model.config.clone(),
        step: ckpt.step,
        seed: ckpt.seed,
        adam_step: ckpt.optimizer.step,
        beta1: ckpt.optimizer.beta1,
        beta2: ckpt.optimizer.beta2,
        epsilon: ckpt.optimizer.epsilon,
        config: ckpt.run_config.clone(),
    };
    let json = serde_json::to_vec(&meta)?;
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(Error::Truncated {
                offset: self.pos,
                needed: n,
                len: self.bytes.len(),
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Parses a whole checkpoint; nothing is returned unless every byte checks out.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4)?;
    if magic != MCKP_MAGIC {
        return Err(Error::BadMagic {
            expected: "MCKP".into(),
            found: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let version = cur.u8()?;
    if version != MCKP_VERSION {
        return Err(Error::VersionMismatch {
            expected: MCKP_VERSION,
            found: version,
        });
    }
    let count = cur.u32()? as usize;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let name_len = cur.u16()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| Error::Corrupt(format!("tensor name at offset {} is not UTF-8", cur.pos - name_len)))?
            .to_string();
        let rank = cur.u8()? as usize;
        let shape = (0..rank)
            .map(|_| cur.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Corrupt(format!("tensor `{name}` shape {shape:?} overflows")))?;
        let data = cur
            .take(numel)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect::<Vec<_>>();
        tensors.push((name, shape, data));
    }
    let meta_len = cur.u32()? as usize;
    let meta: Metadata =
        serde_json::from_slice(cur.take(meta_len)?).map_err(|e| Error::Corrupt(format!("metadata: {e}")))?;
    if cur.pos != bytes.len() {
        return Err(Error::Corrupt(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }

    let mut params = ParamGroup::new();
    let mut optimizer = AdamState::new(meta.beta1, meta.beta2, meta.epsilon);
    optimizer.step = meta.adam_step;
    let mut moments_m = std::collections::HashMap::new();
    let mut moments_v = std::collections::HashMap::new();
    for (name, shape, data) in tensors {
        if let Some(p) = name.strip_prefix(MOMENT_M) {
            moments_m.insert(p.to_string(), data);
        } else if let Some(p) = name.strip_prefix(MOMENT_V) {
            moments_v.insert(p.to_string(), data);
        } else {
            let t = DTensor::new(&shape, data).map_err(|e| Error::Corrupt(format!("tensor `{name}`: {e}")))?;
            params
                .insert(name.clone(), t)
                .map_err(|e| Error::Corrupt(format!("tensor `{name}`: {e}")))?;
        }
    }
    for (name, m) in moments_m {
        let v = moments_v
            .remove(&name)
            .ok_or_else(|| Error::Corrupt(format!("first moment of `{name}` has no second moment")))?;
        let numel = params
            .get(&name)
            .ok_or_else(|| Error::Corrupt(format!("moments for unknown parameter `{name}`")))?
            .numel();
        if m.len() != numel || v.len() != numel {
            return Err(Error::Corrupt(format!(
                "moments of `{name}` do not match the parameter"
            )));
        }
        optimizer.set_moments(name, m, v);
    }
    if let Some(name) = moments_v.keys().next() {
        return Err(Error::Corrupt(format!("second moment of `{name}` has no first moment")));
    }
    let model = Model::from_params(meta.model, params)?;
    Ok(Checkpoint {
        model,
        optimizer,
        step: meta.step,
        seed: meta.seed,
        run_config: meta.config,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = encode_checkpoint(ckpt)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint, and when `expected` is given also requires every
/// tensor to have the shape that configuration implies.
pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let ckpt = decode_checkpoint(&bytes)?;
    if let Some(cfg) = expected {
        check_compatible(&ckpt.model, cfg)?;
    }
    Ok(ckpt)
}

/// Errors with the first tensor whose shape differs from what `cfg` needs.
pub fn check_compatible(model: &Model<f32>, cfg: &ModelConfig) -> Result<()> {
    for (name, shape) in cfg.param_shapes() {
        let found = model.params.get(&name).map(|t| t.shape().to_vec()).unwrap_or_default();
        if found != shape {
            return Err(Error::IncompatibleTensor {
                name,
                expected: shape,
                found,
            });
        }
    }
    Ok(())
}
