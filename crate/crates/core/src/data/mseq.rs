//! MSEQ binary sequence files and the `index.json` dataset layout.
//!
//! Layout (little-endian): `"MSEQ"`, version byte, `u32 fps`, `u32 joints`,
//! `u32 coords`, `u64 frames`, `i32 label` (-1 for none), then
//! `frames * joints * coords` f32 values, frame-major, joint-major,
//! coordinate-minor.

use std::fs;
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::sequence::MotionSequence;
use crate::error::{Error, Result};

pub const MSEQ_MAGIC: &[u8; 4] = b"MSEQ";
pub const MSEQ_VERSION: u8 = 1;
const HEADER_LEN: usize = 4 + 1 + 4 + 4 + 4 + 8 + 4;

pub fn encode_sequence(seq: &MotionSequence) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + seq.coords().len() * 4);
    out.extend_from_slice(MSEQ_MAGIC);
    out.push(MSEQ_VERSION);
    out.extend_from_slice(&seq.fps().to_le_bytes());
    out.extend_from_slice(&(seq.joints() as u32).to_le_bytes());
    out.extend_from_slice(&(seq.coord_dims() as u32).to_le_bytes());
    out.extend_from_slice(&(seq.frames() as u64).to_le_bytes());
    out.extend_from_slice(&seq.class_label.unwrap_or(-1).to_le_bytes());
    for v in seq.coords().iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_sequence(bytes: &[u8]) -> Result<MotionSequence> {
    let need = |offset: usize, n: usize| -> Result<&[u8]> {
        bytes.get(offset..offset + n).ok_or(Error::Truncated {
            offset,
            needed: n,
            len: bytes.len(),
        })
    };
    let magic = need(0, 4)?;
    if magic != MSEQ_MAGIC {
        return Err(Error::BadMagic {
            expected: "MSEQ".into(),
            found: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let version = need(4, 1)?[0];
    if version != MSEQ_VERSION {
        return Err(Error::VersionMismatch {
            expected: MSEQ_VERSION,
            found: version,
        });
    }
    let u32_at = |o: usize| -> Result<u32> { Ok(u32::from_le_bytes(need(o, 4)?.try_into().unwrap())) };
    let fps = u32_at(5)?;
    let joints = u32_at(9)? as usize;
    let dims = u32_at(13)? as usize;
    let frames = u64::from_le_bytes(need(17, 8)?.try_into().unwrap());
    let label = i32::from_le_bytes(need(25, 4)?.try_into().unwrap());

    let count = usize::try_from(frames)
        .ok()
        .and_then(|f| f.checked_mul(joints))
        .and_then(|n| n.checked_mul(dims))
        .ok_or_else(|| Error::Corrupt(format!("header promises {frames} x {joints} x {dims} values")))?;
    let payload_len = count
        .checked_mul(4)
        .ok_or_else(|| Error::Corrupt("payload length overflows".into()))?;
    let payload = need(HEADER_LEN, payload_len)?;
    if bytes.len() != HEADER_LEN + payload_len {
        return Err(Error::Corrupt(format!(
            "{} trailing bytes after payload",
            bytes.len() - HEADER_LEN - payload_len
        )));
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let coords =
        Array3::from_shape_vec((frames as usize, joints, dims), values).map_err(|e| Error::Corrupt(e.to_string()))?;
    MotionSequence::new(coords, fps, (label >= 0).then_some(label))
}

pub fn write_sequence(path: &Path, seq: &MotionSequence) -> Result<()> {
    fs::write(path, encode_sequence(seq)).map_err(|e| Error::io(path, e))
}

pub fn read_sequence(path: &Path) -> Result<MotionSequence> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_sequence(&bytes)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexEntry {
    pub file: String,
    pub label: Option<i32>,
}

/// Writes `seq_NNNN.mseq` files plus `index.json` into `dir`.
pub fn write_dataset(dir: &Path, seqs: &[MotionSequence]) -> Result<Vec<IndexEntry>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = Vec::with_capacity(seqs.len());
    for (i, seq) in seqs.iter().enumerate() {
        let file = format!("seq_{i:04}.mseq");
        write_sequence(&dir.join(&file), seq)?;
        index.push(IndexEntry {
            file,
            label: seq.class_label,
        });
    }
    let path = dir.join("index.json");
    let json = serde_json::to_string_pretty(&index)?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(index)
}

/// Loads every sequence listed in `dir/index.json`, in index order. The
/// index label takes precedence over the label stored in the file.
pub fn read_dataset(dir: &Path) -> Result<Vec<MotionSequence>> {
    let path = dir.join("index.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let index: Vec<IndexEntry> = serde_json::from_str(&text)?;
    index
        .iter()
        .map(|entry| {
            let mut seq = read_sequence(&dir.join(&entry.file))?;
            seq.class_label = entry.label;
            Ok(seq)
        })
        .collect()
}
