//! Binary checkpoint container.
//!
//! Layout (little-endian): `b"MVPT"`, `u32` version, `u64` entry count,
//! then per entry `u32` name length, UTF-8 name, `u8` dtype code, `u32`
//! rank, `u64` extents; then every payload in manifest order; then a
//! CRC-32 of all payload bytes. Freeze-mask flags are rank-0 boolean
//! entries named `mask.<tensor>`.

use std::path::Path;

use crate::diffcore::{DType, Real, Tensor};
use crate::error::{CheckpointError, Error, Result};
use crate::prompt::FreezeMask;

use super::state::{ModelState, ParamSpec};

pub const MAGIC: &[u8; 4] = b"MVPT";
pub const VERSION: u32 = 1;
const MASK_PREFIX: &str = "mask.";

enum Payload<'a, S> {
    Real(&'a Tensor<S>),
    Flag(bool),
}

pub fn encode_checkpoint<S: Real>(state: &ModelState<S>, mask: Option<&FreezeMask>) -> Result<Vec<u8>> {
    let mut entries: Vec<(String, DType, Vec<usize>, Payload<S>)> = state
        .iter()
        .map(|(n, t)| (n.to_string(), S::DTYPE, t.shape().to_vec(), Payload::Real(t)))
        .collect();
    if let Some(mask) = mask {
        for name in state.names() {
            let learnable = mask.is_learnable(name)?;
            entries.push((format!("{MASK_PREFIX}{name}"), DType::Bool, vec![], Payload::Flag(learnable)));
        }
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for (name, dtype, shape, _) in &entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(dtype.code());
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &e in shape {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
    }
    let start = out.len();
    for (_, _, _, payload) in &entries {
        match payload {
            Payload::Real(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
            Payload::Flag(b) => out.push(*b as u8),
        }
    }
    let crc = crc32fast::hash(&out[start..]);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(CheckpointError::Truncated {
                needed: self.pos.saturating_add(n),
                found: self.buf.len(),
            }),
        }
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

struct Entry {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
}

pub fn decode_checkpoint<S: Real>(bytes: &[u8]) -> Result<(ModelState<S>, Option<FreezeMask>)> {
    Ok(decode(bytes)?)
}

fn decode<S: Real>(bytes: &[u8]) -> Result<(ModelState<S>, Option<FreezeMask>), CheckpointError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4).map_err(|_| CheckpointError::CorruptHeader("file shorter than magic".into()))?;
    if magic != MAGIC {
        return Err(CheckpointError::CorruptHeader(format!("bad magic {magic:?}")));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::CorruptHeader(format!("unsupported version {version}")));
    }
    let count = r.u64()?;
    // every entry needs at least 9 header bytes
    if count > (bytes.len() as u64) / 9 {
        return Err(CheckpointError::CorruptHeader(format!("implausible entry count {count}")));
    }
    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| CheckpointError::CorruptHeader("tensor name is not UTF-8".into()))?
            .to_string();
        let code = r.u8()?;
        let dtype = DType::from_code(code).ok_or_else(|| CheckpointError::DType {
            name: name.clone(),
            code,
        })?;
        let rank = r.u32()? as usize;
        if rank > 16 {
            return Err(CheckpointError::CorruptHeader(format!("rank {rank} for `{name}`")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        entries.push(Entry { name, dtype, shape });
    }
    let payload_start = r.pos;
    let mut state = ModelState::new();
    let mut flags = Vec::new();
    for e in &entries {
        let numel = e
            .shape
            .iter()
            .try_fold(1usize, |a, &b| a.checked_mul(b))
            .ok_or_else(|| CheckpointError::CorruptHeader(format!("extent overflow for `{}`", e.name)))?;
        let nbytes = numel
            .checked_mul(e.dtype.size())
            .ok_or_else(|| CheckpointError::CorruptHeader(format!("size overflow for `{}`", e.name)))?;
        let raw = r.take(nbytes)?;
        match e.dtype {
            DType::Bool => {
                let Some(target) = e.name.strip_prefix(MASK_PREFIX) else {
                    return Err(CheckpointError::DType {
                        name: e.name.clone(),
                        code: e.dtype.code(),
                    });
                };
                if numel != 1 || raw[0] > 1 {
                    return Err(CheckpointError::CorruptHeader(format!("bad mask entry `{}`", e.name)));
                }
                flags.push((target.to_string(), raw[0] == 1));
            }
            DType::F32 => {
                let data = raw.chunks_exact(4).map(|c| S::of(f32::read_le(c) as f64)).collect();
                state.insert(e.name.clone(), Tensor::new(e.shape.clone(), data).expect("sized"));
            }
            DType::F64 => {
                let data = raw.chunks_exact(8).map(|c| S::of(f64::read_le(c))).collect();
                state.insert(e.name.clone(), Tensor::new(e.shape.clone(), data).expect("sized"));
            }
        }
    }
    let payload_end = r.pos;
    let stored = r.u32()?;
    let computed = crc32fast::hash(&bytes[payload_start..payload_end]);
    if stored != computed {
        return Err(CheckpointError::Checksum { stored, computed });
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::CorruptHeader(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    let mask = if flags.is_empty() {
        None
    } else {
        Some(FreezeMask::from_flags(flags).map_err(|e| CheckpointError::CorruptHeader(e.to_string()))?)
    };
    Ok((state, mask))
}

pub fn save_checkpoint<S: Real>(path: &Path, state: &ModelState<S>, mask: Option<&FreezeMask>) -> Result<()> {
    let bytes = encode_checkpoint(state, mask)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<S: Real>(path: &Path) -> Result<(ModelState<S>, Option<FreezeMask>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Check a loaded state against the tensors a config requires.
pub fn check_against<S: Real>(state: &ModelState<S>, specs: &[ParamSpec]) -> Result<()> {
    for s in specs {
        let t = state
            .get(&s.name)
            .map_err(|_| CheckpointError::Missing(s.name.clone()))?;
        if t.shape() != s.shape.as_slice() {
            return Err(CheckpointError::ShapeMismatch {
                name: s.name.clone(),
                expected: s.shape.clone(),
                found: t.shape().to_vec(),
            }
            .into());
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::swinlite::{backbone_specs, init_backbone, BackboneConfig};

    fn sample() -> ModelState<f32> {
        init_backbone(&BackboneConfig::toy(), 1).unwrap()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let s = sample();
        let mask = FreezeMask::all_learnable(&s);
        let a = encode_checkpoint(&s, Some(&mask)).unwrap();
        let (s2, m2) = decode_checkpoint::<f32>(&a).unwrap();
        assert_eq!(s, s2);
        assert_eq!(Some(mask), m2);
        let b = encode_checkpoint(&s2, m2.as_ref()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn flipped_payload_byte_is_checksum_error() {
        let mut a = encode_checkpoint(&sample(), None).unwrap();
        let n = a.len();
        a[n - 100] ^= 0x10;
        assert!(matches!(
            decode_checkpoint::<f32>(&a),
            Err(Error::Checkpoint(CheckpointError::Checksum { .. }))
        ));
    }

    #[test]
    fn distinct_errors() {
        let a = encode_checkpoint(&sample(), None).unwrap();
        let mut bad = a.clone();
        bad[0] = b'X';
        assert!(matches!(
            decode_checkpoint::<f32>(&bad),
            Err(Error::Checkpoint(CheckpointError::CorruptHeader(_)))
        ));
        assert!(matches!(
            decode_checkpoint::<f32>(&a[..a.len() / 2]),
            Err(Error::Checkpoint(CheckpointError::Truncated { .. }))
        ));
        let mut dtype = a.clone();
        // first entry's dtype byte sits right after its name
        let name_len = u32::from_le_bytes(a[16..20].try_into().unwrap()) as usize;
        dtype[20 + name_len] = 9;
        assert!(matches!(
            decode_checkpoint::<f32>(&dtype),
            Err(Error::Checkpoint(CheckpointError::DType { code: 9, .. }))
        ));
    }

    #[test]
    fn mismatched_config_names_tensor_and_shapes() {
        let s = sample();
        let mut cfg = BackboneConfig::toy();
        cfg.embed_dim = 16;
        cfg.heads = vec![2, 2];
        let err = check_against(&s, &backbone_specs(&cfg)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("backbone.patch_embed.proj.weight"), "{msg}");
        assert!(msg.contains("[16, 16]") && msg.contains("[16, 32]"), "{msg}");
    }
}
