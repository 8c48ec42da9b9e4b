//! Binary checkpoint format.
//!
//! Layout: magic "DEMF", format version u32 LE, then per parameter:
//! name length (u64 LE), UTF-8 name bytes, rank (u64 LE), extents
//! (u64 LE each), raw little-endian float64 payload. Parameters are
//! written in the order given and read until end of file. Loading
//! verifies the name set and every shape exactly.

use std::collections::HashMap;

use thiserror::Error;

use super::tensor::Parameter;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DEMF";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic; not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("truncated checkpoint")]
    Truncated,
    #[error("parameter name is not valid UTF-8")]
    BadName,
    #[error("checkpoint mismatch: {0}")]
    Mismatch(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub fn save_checkpoint(params: &[Parameter]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for p in params {
        let name = p.name.as_bytes();
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name);
        let shape = p.tensor.shape();
        out.extend_from_slice(&(shape.len() as u64).to_le_bytes());
        for e in &shape {
            out.extend_from_slice(&(*e as u64).to_le_bytes());
        }
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Truncated);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

/// One stored tensor: (name, shape, data).
pub type TensorRecord = (String, Vec<usize>, Vec<f64>);

/// Parses a checkpoint into (name, shape, data) records.
///
/// Tolerates arbitrary untrusted bytes: lengths are validated against the
/// remaining input before any allocation.
pub fn parse_checkpoint(bytes: &[u8]) -> Result<Vec<TensorRecord>, CheckpointError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let mut records = Vec::new();
    while r.remaining() > 0 {
        let name_len = r.u64()?;
        if name_len > r.remaining() as u64 {
            return Err(CheckpointError::Truncated);
        }
        let name = std::str::from_utf8(r.take(name_len as usize)?)
            .map_err(|_| CheckpointError::BadName)?
            .to_string();
        let rank = r.u64()?;
        if rank > (r.remaining() / 8) as u64 {
            return Err(CheckpointError::Truncated);
        }
        let mut shape = Vec::with_capacity(rank as usize);
        let mut count: u64 = 1;
        for _ in 0..rank {
            let e = r.u64()?;
            count = count.saturating_mul(e);
            shape.push(e as usize);
        }
        if count > (r.remaining() / 8) as u64 {
            return Err(CheckpointError::Truncated);
        }
        let mut data = Vec::with_capacity(count as usize);
        for _ in 0..count {
            data.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
        }
        records.push((name, shape, data));
    }
    Ok(records)
}

/// Loads checkpoint bytes into the given parameters, verifying that the
/// name sets and shapes match exactly.
pub fn load_checkpoint(bytes: &[u8], params: &[Parameter]) -> Result<(), CheckpointError> {
    let records = parse_checkpoint(bytes)?;
    let mut by_name: HashMap<&str, &Parameter> =
        params.iter().map(|p| (p.name.as_str(), p)).collect();
    if records.len() != params.len() {
        return Err(CheckpointError::Mismatch(format!(
            "expected {} parameters, file has {}",
            params.len(),
            records.len()
        )));
    }
    for (name, shape, data) in records {
        let p = by_name
            .remove(name.as_str())
            .ok_or_else(|| CheckpointError::Mismatch(format!("unknown parameter '{name}'")))?;
        let expected = p.tensor.shape();
        if expected != shape {
            return Err(CheckpointError::Mismatch(format!(
                "parameter '{name}': shape {shape:?}, expected {expected:?}"
            )));
        }
        p.tensor.set_data(data);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let params = vec![
            Parameter::new("a.w", &[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]),
            Parameter::new("b", &[1], vec![-0.5]),
        ];
        let bytes = save_checkpoint(&params);
        let fresh = vec![
            Parameter::new("a.w", &[2, 3], vec![0.0; 6]),
            Parameter::new("b", &[1], vec![0.0]),
        ];
        load_checkpoint(&bytes, &fresh).unwrap();
        assert_eq!(fresh[0].tensor.data(), params[0].tensor.data());
        assert_eq!(fresh[1].tensor.data(), params[1].tensor.data());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let params = vec![Parameter::new("w", &[2], vec![1.0, 2.0])];
        let bytes = save_checkpoint(&params);
        let wrong = vec![Parameter::new("w", &[3], vec![0.0; 3])];
        assert!(matches!(
            load_checkpoint(&bytes, &wrong),
            Err(CheckpointError::Mismatch(_))
        ));
    }

    #[test]
    fn truncated_and_garbage_inputs_error_cleanly() {
        assert!(parse_checkpoint(b"").is_err());
        assert!(parse_checkpoint(b"XXXX").is_err());
        let params = vec![Parameter::new("w", &[2], vec![1.0, 2.0])];
        let bytes = save_checkpoint(&params);
        assert!(parse_checkpoint(&bytes[..bytes.len() - 3]).is_err());
        // Huge claimed name length must not allocate.
        let mut evil = Vec::new();
        evil.extend_from_slice(CHECKPOINT_MAGIC);
        evil.extend_from_slice(&1u32.to_le_bytes());
        evil.extend_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(
            parse_checkpoint(&evil),
            Err(CheckpointError::Truncated)
        ));
    }
}
