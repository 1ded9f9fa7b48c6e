//! Binary checkpoints: `magic | version u32 | layer count u32 | sizes u32... | params f64...`,
//! all little-endian.

use super::{param_count, MlpField};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"OINV-MLP";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(field: &MlpField) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * field.sizes().len() + 8 * field.params().len());
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(field.sizes().len() as u32).to_le_bytes());
    for &s in field.sizes() {
        out.extend_from_slice(&(s as u32).to_le_bytes());
    }
    for p in field.params() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Checkpoint(format!(
                "truncated stream: {what} needs {n} bytes at offset {}, {} available",
                self.pos,
                self.bytes.len() - self.pos
            ))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<MlpField> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(8, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {magic:?}, expected {:?}",
            std::str::from_utf8(&CHECKPOINT_MAGIC).unwrap()
        )));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (this build reads version {CHECKPOINT_VERSION})"
        )));
    }
    let count = r.u32("layer count")? as usize;
    if count < 2 {
        return Err(Error::Checkpoint(format!("layer count {count} is below 2")));
    }
    let mut sizes = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        sizes.push(r.u32("layer size")? as usize);
    }
    if sizes.contains(&0) {
        return Err(Error::Checkpoint("zero-width layer".into()));
    }
    let n = param_count(&sizes);
    let raw = r.take(n.saturating_mul(8), "parameters")?;
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after parameters",
            bytes.len() - r.pos
        )));
    }
    let params = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    MlpField::from_parts(sizes, params).map_err(|e| Error::Checkpoint(e.to_string()))
}
