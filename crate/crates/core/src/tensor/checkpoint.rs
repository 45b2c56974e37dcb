//! Binary checkpoint format.
//!
//! ```text
//! "DGA1"
//! repeated until EOF:
//!   u64 name length, name bytes (UTF-8)
//!   u64 rank, rank × u64 extents
//!   f64 payload (product of extents values)
//! ```
//! All integers and floats are little-endian.

use std::io::{ErrorKind, Read, Write};

use super::Tensor;
use crate::error::{DgaError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DGA1";

/// Ordered named tensors as stored on disk.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub records: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn write_checkpoint<W: Write>(mut w: W, ckpt: &Checkpoint) -> std::io::Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    for (name, t) in &ckpt.records {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u64).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()
}

// Names and extents beyond these are treated as corruption.
const MAX_NAME: u64 = 4096;
const MAX_ELEMS: u64 = 1 << 31;

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| DgaError::Checkpoint("file too short for magic".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(DgaError::Checkpoint(format!("bad magic {magic:?}")));
    }
    let mut records = Vec::new();
    loop {
        let name_len = match read_u64(&mut r) {
            Ok(n) => n,
            Err(e) if e.kind() == ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(DgaError::Checkpoint(e.to_string())),
        };
        let n = records.len();
        let ctx = |what: &'static str| {
            move |e: std::io::Error| DgaError::Checkpoint(format!("record {n}: {what}: {e}"))
        };
        if name_len > MAX_NAME {
            return Err(DgaError::Checkpoint(format!(
                "record {}: name length {name_len}",
                records.len()
            )));
        }
        let mut name = vec![0u8; name_len as usize];
        r.read_exact(&mut name).map_err(ctx("name"))?;
        let name = String::from_utf8(name)
            .map_err(|_| DgaError::Checkpoint(format!("record {}: name not UTF-8", records.len())))?;
        let rank = read_u64(&mut r).map_err(ctx("rank"))?;
        if rank > 2 {
            return Err(DgaError::Checkpoint(format!("`{name}`: rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        let mut count: u64 = 1;
        for _ in 0..rank {
            let d = read_u64(&mut r).map_err(ctx("extent"))?;
            count = count.saturating_mul(d);
            shape.push(d as usize);
        }
        if count > MAX_ELEMS {
            return Err(DgaError::Checkpoint(format!("`{name}`: {count} elements")));
        }
        let mut data = Vec::with_capacity(count as usize);
        let mut buf = [0u8; 8];
        for _ in 0..count {
            r.read_exact(&mut buf).map_err(ctx("payload"))?;
            data.push(f64::from_le_bytes(buf));
        }
        let t = Tensor::new(shape, data).map_err(|e| DgaError::Checkpoint(format!("`{name}`: {e}")))?;
        records.push((name, t));
    }
    Ok(Checkpoint { records })
}

fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
