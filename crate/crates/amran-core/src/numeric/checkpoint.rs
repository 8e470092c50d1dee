//! Versioned binary checkpoint container: named tensors with shapes, guarded
//! by a SHA-256 content checksum. Values round-trip bit-exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numeric::params::ParamStore;
use crate::numeric::tensor::Tensor;

const MAGIC: &[u8; 4] = b"AMRN";
const VERSION: u32 = 1;

pub fn save(params: &ParamStore, path: &Path) -> Result<()> {
    let mut payload = Vec::new();
    payload.extend_from_slice(MAGIC);
    payload.extend_from_slice(&VERSION.to_le_bytes());
    payload.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (_, entry) in params.iter() {
        let name = entry.name.as_bytes();
        payload.extend_from_slice(&(name.len() as u32).to_le_bytes());
        payload.extend_from_slice(name);
        payload.push(entry.trainable as u8);
        payload.extend_from_slice(&(entry.tensor.rank() as u32).to_le_bytes());
        for &d in entry.tensor.shape() {
            payload.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in entry.tensor.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&payload);
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&payload)?;
    out.write_all(&digest)?;
    out.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamStore> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    if bytes.len() < 32 + 12 {
        return Err(Error::Checkpoint("file too short".into()));
    }
    let (payload, checksum) = bytes.split_at(bytes.len() - 32);
    let digest = Sha256::digest(payload);
    if digest.as_slice() != checksum {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }
    let mut cur = Cursor { buf: payload, pos: 0 };
    if cur.take(4)? != &MAGIC[..] {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = cur.u32()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("invalid tensor name".into()))?;
        let trainable = cur.take(1)?[0] != 0;
        let rank = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(f64::from_le_bytes(cur.take(8)?.try_into().unwrap()));
        }
        params.register(&name, Tensor::from_vec(&shape, data)?, trainable)?;
    }
    Ok(params)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
