//! Binary parameter checkpoints.
//!
//! Layout (little-endian): magic `TWCK`, `u32` version, `u32` tensor count,
//! then per tensor `u16` name length, UTF-8 name, `u8` rank, `rank × u32`
//! dims and the `f32` payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::params::ParamSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TWCK";
pub const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(params: &ParamSet<f32>, mut out: W) -> std::io::Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, t) in params.iter() {
        let bytes = name.as_bytes();
        out.write_all(&(bytes.len() as u16).to_le_bytes())?;
        out.write_all(bytes)?;
        out.write_all(&[t.shape().len() as u8])?;
        for &d in t.shape() {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()
}

struct Cursor<'a, R> {
    inner: R,
    offset: u64,
    path: &'a Path,
}

impl<R: Read> Cursor<'_, R> {
    fn bytes<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| Error::malformed(self.path, Some(self.offset), format!("truncated while reading {what}")))?;
        self.offset += N as u64;
        Ok(buf)
    }

    fn vec(&mut self, len: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; len];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| Error::malformed(self.path, Some(self.offset), format!("truncated while reading {what}")))?;
        self.offset += len as u64;
        Ok(buf)
    }
}

/// Parses a checkpoint; `path` is only used for error messages.
pub fn read_checkpoint<R: Read>(input: R, path: &Path) -> Result<ParamSet<f32>> {
    let mut cur = Cursor {
        inner: input,
        offset: 0,
        path,
    };
    if &cur.bytes::<4>("magic")? != MAGIC {
        return Err(Error::malformed(path, Some(0), "bad magic, expected TWCK"));
    }
    let version = u32::from_le_bytes(cur.bytes("version")?);
    if version != VERSION {
        return Err(Error::malformed(path, Some(4), format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(cur.bytes("tensor count")?);
    let mut params = ParamSet::new();
    for _ in 0..count {
        let at = cur.offset;
        let name_len = u16::from_le_bytes(cur.bytes("name length")?) as usize;
        let name = String::from_utf8(cur.vec(name_len, "name")?)
            .map_err(|_| Error::malformed(path, Some(at + 2), "tensor name is not UTF-8"))?;
        let rank = cur.bytes::<1>("rank")?[0] as usize;
        if !(1..=4).contains(&rank) {
            return Err(Error::malformed(path, Some(cur.offset - 1), format!("rank {rank} out of range")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(cur.bytes("dims")?) as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = cur.vec(numel * 4, "payload")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| Error::malformed(path, Some(at), e.to_string()))?;
        params
            .insert(name, t)
            .map_err(|e| Error::malformed(path, Some(at), e.to_string()))?;
    }
    let mut rest = [0u8; 1];
    if cur.inner.read(&mut rest).unwrap_or(0) != 0 {
        return Err(Error::malformed(path, Some(cur.offset), "trailing bytes after last tensor"));
    }
    Ok(params)
}

pub fn save_checkpoint(params: &ParamSet<f32>, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(params, BufWriter::new(f)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ParamSet<f32>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(f), path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamSet<f32> {
        let mut ps = ParamSet::new();
        ps.insert("trunk.w", Tensor::new(&[2, 1, 1, 1], vec![0.5, -1.25]).unwrap())
            .unwrap();
        ps.insert("fc.b", Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        ps
    }

    #[test]
    fn byte_layout() {
        let mut buf = Vec::new();
        write_checkpoint(&sample(), &mut buf).unwrap();
        assert_eq!(&buf[..4], b"TWCK");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 2);
        assert_eq!(u16::from_le_bytes(buf[12..14].try_into().unwrap()), 7);
        assert_eq!(&buf[14..21], b"trunk.w");
        assert_eq!(buf[21], 4);
        // header + 2 tensors
        let expected = 12 + (2 + 7 + 1 + 16 + 8) + (2 + 4 + 1 + 4 + 12);
        assert_eq!(buf.len(), expected);
    }

    #[test]
    fn round_trip_and_truncation() {
        let mut buf = Vec::new();
        write_checkpoint(&sample(), &mut buf).unwrap();
        let path = Path::new("mem.ckpt");
        let back = read_checkpoint(&buf[..], path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back.by_name("fc.b").unwrap().data(), &[1.0, 2.0, 3.0]);

        let err = read_checkpoint(&buf[..buf.len() - 3], path).unwrap_err();
        assert!(matches!(err, Error::MalformedFile { offset: Some(_), .. }));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(&bad[..], path).is_err());
    }
}
