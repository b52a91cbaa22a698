use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const GTEN_MAGIC: &[u8; 4] = b"GTEN";
const VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 1,
    F64 = 2,
}

impl DType {
    fn from_byte(b: u8) -> Result<Self> {
        match b {
            1 => Ok(DType::F32),
            2 => Ok(DType::F64),
            other => Err(Error::Format(format!("unknown GTEN dtype {other}"))),
        }
    }
}

fn io_err(e: std::io::Error) -> Error {
    Error::Format(e.to_string())
}

/// Layout: magic, version byte, dtype byte, u16 ndim, ndim × u32 dims, payload; all little-endian.
pub fn write_gten<W: Write>(w: &mut W, t: &Tensor, dtype: DType) -> Result<()> {
    let ndim = u16::try_from(t.shape().len())
        .map_err(|_| Error::Format("too many dimensions".into()))?;
    let mut buf = Vec::with_capacity(8 + 4 * t.shape().len() + 8 * t.len());
    buf.extend_from_slice(GTEN_MAGIC);
    buf.push(VERSION);
    buf.push(dtype as u8);
    buf.extend_from_slice(&ndim.to_le_bytes());
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} too large")))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    match dtype {
        DType::F32 => {
            for &v in t.data() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        DType::F64 => {
            for &v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    w.write_all(&buf).map_err(io_err)
}

pub fn read_gten<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut head = [0u8; 8];
    r.read_exact(&mut head).map_err(io_err)?;
    if &head[..4] != GTEN_MAGIC {
        return Err(Error::Format("bad GTEN magic".into()));
    }
    if head[4] != VERSION {
        return Err(Error::Format(format!("unsupported GTEN version {}", head[4])));
    }
    let dtype = DType::from_byte(head[5])?;
    let ndim = u16::from_le_bytes([head[6], head[7]]) as usize;
    let mut dims = vec![0u8; 4 * ndim];
    r.read_exact(&mut dims).map_err(io_err)?;
    let shape: Vec<usize> = dims
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let n: usize = shape.iter().product();
    let data = match dtype {
        DType::F32 => {
            let mut raw = vec![0u8; 4 * n];
            r.read_exact(&mut raw).map_err(io_err)?;
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect()
        }
        DType::F64 => {
            let mut raw = vec![0u8; 8 * n];
            r.read_exact(&mut raw).map_err(io_err)?;
            raw.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect()
        }
    };
    Tensor::new(shape, data)
}

pub fn write_gten_file(path: &Path, t: &Tensor, dtype: DType) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_gten(&mut w, t, dtype)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_gten_file(path: &Path) -> Result<Tensor> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_gten(&mut BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_is_bit_exact() {
        let t = Tensor::new(vec![2, 1], vec![1.0, -2.0]).unwrap();
        let mut buf = Vec::new();
        write_gten(&mut buf, &t, DType::F32).unwrap();
        let mut expected = b"GTEN".to_vec();
        expected.extend_from_slice(&[1, 1, 2, 0, 2, 0, 0, 0, 1, 0, 0, 0]);
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(buf, expected);
    }

    #[test]
    fn rejects_bad_magic_and_dtype() {
        assert!(read_gten(&mut &b"GTEX\x01\x02\x00\x00"[..]).is_err());
        assert!(read_gten(&mut &b"GTEN\x01\x07\x00\x00"[..]).is_err());
        assert!(read_gten(&mut &b"GTEN\x02\x02\x00\x00"[..]).is_err());
    }

    proptest! {
        #[test]
        fn f64_roundtrip(dims in proptest::collection::vec(1usize..5, 1..4), seed in any::<u64>()) {
            let t = Tensor::from_fn(&dims, |i| f64::from_bits(seed.wrapping_mul(i as u64 + 1) >> 2));
            let mut buf = Vec::new();
            write_gten(&mut buf, &t, DType::F64).unwrap();
            let back = read_gten(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            prop_assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }

        #[test]
        fn f32_roundtrip_of_f32_values(v in proptest::collection::vec(-1e6f32..1e6, 1..30)) {
            let t = Tensor::new(vec![v.len()], v.iter().map(|&x| x as f64).collect()).unwrap();
            let mut buf = Vec::new();
            write_gten(&mut buf, &t, DType::F32).unwrap();
            prop_assert_eq!(read_gten(&mut buf.as_slice()).unwrap(), t);
        }
    }
}
