//! Binary tensor container.
//!
//! Layout (all integers little-endian):
//!
//! | bytes        | field                                  |
//! |--------------|----------------------------------------|
//! | 4            | magic `MTUE`                           |
//! | 2            | format version, `u16` = 1              |
//! | 1            | dtype code: 0 = `f32`, 1 = `i32`       |
//! | 1            | number of dimensions                   |
//! | 4 × ndim     | dimensions, `u32` each                 |
//! | rest         | row-major payload                      |

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"MTUE";
pub const VERSION: u16 = 1;
const HEADER_FIXED: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Dtype {
    F32 = 0,
    I32 = 1,
}

impl Dtype {
    fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::I32 => "i32",
        }
    }
}

/// Integer tensor as stored in a container (labels, segmentation maps).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IntTensor {
    pub shape: Vec<usize>,
    pub data: Vec<i32>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Tensor<f32>),
    I32(IntTensor),
}

fn header(dtype: Dtype, shape: &[usize]) -> Result<Vec<u8>> {
    let ndim = u8::try_from(shape.len()).map_err(|_| Error::invalid("too many dimensions"))?;
    let mut out = Vec::with_capacity(HEADER_FIXED + 4 * shape.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(dtype as u8);
    out.push(ndim);
    for &d in shape {
        let d = u32::try_from(d).map_err(|_| Error::invalid(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    Ok(out)
}

pub fn encode_f32(t: &Tensor<f32>) -> Result<Vec<u8>> {
    let mut out = header(Dtype::F32, t.shape())?;
    out.reserve(4 * t.numel());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn encode_i32(t: &IntTensor) -> Result<Vec<u8>> {
    if t.shape.iter().product::<usize>() != t.data.len() {
        return Err(Error::shape("encode_i32", format!("shape {:?} vs {} values", t.shape, t.data.len())));
    }
    let mut out = header(Dtype::I32, &t.shape)?;
    out.reserve(4 * t.data.len());
    for v in &t.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Payload> {
    let truncated = |expected: usize| Error::Truncated {
        path: path.to_path_buf(),
        expected,
        found: bytes.len(),
    };
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        return Err(Error::BadMagic(path.to_path_buf()));
    }
    if bytes.len() < HEADER_FIXED {
        return Err(truncated(HEADER_FIXED));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let dtype = match bytes[6] {
        0 => Dtype::F32,
        1 => Dtype::I32,
        other => return Err(Error::invalid(format!("unknown dtype code {other} in {}", path.display()))),
    };
    let ndim = bytes[7] as usize;
    let header_len = HEADER_FIXED + 4 * ndim;
    if bytes.len() < header_len {
        return Err(truncated(header_len));
    }
    let shape: Vec<usize> = bytes[HEADER_FIXED..header_len]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let payload = &bytes[header_len..];
    let expected = shape.iter().product::<usize>() * 4;
    if payload.len() != expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            found: payload.len(),
        });
    }
    let words = payload.chunks_exact(4).map(|c| <[u8; 4]>::try_from(c).unwrap());
    Ok(match dtype {
        Dtype::F32 => Payload::F32(Tensor::new(shape, words.map(f32::from_le_bytes).collect())?),
        Dtype::I32 => Payload::I32(IntTensor {
            shape,
            data: words.map(i32::from_le_bytes).collect(),
        }),
    })
}

/// Writes `bytes` to a new file; existing artifacts are never overwritten.
pub fn write_new(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = OpenOptions::new()
        .write(true)
        .create_new(true)
        .open(path)
        .map_err(|e| match e.kind() {
            std::io::ErrorKind::AlreadyExists => Error::ArtifactExists(path.to_path_buf()),
            _ => Error::io(path, e),
        })?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub fn write_f32(path: &Path, t: &Tensor<f32>) -> Result<()> {
    write_new(path, &encode_f32(t)?)
}

pub fn write_i32(path: &Path, t: &IntTensor) -> Result<()> {
    write_new(path, &encode_i32(t)?)
}

pub fn read(path: &Path) -> Result<Payload> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

pub fn read_f32(path: &Path) -> Result<Tensor<f32>> {
    match read(path)? {
        Payload::F32(t) => Ok(t),
        Payload::I32(_) => Err(Error::DtypeMismatch {
            expected: Dtype::F32.name(),
            found: Dtype::I32.name(),
        }),
    }
}

pub fn read_i32(path: &Path) -> Result<IntTensor> {
    match read(path)? {
        Payload::I32(t) => Ok(t),
        Payload::F32(_) => Err(Error::DtypeMismatch {
            expected: Dtype::I32.name(),
            found: Dtype::F32.name(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn f32_2x3_is_40_bytes() {
        let t = Tensor::from_fn([2, 3], |i| i as f32 * 0.5);
        let bytes = encode_f32(&t).unwrap();
        assert_eq!(bytes.len(), 4 + 2 + 1 + 1 + 2 * 4 + 24);
        assert_eq!(&bytes[..4], b"MTUE");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(bytes[6], 0);
        assert_eq!(bytes[7], 2);
    }

    #[test]
    fn corrupt_magic_fails() {
        let mut bytes = encode_f32(&Tensor::zeros([2])).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes, Path::new("x")), Err(Error::BadMagic(_))));
    }

    #[test]
    fn version_and_truncation_errors() {
        let mut bytes = encode_f32(&Tensor::zeros([2, 2])).unwrap();
        bytes[4] = 2;
        assert!(matches!(decode(&bytes, Path::new("x")), Err(Error::VersionMismatch { found: 2, .. })));
        bytes[4] = 1;
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(decode(&bytes, Path::new("x")), Err(Error::Truncated { .. })));
    }

    #[test]
    fn files_are_append_only() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.mtue");
        let t = Tensor::from_fn([3], |i| i as f32);
        write_f32(&p, &t).unwrap();
        assert!(matches!(write_f32(&p, &t), Err(Error::ArtifactExists(_))));
        assert!(read_f32(&p).unwrap().bit_eq(&t));
        assert!(matches!(read_i32(&p), Err(Error::DtypeMismatch { .. })));
    }

    proptest! {
        #[test]
        fn f32_round_trip_is_bit_exact(dims in prop::collection::vec(1usize..5, 1..4), seed in any::<u32>()) {
            let n: usize = dims.iter().product();
            let data: Vec<f32> = (0..n).map(|i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32 * 40503))).collect();
            let t = Tensor::new(dims, data).unwrap();
            let back = match decode(&encode_f32(&t).unwrap(), Path::new("p")).unwrap() {
                Payload::F32(b) => b,
                _ => unreachable!(),
            };
            prop_assert_eq!(back.shape(), t.shape());
            prop_assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }

        #[test]
        fn i32_round_trip(data in prop::collection::vec(any::<i32>(), 1..40)) {
            let t = IntTensor { shape: vec![data.len()], data };
            let back = decode(&encode_i32(&t).unwrap(), Path::new("p")).unwrap();
            prop_assert_eq!(back, Payload::I32(t));
        }
    }
}
