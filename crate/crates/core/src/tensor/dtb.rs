//! DTB binary tensor container.
//!
//! Layout, all integers little-endian:
//!
//! | bytes   | content                                  |
//! |---------|------------------------------------------|
//! | 4       | magic `DTB1`                             |
//! | 1       | dtype code (0 = f32, 1 = f64)            |
//! | 1       | rank R                                   |
//! | 8 * R   | dimensions as u64                        |
//! | rest    | IEEE-754 payload in row-major order      |

use std::path::Path;

use super::{Real, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"DTB1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

pub fn write_dtb<T: Real>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 8 * t.rank() + t.len() * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.push(T::DTYPE.code());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

pub fn read_dtb<T: Real>(bytes: &[u8]) -> Result<Tensor<T>> {
    if bytes.len() < 6 || &bytes[..4] != MAGIC {
        return Err(Error::Format("bad DTB magic".into()));
    }
    let dtype = DType::from_code(bytes[4])
        .ok_or_else(|| Error::Format(format!("unknown DTB dtype code {}", bytes[4])))?;
    if dtype != T::DTYPE {
        return Err(Error::Format(format!(
            "DTB holds {dtype:?}, expected {:?}",
            T::DTYPE
        )));
    }
    let rank = bytes[5] as usize;
    let header = 6 + 8 * rank;
    if bytes.len() < header {
        return Err(Error::Format("truncated DTB header".into()));
    }
    let shape: Vec<usize> = (0..rank)
        .map(|i| {
            let at = 6 + 8 * i;
            u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap()) as usize
        })
        .collect();
    let count = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Error::Format(format!("DTB shape {shape:?} overflows")))?;
    let width = dtype.size();
    let payload = &bytes[header..];
    if payload.len() != count * width {
        return Err(Error::Format(format!(
            "DTB payload has {} bytes, shape {shape:?} needs {}",
            payload.len(),
            count * width
        )));
    }
    let data = payload.chunks_exact(width).map(T::read_le).collect();
    Tensor::from_vec(&shape, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_dtb_file<T: Real>(path: &Path, t: &Tensor<T>) -> Result<()> {
    std::fs::write(path, write_dtb(t)).map_err(|e| Error::io(path, e))
}

pub fn read_dtb_file<T: Real>(path: &Path) -> Result<Tensor<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_dtb(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn exact_layout() {
        let t = Tensor::<f32>::from_vec(&[2], vec![1.0, -2.5]).unwrap();
        let bytes = write_dtb(&t);
        let mut expect = b"DTB1".to_vec();
        expect.push(0);
        expect.push(1);
        expect.extend_from_slice(&2u64.to_le_bytes());
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        expect.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(bytes, expect);
    }

    #[test]
    fn rejects_corruption() {
        let t = Tensor::<f64>::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let bytes = write_dtb(&t);
        assert!(read_dtb::<f64>(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(read_dtb::<f64>(&bad).is_err());
        assert!(read_dtb::<f32>(&bytes).is_err());
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(read_dtb::<f64>(&bad).is_err());
    }

    #[test]
    fn checksum_survives_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.dtb");
        let t = Tensor::<f32>::he_init(&[4, 5], 5, &mut super::super::Rng::new(3)).unwrap();
        write_dtb_file(&path, &t).unwrap();
        let back: Tensor<f32> = read_dtb_file(&path).unwrap();
        assert_eq!(t.checksum(), back.checksum());
    }

    proptest! {
        #[test]
        fn round_trip(shape in proptest::collection::vec(1usize..5, 1..4), seed in any::<u64>()) {
            let n: usize = shape.iter().product();
            let mut rng = super::super::Rng::new(seed);
            let data: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
            let t = Tensor::from_vec(&shape, data).unwrap();
            let back: Tensor<f64> = read_dtb(&write_dtb(&t)).unwrap();
            prop_assert_eq!(&t, &back);
            prop_assert_eq!(write_dtb(&back), write_dtb(&t));
        }
    }
}
