//! VT01 binary tensor files.
//!
//! Layout: magic `VT01`, `u8` rank, `u8` dtype code (0 = f32, 1 = f64),
//! `rank` little-endian `u32` extents, then the row-major elements in
//! little-endian byte order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"VT01";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
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

/// A tensor read from disk whose element type is only known at runtime.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    pub fn into_dtype<T: Scalar>(self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn to_vt01_bytes(&self) -> Result<Vec<u8>> {
        if self.rank() > u8::MAX as usize {
            return Err(Error::invalid(format!(
                "rank {} does not fit VT01",
                self.rank()
            )));
        }
        let mut out = Vec::with_capacity(6 + 4 * self.rank() + self.len() * T::DTYPE.size());
        out.extend_from_slice(MAGIC);
        out.push(self.rank() as u8);
        out.push(T::DTYPE.code());
        for &e in self.shape() {
            let e = u32::try_from(e)
                .map_err(|_| Error::invalid(format!("extent {e} does not fit u32")))?;
            out.extend_from_slice(&e.to_le_bytes());
        }
        for &v in self.data() {
            v.write_le(&mut out);
        }
        Ok(out)
    }
}

fn parse_vt01(bytes: &[u8], path: &Path) -> Result<AnyTensor> {
    let bad = |message: &str| Error::Format {
        path: path.to_path_buf(),
        message: message.to_string(),
    };
    if bytes.len() < 6 || &bytes[..4] != MAGIC {
        return Err(bad("missing VT01 magic"));
    }
    let rank = bytes[4] as usize;
    let dtype = DType::from_code(bytes[5]).ok_or_else(|| bad("unknown dtype code"))?;
    let header = 6 + 4 * rank;
    if bytes.len() < header {
        return Err(bad("truncated header"));
    }
    let shape: Vec<usize> = (0..rank)
        .map(|k| {
            let b = &bytes[6 + 4 * k..10 + 4 * k];
            u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize
        })
        .collect();
    let count: usize = shape.iter().product();
    let body = &bytes[header..];
    if body.len() != count * dtype.size() {
        return Err(bad(&format!(
            "expected {} data bytes for shape {shape:?}, found {}",
            count * dtype.size(),
            body.len()
        )));
    }
    let wrap = |e: Error| bad(&e.to_string());
    Ok(match dtype {
        DType::F32 => AnyTensor::F32(
            Tensor::new(shape, body.chunks_exact(4).map(f32::read_le).collect()).map_err(wrap)?,
        ),
        DType::F64 => AnyTensor::F64(
            Tensor::new(shape, body.chunks_exact(8).map(f64::read_le).collect()).map_err(wrap)?,
        ),
    })
}

pub fn write_vt01<T: Scalar>(path: impl AsRef<Path>, tensor: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, tensor.to_vt01_bytes()?).map_err(|e| Error::io(path, e))
}

/// Read a VT01 file, keeping whatever dtype it was stored with.
pub fn read_vt01_any(path: impl AsRef<Path>) -> Result<AnyTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_vt01(&bytes, path)
}

/// Read a VT01 file, converting to `T` if the stored dtype differs.
pub fn read_vt01<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    Ok(read_vt01_any(path)?.into_dtype())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::<f32>::new(vec![2, 1], vec![1.0, -2.0]).unwrap();
        let bytes = t.to_vt01_bytes().unwrap();
        assert_eq!(&bytes[..4], b"VT01");
        assert_eq!(bytes[4], 2);
        assert_eq!(bytes[5], 0);
        assert_eq!(&bytes[6..10], &2u32.to_le_bytes());
        assert_eq!(&bytes[10..14], &1u32.to_le_bytes());
        assert_eq!(&bytes[14..18], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 22);
    }

    #[test]
    fn rejects_garbage() {
        let p = Path::new("mem");
        assert!(parse_vt01(b"VT02\x01\x00", p).is_err());
        assert!(parse_vt01(b"VT01\x01\x07\x01\x00\x00\x00", p).is_err());
        assert!(parse_vt01(b"VT01\x01\x00\x02\x00\x00\x00\x00\x00\x00\x00", p).is_err());
    }

    #[test]
    fn file_round_trip_keeps_dtype() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.vt01");
        let t = Tensor::<f64>::from_fn(vec![2, 3, 4], |i| {
            (i[0] * 12 + i[1] * 4 + i[2]) as f64 / 7.0
        });
        write_vt01(&path, &t).unwrap();
        match read_vt01_any(&path).unwrap() {
            AnyTensor::F64(back) => assert_eq!(back, t),
            other => panic!("wrong dtype: {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn bytes_round_trip(shape in prop::collection::vec(1usize..4, 1..5), scale in -10.0f32..10.0) {
            let t = Tensor::<f32>::from_fn(shape, |i| scale * i.iter().sum::<usize>() as f32);
            let back = parse_vt01(&t.to_vt01_bytes().unwrap(), Path::new("mem")).unwrap();
            prop_assert_eq!(back, AnyTensor::F32(t));
        }
    }
}
