//! `RMT1` flat binary tensor format:
//!
//! ```text
//! b"RMT1" | u8 precision (0 = f32, 1 = f64) | u8 rank | rank x u32 LE extents | scalars LE
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{numel, Precision, Scalar, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RMT1";

/// A tensor read from disk whose precision is only known at runtime.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn precision(&self) -> Precision {
        match self {
            AnyTensor::F32(_) => Precision::F32,
            AnyTensor::F64(_) => Precision::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    pub fn into_precision<T: Scalar>(self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

pub fn write_tensor_to<T: Scalar, W: Write>(t: &Tensor<T>, mut w: W) -> std::io::Result<()> {
    let rank = u8::try_from(t.rank()).map_err(|_| {
        std::io::Error::new(std::io::ErrorKind::InvalidInput, "rank exceeds 255")
    })?;
    let mut buf = Vec::with_capacity(6 + 4 * t.rank() + T::PRECISION.width() * t.len());
    buf.extend_from_slice(MAGIC);
    buf.push(T::PRECISION.code());
    buf.push(rank);
    for &e in t.shape() {
        let e = u32::try_from(e).map_err(|_| {
            std::io::Error::new(std::io::ErrorKind::InvalidInput, "extent exceeds u32")
        })?;
        buf.extend_from_slice(&e.to_le_bytes());
    }
    for &v in t.data() {
        v.put_le(&mut buf);
    }
    w.write_all(&buf)
}

pub fn write_tensor<T: Scalar>(t: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    write_tensor_to(t, &mut bytes).map_err(|e| Error::io(path, e))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Parse one tensor record from a reader. Never yields a partially filled tensor.
pub fn read_tensor_from<R: Read>(mut r: R, origin: &Path) -> Result<AnyTensor> {
    let fail = |reason: &str| Error::format(origin, reason);
    let mut head = [0u8; 6];
    r.read_exact(&mut head)
        .map_err(|_| fail("truncated header"))?;
    if &head[..4] != MAGIC {
        return Err(fail("bad magic, expected RMT1"));
    }
    let precision = Precision::from_code(head[4]).ok_or_else(|| fail("unknown precision code"))?;
    let rank = head[5] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut e = [0u8; 4];
        r.read_exact(&mut e).map_err(|_| fail("truncated extents"))?;
        shape.push(u32::from_le_bytes(e) as usize);
    }
    let n = numel(&shape);
    let width = precision.width();
    let mut raw = vec![0u8; n * width];
    r.read_exact(&mut raw)
        .map_err(|_| fail("truncated payload"))?;
    Ok(match precision {
        Precision::F32 => AnyTensor::F32(Tensor::new(
            shape,
            raw.chunks_exact(4).map(f32::get_le).collect(),
        )?),
        Precision::F64 => AnyTensor::F64(Tensor::new(
            shape,
            raw.chunks_exact(8).map(f64::get_le).collect(),
        )?),
    })
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<AnyTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cursor = std::io::Cursor::new(&bytes[..]);
    let t = read_tensor_from(&mut cursor, path)?;
    if (cursor.position() as usize) != bytes.len() {
        return Err(Error::format(path, "trailing bytes after tensor payload"));
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_bit_exact() {
        let t = Tensor::<f32>::new([2, 1], vec![1.0, -2.0]).unwrap();
        let mut bytes = Vec::new();
        write_tensor_to(&t, &mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"RMT1");
        assert_eq!(bytes[4], 0);
        assert_eq!(bytes[5], 2);
        assert_eq!(&bytes[6..10], &2u32.to_le_bytes());
        assert_eq!(&bytes[10..14], &1u32.to_le_bytes());
        assert_eq!(&bytes[14..18], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 22);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let t = Tensor::<f64>::ones([3, 3]);
        let mut bytes = Vec::new();
        write_tensor_to(&t, &mut bytes).unwrap();
        for cut in [0, 3, 6, 9, bytes.len() - 1] {
            let err = read_tensor_from(&bytes[..cut], Path::new("mem")).unwrap_err();
            assert!(matches!(err, Error::Format { .. }), "cut {cut}: {err}");
        }
    }

    #[test]
    fn rejects_bad_magic() {
        let err = read_tensor_from(&b"RMT2\x00\x00\x00\x00\x80\x3f"[..], Path::new("mem"))
            .unwrap_err();
        assert!(err.to_string().contains("magic"));
    }

    proptest! {
        #[test]
        fn roundtrip(shape in proptest::collection::vec(1usize..5, 0..4), seed in any::<u64>()) {
            let n = numel(&shape);
            let data: Vec<f64> = (0..n).map(|i| ((i as u64 ^ seed) as f64).sin()).collect();
            let t = Tensor::<f64>::new(shape.clone(), data).unwrap();
            let mut bytes = Vec::new();
            write_tensor_to(&t, &mut bytes).unwrap();
            let back = read_tensor_from(&bytes[..], Path::new("mem")).unwrap();
            prop_assert_eq!(back, AnyTensor::F64(t));
        }
    }
}
