//! `SALC` checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "SALC" | version u16 | entry count u32
//! per entry: name length u16 | UTF-8 name | precision u8 (0 = f32, 1 = f64)
//!            | rank u8 | extents u32 × rank | elements
//! ```

use std::fs;
use std::path::Path;

use super::array::Tensor;
use super::scalar::{Precision, Scalar};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SALC";
pub const CHECKPOINT_VERSION: u16 = 1;

/// A tensor read back in its stored precision.
#[derive(Clone, Debug, PartialEq)]
pub enum StoredTensor {
    Single(Tensor<f32>),
    Double(Tensor<f64>),
}

impl StoredTensor {
    /// Keeps the tensor in its own precision.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        match T::PRECISION {
            Precision::Single => StoredTensor::Single(t.cast()),
            Precision::Double => StoredTensor::Double(t.cast()),
        }
    }

    pub fn to_precision<T: Scalar>(&self) -> Tensor<T> {
        match self {
            StoredTensor::Single(t) => t.cast(),
            StoredTensor::Double(t) => t.cast(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::Single(t) => t.shape(),
            StoredTensor::Double(t) => t.shape(),
        }
    }
}

fn put_tensor<T: Scalar>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) -> Result<()> {
    let name_len = u16::try_from(name.len())
        .map_err(|_| Error::invalid(format!("entry name too long: {} bytes", name.len())))?;
    let rank = u8::try_from(t.rank()).map_err(|_| Error::invalid("tensor rank above 255"))?;
    out.extend_from_slice(&name_len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(T::PRECISION.code());
    out.push(rank);
    for &e in t.shape() {
        let e = u32::try_from(e).map_err(|_| Error::invalid("extent exceeds u32"))?;
        out.extend_from_slice(&e.to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
    Ok(())
}

/// Serialises named tensors; entry order is preserved.
pub fn encode_checkpoint<'a, T: Scalar>(entries: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>) -> Result<Vec<u8>> {
    let mut body = Vec::new();
    let mut count = 0u32;
    for (name, t) in entries {
        put_tensor(&mut body, name, t)?;
        count += 1;
    }
    let mut out = Vec::with_capacity(body.len() + 10);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&body);
    Ok(out)
}

/// Like [`encode_checkpoint`] but for mixed-precision entry lists.
pub fn encode_stored(entries: &[(String, StoredTensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        match t {
            StoredTensor::Single(t) => put_tensor(&mut out, name, t)?,
            StoredTensor::Double(t) => put_tensor(&mut out, name, t)?,
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format {
                offset: self.pos as u64,
                detail: format!("truncated while reading {what}: need {n} bytes, {} left", self.buf.len() - self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn elements<T: Scalar>(&mut self, shape: Vec<usize>) -> Result<Tensor<T>> {
        let n: usize = shape.iter().product();
        let width = T::PRECISION.byte_width();
        let offset = self.pos as u64;
        let bytes = self.take(n * width, "tensor elements")?;
        let data = bytes.chunks_exact(width).map(T::read_le).collect();
        Tensor::new(shape, data).map_err(|e| Error::Format {
            offset,
            detail: e.to_string(),
        })
    }
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<Vec<(String, StoredTensor)>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            detail: "bad magic, expected SALC".into(),
        });
    }
    let version = r.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format {
            offset: 4,
            detail: format!("unsupported checkpoint version {version}"),
        });
    }
    let count = r.u32("entry count")?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = r.u16("name length")? as usize;
        let name_at = r.pos as u64;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::Format {
                offset: name_at,
                detail: "entry name is not UTF-8".into(),
            })?
            .to_owned();
        let prec_at = r.pos as u64;
        let precision = Precision::from_code(r.u8("precision")?).ok_or_else(|| Error::Format {
            offset: prec_at,
            detail: "unknown precision code".into(),
        })?;
        let rank = r.u8("rank")? as usize;
        let shape = (0..rank)
            .map(|_| r.u32("extent").map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let t = match precision {
            Precision::Single => StoredTensor::Single(r.elements(shape)?),
            Precision::Double => StoredTensor::Double(r.elements(shape)?),
        };
        out.push((name, t));
    }
    if r.pos != buf.len() {
        return Err(Error::Format {
            offset: r.pos as u64,
            detail: format!("{} trailing bytes after last entry", buf.len() - r.pos),
        });
    }
    Ok(out)
}

pub fn write_checkpoint_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, StoredTensor)>> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_of_single_entry() {
        let t = Tensor::<f32>::from_f64([2], &[1.0, -2.0]).unwrap();
        let bytes = encode_checkpoint([("ab", &t)]).unwrap();
        let mut expected = b"SALC".to_vec();
        expected.extend_from_slice(&[1, 0, 1, 0, 0, 0, 2, 0, b'a', b'b', 0, 1, 2, 0, 0, 0]);
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn round_trip_mixed() {
        let a = Tensor::<f64>::from_fn([2, 3], |i| i as f64 * 0.5);
        let s = Tensor::<f64>::scalar(7.0);
        let bytes = encode_checkpoint([("a", &a), ("s", &s)]).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back[0], ("a".to_string(), StoredTensor::Double(a)));
        assert_eq!(back[1].1.shape(), &[] as &[usize]);
    }

    #[test]
    fn rejects_corruption() {
        let t = Tensor::<f32>::ones([4]);
        let bytes = encode_checkpoint([("x", &t)]).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).is_err());
        let err = decode_checkpoint(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
        let mut bad_version = bytes;
        bad_version[4] = 9;
        assert!(decode_checkpoint(&bad_version).is_err());
    }
}
