//! `QMTN` tensor container: magic, u8 dtype code, u8 rank, u32 extents, raw
//! row-major payload, all little-endian.

use super::tensor::{DType, Scalar, Tensor};
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"QMTN";

pub fn encode_tensor<T: Scalar>(t: &Tensor<T>, out: &mut Vec<u8>) {
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(T::DTYPE.code());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

pub fn encoded_len<T: Scalar>(t: &Tensor<T>) -> usize {
    4 + 2 + 4 * t.rank() + T::DTYPE.size() * t.len()
}

/// Cursor over a byte slice with format-error reporting on truncation.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn position(&self) -> usize {
        self.pos
    }

    pub(crate) fn is_at_end(&self) -> bool {
        self.pos == self.buf.len()
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!(
                "truncated payload: needed {n} bytes at offset {}, {} left",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub(crate) fn read_shape(r: &mut Reader<'_>) -> Result<Vec<usize>> {
    let rank = r.u8()? as usize;
    if rank == 0 {
        return Err(Error::Format("rank 0 tensor".into()));
    }
    let shape: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
    if shape.contains(&0) {
        return Err(Error::Format(format!("zero extent in shape {shape:?}")));
    }
    Ok(shape)
}

pub(crate) fn read_payload<T: Scalar>(r: &mut Reader<'_>, shape: &[usize], dtype: DType) -> Result<Tensor<T>> {
    let n: usize = shape.iter().product();
    let bytes = r.take(n * dtype.size())?;
    let data: Vec<T> = match dtype {
        DType::F32 => bytes
            .chunks_exact(4)
            .map(|c| T::from_f64(f32::read_le(c) as f64))
            .collect(),
        DType::F64 => bytes.chunks_exact(8).map(|c| T::from_f64(f64::read_le(c))).collect(),
    };
    Tensor::new(shape, data)
}

pub(crate) fn read_tensor<T: Scalar>(r: &mut Reader<'_>) -> Result<Tensor<T>> {
    let magic = r.take(4)?;
    if magic != TENSOR_MAGIC {
        return Err(Error::Format(format!("bad tensor magic {magic:?}")));
    }
    let code = r.u8()?;
    let dtype = DType::from_code(code)
        .ok_or_else(|| Error::Format(format!("unknown dtype code {code}")))?;
    let shape = read_shape(r)?;
    read_payload(r, &shape, dtype)
}

/// Decodes one tensor occupying the whole buffer. The stored dtype is
/// converted to `T` if they differ.
pub fn decode_tensor<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let mut r = Reader::new(bytes);
    let t = read_tensor(&mut r)?;
    if !r.is_at_end() {
        return Err(Error::Format(format!(
            "{} trailing bytes after tensor",
            bytes.len() - r.position()
        )));
    }
    Ok(t)
}

/// Decodes the tensor starting at `offset`.
pub fn decode_tensor_at<T: Scalar>(bytes: &[u8], offset: usize) -> Result<Tensor<T>> {
    let tail = bytes
        .get(offset..)
        .ok_or_else(|| Error::Format(format!("offset {offset} past end")))?;
    read_tensor(&mut Reader::new(tail))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::<f32>::new(&[2, 1], vec![1.0, -2.0]).unwrap();
        let mut buf = Vec::new();
        encode_tensor(&t, &mut buf);
        assert_eq!(&buf[..4], b"QMTN");
        assert_eq!(buf[4], 0);
        assert_eq!(buf[5], 2);
        assert_eq!(&buf[6..10], &2u32.to_le_bytes());
        assert_eq!(&buf[10..14], &1u32.to_le_bytes());
        assert_eq!(&buf[14..18], &1.0f32.to_le_bytes());
        assert_eq!(buf.len(), encoded_len(&t));
        assert!(decode_tensor::<f32>(&buf).unwrap().bit_eq(&t));
    }

    #[test]
    fn f64_roundtrip_and_errors() {
        let t = Tensor::<f64>::from_f64(&[3], &[0.1, 1e-300, -7.5]).unwrap();
        let mut buf = Vec::new();
        encode_tensor(&t, &mut buf);
        assert_eq!(buf[4], 1);
        assert!(decode_tensor::<f64>(&buf).unwrap().bit_eq(&t));
        assert!(matches!(decode_tensor::<f64>(&buf[..buf.len() - 1]), Err(Error::Format(_))));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(decode_tensor::<f64>(&bad), Err(Error::Format(_))));
        assert!(decode_tensor::<f64>(&[]).is_err());
    }
}
