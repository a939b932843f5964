//! Tensor blob encoding shared by checkpoints and dataset feature files.
//!
//! ```text
//! u64 LE   header length H
//! H bytes  UTF-8 JSON {"dtype": "f32"|"f64", "shape": [...], "name": "..."}
//! N bytes  elements, little-endian IEEE-754, row-major (N = product(shape) * width)
//! ```

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{Dtype, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobHeader {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub name: String,
}

/// Failure while decoding a blob stream. Callers attach the file path.
#[derive(Debug, thiserror::Error)]
pub enum BlobError {
    #[error("truncated blob: {0}")]
    Truncated(String),
    #[error("bad blob header: {0}")]
    Header(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Header length cap; a corrupt length should fail fast instead of allocating.
const MAX_HEADER: u64 = 1 << 20;

pub fn write_blob<T: Scalar, W: Write>(w: &mut W, name: &str, t: &Tensor<T>) -> std::io::Result<()> {
    let header = BlobHeader {
        dtype: T::DTYPE,
        shape: t.shape().to_vec(),
        name: name.to_string(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    let mut bytes = Vec::with_capacity(t.len() * T::DTYPE.size_of());
    for &v in t.data() {
        v.write_le(&mut bytes);
    }
    w.write_all(&bytes)
}

fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<(), BlobError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            BlobError::Truncated(what.to_string())
        } else {
            BlobError::Io(e)
        }
    })
}

/// Reads one blob, converting to `T` when the stored dtype differs.
/// Returns `Ok(None)` on a clean end of stream.
pub fn read_blob<T: Scalar, R: Read>(r: &mut R) -> Result<Option<(String, Tensor<T>)>, BlobError> {
    let mut len = [0u8; 8];
    let mut got = 0;
    while got < 8 {
        let n = r.read(&mut len[got..])?;
        if n == 0 {
            break;
        }
        got += n;
    }
    if got == 0 {
        return Ok(None);
    }
    if got < 8 {
        return Err(BlobError::Truncated("header length".into()));
    }
    let hlen = u64::from_le_bytes(len);
    if hlen > MAX_HEADER {
        return Err(BlobError::Header(format!("header length {hlen} too large")));
    }
    let mut hbuf = vec![0u8; hlen as usize];
    read_exact_or(r, &mut hbuf, "header")?;
    let header: BlobHeader =
        serde_json::from_slice(&hbuf).map_err(|e| BlobError::Header(e.to_string()))?;
    let count: usize = header.shape.iter().product();
    let width = header.dtype.size_of();
    let mut data = vec![0u8; count * width];
    read_exact_or(r, &mut data, &format!("payload of `{}`", header.name))?;
    let tensor = match header.dtype {
        d if d == T::DTYPE => decode::<T>(&header.shape, &data, width),
        Dtype::F32 => decode::<f32>(&header.shape, &data, width).cast(),
        Dtype::F64 => decode::<f64>(&header.shape, &data, width).cast(),
    };
    Ok(Some((header.name, tensor)))
}

fn decode<T: Scalar>(shape: &[usize], bytes: &[u8], width: usize) -> Tensor<T> {
    let data = bytes.chunks_exact(width).map(T::read_le).collect();
    Tensor::new(shape.to_vec(), data).expect("length checked against header")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise() {
        let t = Tensor::<f64>::new(vec![2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5]).unwrap();
        let mut buf = Vec::new();
        write_blob(&mut buf, "w", &t).unwrap();
        let (name, back) = read_blob::<f64, _>(&mut buf.as_slice()).unwrap().unwrap();
        assert_eq!(name, "w");
        assert!(back.bitwise_eq(&t));
    }

    #[test]
    fn truncated_payload_is_reported() {
        let t = Tensor::<f32>::from_vec(vec![1.0, 2.0, 3.0]);
        let mut buf = Vec::new();
        write_blob(&mut buf, "x", &t).unwrap();
        buf.truncate(buf.len() - 2);
        let err = read_blob::<f32, _>(&mut buf.as_slice()).unwrap_err();
        assert!(matches!(err, BlobError::Truncated(_)));
    }

    #[test]
    fn empty_stream_is_end() {
        assert!(read_blob::<f32, _>(&mut [].as_slice()).unwrap().is_none());
    }

    #[test]
    fn header_is_json() {
        let mut buf = Vec::new();
        write_blob(&mut buf, "s", &Tensor::scalar(1.0f32)).unwrap();
        let hlen = u64::from_le_bytes(buf[..8].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&buf[8..8 + hlen]).unwrap();
        assert_eq!(header["dtype"], "f32");
        assert_eq!(header["name"], "s");
        assert_eq!(buf.len(), 8 + hlen + 4);
    }
}
