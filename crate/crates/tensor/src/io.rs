//! The AGT1 tensor container.
//!
//! Layout: magic `AGT1`, u8 dtype code (0 = f32, 1 = f64, 2 = i64), u8 rank
//! `r`, `r` little-endian u64 extents, then the raw little-endian payload.

use std::io::{Read, Write};

use crate::element::{DType, Element};
use crate::error::{Result, TensorError};
use crate::shape::numel;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"AGT1";

/// A decoded AGT1 record of any dtype.
#[derive(Debug, Clone, PartialEq)]
pub enum Record {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    I64 { shape: Vec<usize>, data: Vec<i64> },
}

impl Record {
    pub fn dtype(&self) -> DType {
        match self {
            Record::F32(_) => DType::F32,
            Record::F64(_) => DType::F64,
            Record::I64 { .. } => DType::I64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Record::F32(t) => t.shape(),
            Record::F64(t) => t.shape(),
            Record::I64 { shape, .. } => shape,
        }
    }
}

fn header(out: &mut Vec<u8>, dtype: DType, shape: &[usize]) -> Result<()> {
    let rank =
        u8::try_from(shape.len()).map_err(|_| TensorError::Format(format!("rank {} exceeds 255", shape.len())))?;
    out.extend_from_slice(MAGIC);
    out.push(dtype.code());
    out.push(rank);
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    Ok(())
}

/// Serialize a float tensor to AGT1 bytes.
pub fn encode<F: Element>(t: &Tensor<F>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(6 + 8 * t.rank() + t.numel() * F::DTYPE.size());
    header(&mut out, F::DTYPE, t.shape())?;
    for &v in t.data() {
        v.write_le(&mut out);
    }
    Ok(out)
}

pub fn encode_i64(shape: &[usize], data: &[i64]) -> Result<Vec<u8>> {
    if numel(shape) != data.len() {
        return Err(TensorError::Format(format!("shape {shape:?} does not hold {} values", data.len())));
    }
    let mut out = Vec::with_capacity(6 + 8 * shape.len() + 8 * data.len());
    header(&mut out, DType::I64, shape)?;
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn write<W: Write, F: Element>(w: &mut W, t: &Tensor<F>) -> Result<()> {
    w.write_all(&encode(t)?)?;
    Ok(())
}

/// Read one record from a stream positioned at its magic.
pub fn read_record<R: Read>(r: &mut R) -> Result<Record> {
    let mut head = [0u8; 6];
    r.read_exact(&mut head)?;
    if &head[..4] != MAGIC {
        return Err(TensorError::Format(format!("bad magic {:?}", &head[..4])));
    }
    let dtype =
        DType::from_code(head[4]).ok_or_else(|| TensorError::Format(format!("unknown dtype code {}", head[4])))?;
    let rank = head[5] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        let d =
            usize::try_from(u64::from_le_bytes(b)).map_err(|_| TensorError::Format("extent overflows usize".into()))?;
        shape.push(d);
    }
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n > 0 && n.checked_mul(dtype.size()).is_some())
        .ok_or_else(|| TensorError::Format(format!("invalid extents {shape:?}")))?;
    let mut payload = vec![0u8; count * dtype.size()];
    r.read_exact(&mut payload)?;
    let fmt = |e: TensorError| TensorError::Format(e.to_string());
    Ok(match dtype {
        DType::F32 => {
            Record::F32(Tensor::new(shape, payload.chunks_exact(4).map(f32::read_le).collect()).map_err(fmt)?)
        }
        DType::F64 => {
            Record::F64(Tensor::new(shape, payload.chunks_exact(8).map(f64::read_le).collect()).map_err(fmt)?)
        }
        DType::I64 => Record::I64 {
            data: payload.chunks_exact(8).map(|b| i64::from_le_bytes(b.try_into().unwrap())).collect(),
            shape,
        },
    })
}

/// Read a float tensor, requiring its stored dtype to be `F`.
pub fn read<R: Read, F: Element>(r: &mut R) -> Result<Tensor<F>> {
    let rec = read_record(r)?;
    let found = rec.dtype();
    let wrong = || TensorError::Format(format!("expected dtype {:?}, found {found:?}", F::DTYPE));
    // Route through the concrete record type without unsafe transmutes.
    match rec {
        Record::F32(t) if F::DTYPE == DType::F32 => Ok(t.cast()),
        Record::F64(t) if F::DTYPE == DType::F64 => Ok(t.cast()),
        _ => Err(wrong()),
    }
}

pub fn decode<F: Element>(bytes: &[u8]) -> Result<Tensor<F>> {
    let mut cur = bytes;
    let t = read(&mut cur)?;
    if !cur.is_empty() {
        return Err(TensorError::Format(format!("{} trailing bytes after record", cur.len())));
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let t = Tensor::<f32>::from_f64(vec![2, 1], &[1.0, -2.0]).unwrap();
        let b = encode(&t).unwrap();
        assert_eq!(&b[..4], b"AGT1");
        assert_eq!(b[4], 0);
        assert_eq!(b[5], 2);
        assert_eq!(&b[6..14], &2u64.to_le_bytes());
        assert_eq!(&b[14..22], &1u64.to_le_bytes());
        assert_eq!(&b[22..26], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 30);
    }

    #[test]
    fn rejects_bad_magic_and_dtype() {
        let t = Tensor::<f64>::ones(vec![3]);
        let mut b = encode(&t).unwrap();
        assert!(decode::<f32>(&b).is_err());
        b[0] = b'X';
        assert!(decode::<f64>(&b).is_err());
    }

    #[test]
    fn i64_records() {
        let b = encode_i64(&[3], &[0, -1, 7]).unwrap();
        let rec = read_record(&mut b.as_slice()).unwrap();
        assert_eq!(rec, Record::I64 { shape: vec![3], data: vec![0, -1, 7] });
    }

    #[test]
    fn truncated_payload_is_error() {
        let b = encode(&Tensor::<f32>::ones(vec![4])).unwrap();
        assert!(decode::<f32>(&b[..b.len() - 1]).is_err());
    }
}
