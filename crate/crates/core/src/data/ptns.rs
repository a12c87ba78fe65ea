//! PTNS: a little-endian tensor container.
//!
//! ```text
//! "PTNS" | version u16 | dtype u8 | ndim u8 | dims u32 × ndim | payload | crc32(payload) u32
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::DataError;
use crate::nn::Tensor;

const MAGIC: &[u8; 4] = b"PTNS";
const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
    /// Class labels.
    U16 = 2,
}

impl Dtype {
    fn from_byte(b: u8) -> Result<Self, DataError> {
        match b {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            2 => Ok(Dtype::U16),
            other => Err(DataError::UnknownDtype(other)),
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
            Dtype::U16 => 2,
        }
    }
}

/// Serialises `tensor` as `dtype`. `F32` rounds; `U16` requires integral
/// values in range.
pub fn encode(tensor: &Tensor, dtype: Dtype) -> Result<Vec<u8>, DataError> {
    let shape = tensor.shape();
    if shape.len() > u8::MAX as usize {
        return Err(DataError::ValueOutOfRange(format!("{} dimensions", shape.len())));
    }
    let mut out = Vec::with_capacity(12 + 4 * shape.len() + tensor.len() * dtype.width());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(dtype as u8);
    out.push(shape.len() as u8);
    for &d in shape {
        let d = u32::try_from(d).map_err(|_| DataError::ValueOutOfRange(format!("dimension {d}")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    let start = out.len();
    for &v in tensor.data() {
        match dtype {
            Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
            Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            Dtype::U16 => {
                if v.fract() != 0.0 || !(0.0..=u16::MAX as f64).contains(&v) {
                    return Err(DataError::ValueOutOfRange(format!("{v} is not a u16 label")));
                }
                out.extend_from_slice(&(v as u16).to_le_bytes());
            }
        }
    }
    let crc = crc32fast::hash(&out[start..]);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        let end = self.pos.checked_add(n).ok_or(DataError::TruncatedFile)?;
        let out = self.bytes.get(self.pos..end).ok_or(DataError::TruncatedFile)?;
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(Dtype, Tensor), DataError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(DataError::BadMagic);
    }
    let version = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes"));
    if version != VERSION {
        return Err(DataError::VersionUnsupported(version));
    }
    let dtype = Dtype::from_byte(r.take(1)?[0])?;
    let ndim = r.take(1)?[0] as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(r.u32()? as usize);
    }
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or(DataError::TruncatedFile)?;
    let payload_len = count.checked_mul(dtype.width()).ok_or(DataError::TruncatedFile)?;
    let payload = r.take(payload_len)?;
    let stored = r.u32()?;
    if r.pos != bytes.len() {
        return Err(DataError::TrailingBytes(bytes.len() - r.pos));
    }
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(DataError::CrcMismatch { stored, computed });
    }
    let data: Vec<f64> = match dtype {
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        Dtype::U16 => payload
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes(c.try_into().expect("2 bytes")) as f64)
            .collect(),
    };
    Ok((dtype, Tensor::new(shape, data)?))
}

pub fn save_tensor_as(path: &Path, tensor: &Tensor, dtype: Dtype) -> Result<(), DataError> {
    fs::write(path, encode(tensor, dtype)?).map_err(|e| DataError::io(path, e))
}

/// Writes full-precision `f64`.
pub fn save_tensor(path: &Path, tensor: &Tensor) -> Result<(), DataError> {
    save_tensor_as(path, tensor, Dtype::F64)
}

/// Reads any dtype, widening to `f64`.
pub fn load_tensor(path: &Path) -> Result<Tensor, DataError> {
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    Ok(decode(&bytes)?.1)
}

pub fn save_labels(path: &Path, labels: &[usize]) -> Result<(), DataError> {
    let t = Tensor::new(vec![labels.len()], labels.iter().map(|&y| y as f64).collect())?;
    save_tensor_as(path, &t, Dtype::U16)
}

pub fn load_labels(path: &Path) -> Result<Vec<usize>, DataError> {
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    match decode(&bytes)? {
        (Dtype::U16, t) if t.shape().len() == 1 => Ok(t.data().iter().map(|&v| v as usize).collect()),
        (dtype, t) => Err(DataError::ValueOutOfRange(format!(
            "expected a 1-D u16 label file, got {dtype:?} with shape {:?}",
            t.shape()
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn scalar_round_trip() {
        let t = Tensor::scalar(-3.25);
        let bytes = encode(&t, Dtype::F64).unwrap();
        assert_eq!(bytes.len(), 4 + 2 + 1 + 1 + 8 + 4);
        assert_eq!(decode(&bytes).unwrap(), (Dtype::F64, t));
    }

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = encode(&t, Dtype::F64).unwrap();
        assert_eq!(&b[..4], b"PTNS");
        assert_eq!(&b[4..6], &[1, 0]);
        assert_eq!(b[6], 1);
        assert_eq!(b[7], 2);
        assert_eq!(&b[8..16], &[2, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(&b[16..24], &1.0f64.to_le_bytes());
        let crc = crc32fast::hash(&b[16..64]);
        assert_eq!(&b[64..], &crc.to_le_bytes());
    }

    #[test]
    fn corrupt_payload_detected() {
        let t = Tensor::new(vec![2, 3], (0..6).map(|i| i as f64 * 0.1).collect()).unwrap();
        let mut b = encode(&t, Dtype::F64).unwrap();
        b[20] ^= 0x01;
        assert!(matches!(decode(&b), Err(DataError::CrcMismatch { .. })));
    }

    #[test]
    fn header_errors() {
        let b = encode(&Tensor::zeros(&[3]), Dtype::F32).unwrap();
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(DataError::BadMagic)));
        let mut bad = b.clone();
        bad[4] = 2;
        assert!(matches!(decode(&bad), Err(DataError::VersionUnsupported(2))));
        let mut bad = b.clone();
        bad[6] = 9;
        assert!(matches!(decode(&bad), Err(DataError::UnknownDtype(9))));
        for cut in [0, 3, 7, 10, b.len() - 1] {
            assert!(matches!(decode(&b[..cut]), Err(DataError::TruncatedFile)), "cut {cut}");
        }
        let mut long = b;
        long.push(0);
        assert!(matches!(decode(&long), Err(DataError::TrailingBytes(1))));
    }

    #[test]
    fn labels_round_trip_and_reject_fractions() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("labels.ptns");
        save_labels(&p, &[0, 9, 65535, 3]).unwrap();
        assert_eq!(load_labels(&p).unwrap(), vec![0, 9, 65535, 3]);
        assert!(encode(&Tensor::from_vec(vec![0.5]), Dtype::U16).is_err());
        assert!(encode(&Tensor::from_vec(vec![70000.0]), Dtype::U16).is_err());
        let q = dir.path().join("x.ptns");
        save_tensor(&q, &Tensor::zeros(&[2, 2])).unwrap();
        assert!(load_labels(&q).is_err());
    }

    proptest! {
        #[test]
        fn f64_round_trip_is_bitwise(
            shape in prop::collection::vec(1usize..5, 0..4),
            seed: u64,
        ) {
            use rand::{Rng, SeedableRng};
            let n: usize = shape.iter().product();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f64> = (0..n).map(|_| f64::from_bits(rng.random::<u64>() & !(0x7ff << 52) | (0x3ff << 52))).collect();
            let t = Tensor::new(shape, data).unwrap();
            let (dtype, back) = decode(&encode(&t, Dtype::F64).unwrap()).unwrap();
            prop_assert_eq!(dtype, Dtype::F64);
            prop_assert_eq!(back.shape(), t.shape());
            for (a, b) in back.data().iter().zip(t.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }

        #[test]
        fn f32_values_round_trip(values in prop::collection::vec(-1e6f32..1e6, 1..40)) {
            let t = Tensor::from_vec(values.iter().map(|&v| v as f64).collect());
            let (_, back) = decode(&encode(&t, Dtype::F32).unwrap()).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
