use std::path::Path;

use super::Tensor;
use crate::error::{HoiError, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"HOIT";
pub const FORMAT_VERSION: u8 = 1;

/// A decoded tensor whose element type is only known at runtime.
#[derive(Debug, Clone, PartialEq)]
pub enum DynTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl DynTensor {
    pub fn dims(&self) -> &[usize] {
        match self {
            DynTensor::F32(t) => t.dims(),
            DynTensor::F64(t) => t.dims(),
        }
    }

    /// Convert to `T`, casting if the stored dtype differs.
    pub fn into_scalar<T: Scalar>(self) -> Tensor<T> {
        match self {
            DynTensor::F32(t) => t.cast(),
            DynTensor::F64(t) => t.cast(),
        }
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn to_hoit_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(7 + 4 * self.rank() + self.len() * T::BYTES);
        out.extend_from_slice(MAGIC);
        out.push(FORMAT_VERSION);
        out.push(T::DTYPE);
        out.push(self.rank() as u8);
        for &d in self.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in self.data() {
            v.write_le(&mut out);
        }
        out
    }

    /// Decode bytes of exactly this dtype.
    pub fn from_hoit_bytes(bytes: &[u8]) -> Result<Self> {
        let (dtype, dims, payload) = parse_header(bytes)?;
        if dtype != T::DTYPE {
            return Err(HoiError::Format(format!(
                "dtype {dtype} does not match requested dtype {}",
                T::DTYPE
            )));
        }
        decode_payload(dims, payload)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_hoit_bytes()).map_err(|e| HoiError::io(path, e))
    }

    /// Load a tensor file of either dtype, casting to `T`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(DynTensor::load(path)?.into_scalar())
    }
}

impl DynTensor {
    pub fn from_hoit_bytes(bytes: &[u8]) -> Result<Self> {
        let (dtype, dims, payload) = parse_header(bytes)?;
        match dtype {
            0 => decode_payload(dims, payload).map(DynTensor::F32),
            1 => decode_payload(dims, payload).map(DynTensor::F64),
            _ => unreachable!("dtype validated in header"),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| HoiError::io(path, e))?;
        Self::from_hoit_bytes(&bytes).map_err(|e| match e {
            HoiError::Format(m) => HoiError::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

fn parse_header(bytes: &[u8]) -> Result<(u8, Vec<usize>, &[u8])> {
    if bytes.len() < 7 {
        return Err(HoiError::Format("file shorter than header".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(HoiError::Format("bad magic, expected \"HOIT\"".into()));
    }
    if bytes[4] != FORMAT_VERSION {
        return Err(HoiError::Format(format!(
            "unsupported version {}",
            bytes[4]
        )));
    }
    let dtype = bytes[5];
    if dtype > 1 {
        return Err(HoiError::Format(format!("unknown dtype {dtype}")));
    }
    let rank = bytes[6] as usize;
    if rank == 0 {
        return Err(HoiError::Format("rank 0".into()));
    }
    let header_len = 7 + 4 * rank;
    if bytes.len() < header_len {
        return Err(HoiError::Format("truncated extents".into()));
    }
    let dims: Vec<usize> = bytes[7..header_len]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    Ok((dtype, dims, &bytes[header_len..]))
}

fn decode_payload<T: Scalar>(dims: Vec<usize>, payload: &[u8]) -> Result<Tensor<T>> {
    if dims.iter().any(|&d| d == 0) {
        return Err(HoiError::InvalidDims(dims));
    }
    let n: usize = dims.iter().product();
    let expected = n * T::BYTES;
    if payload.len() < expected {
        return Err(HoiError::Truncated {
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(HoiError::Format(format!(
            "{} trailing bytes after payload",
            payload.len() - expected
        )));
    }
    let data = payload.chunks_exact(T::BYTES).map(T::read_le).collect();
    Tensor::new(dims, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::<f32>::new(vec![1, 2], vec![1.0, -2.5]).unwrap();
        let b = t.to_hoit_bytes();
        assert_eq!(&b[..4], b"HOIT");
        assert_eq!(b[4], 1);
        assert_eq!(b[5], 0);
        assert_eq!(b[6], 2);
        assert_eq!(&b[7..11], &1u32.to_le_bytes());
        assert_eq!(&b[11..15], &2u32.to_le_bytes());
        assert_eq!(&b[15..19], &1.0f32.to_le_bytes());
        assert_eq!(&b[19..23], &(-2.5f32).to_le_bytes());
        assert_eq!(b.len(), 23);
    }

    #[test]
    fn truncated_payload_is_reported() {
        let t = Tensor::<f64>::zeros(vec![3, 3]).unwrap();
        let b = t.to_hoit_bytes();
        let err = Tensor::<f64>::from_hoit_bytes(&b[..b.len() - 3]).unwrap_err();
        assert!(matches!(err, HoiError::Truncated { .. }));
        assert!(err.to_string().contains("truncated payload"));
    }

    #[test]
    fn bad_magic_and_version() {
        let mut b = Tensor::<f32>::zeros(vec![2]).unwrap().to_hoit_bytes();
        b[4] = 2;
        assert!(matches!(
            DynTensor::from_hoit_bytes(&b),
            Err(HoiError::Format(_))
        ));
        b[4] = 1;
        b[0] = b'X';
        assert!(matches!(
            DynTensor::from_hoit_bytes(&b),
            Err(HoiError::Format(_))
        ));
    }

    #[test]
    fn dtype_mismatch_is_strict_but_dyn_casts() {
        let t = Tensor::<f64>::new(vec![2], vec![0.5, 1.5]).unwrap();
        let b = t.to_hoit_bytes();
        assert!(Tensor::<f32>::from_hoit_bytes(&b).is_err());
        let cast: Tensor<f32> = DynTensor::from_hoit_bytes(&b).unwrap().into_scalar();
        assert_eq!(cast.data(), &[0.5f32, 1.5]);
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_identical(
            dims in proptest::collection::vec(1usize..5, 1..4),
            seed in any::<u64>(),
        ) {
            let n: usize = dims.iter().product();
            let mut s = seed;
            let data: Vec<f64> = (0..n).map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                f64::from_bits(s >> 2)
            }).collect();
            let t = Tensor::new(dims, data).unwrap();
            let back = Tensor::<f64>::from_hoit_bytes(&t.to_hoit_bytes()).unwrap();
            prop_assert_eq!(back.dims(), t.dims());
            for (a, b) in back.data().iter().zip(t.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
