//! Binary parameter checkpoint.
//!
//! ```text
//! magic  "DTGI"
//! u32    version (1)
//! u32    entry count
//! entry: u16 name length, name bytes (UTF-8), u8 dtype (0 = f32, 1 = f64),
//!        u8 rank, u32 extents[rank], payload (little-endian)
//! ```
//! All integers are little-endian.

use std::path::Path;

use crate::error::{Error, Result};

use super::{DType, ParamStore, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"DTGI";
pub const VERSION: u32 = 1;

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

    /// Converts to the requested precision.
    pub fn to<T: Scalar>(&self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

pub trait IntoAny: Scalar {
    fn into_any(t: Tensor<Self>) -> AnyTensor;
}

impl IntoAny for f32 {
    fn into_any(t: Tensor<f32>) -> AnyTensor {
        AnyTensor::F32(t)
    }
}

impl IntoAny for f64 {
    fn into_any(t: Tensor<f64>) -> AnyTensor {
        AnyTensor::F64(t)
    }
}

/// Ordered list of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, AnyTensor)>,
}

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(fmt_err(format!("truncated checkpoint at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push<T: IntoAny>(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.entries.push((name.into(), T::into_any(t)));
    }

    pub fn from_store<T: IntoAny>(store: &ParamStore<T>) -> Self {
        let mut ck = Checkpoint::new();
        for (k, v) in store.iter() {
            ck.push(k, v.clone());
        }
        ck
    }

    pub fn get(&self, name: &str) -> Option<&AnyTensor> {
        self.entries.iter().find(|(k, _)| k == name).map(|(_, v)| v)
    }

    /// Entries whose name starts with `prefix`, converted to `T`.
    pub fn with_prefix<T: Scalar>(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        self.entries
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), v.to()))
            .collect()
    }

    /// Overwrites every parameter of `store` from this checkpoint.
    pub fn load_into<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        let names: Vec<String> = store.names().map(String::from).collect();
        for name in names {
            let t = self.get(&name).ok_or_else(|| Error::Lookup(name.clone()))?;
            store.replace(&name, t.to())?;
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let (dtype, shape) = match t {
                AnyTensor::F32(t) => (DType::F32, t.shape()),
                AnyTensor::F64(t) => (DType::F64, t.shape()),
            };
            out.push(dtype as u8);
            out.push(shape.len() as u8);
            for &e in shape {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            match t {
                AnyTensor::F32(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
                AnyTensor::F64(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
            }
        }
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(fmt_err("bad checkpoint magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(fmt_err(format!("unsupported checkpoint version {version}")));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| fmt_err("entry name is not UTF-8"))?
                .to_string();
            let dtype = DType::from_code(r.u8()?).ok_or_else(|| fmt_err(format!("unknown dtype in `{name}`")))?;
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let bytes = r.take(n * dtype.size())?;
            let t = match dtype {
                DType::F32 => AnyTensor::F32(Tensor::new(shape, bytes.chunks_exact(4).map(f32::read_le).collect())?),
                DType::F64 => AnyTensor::F64(Tensor::new(shape, bytes.chunks_exact(8).map(f64::read_le).collect())?),
            };
            entries.push((name, t));
        }
        if r.pos != buf.len() {
            return Err(fmt_err("trailing bytes after checkpoint"));
        }
        Ok(Checkpoint { entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            vals32 in proptest::collection::vec(any::<f32>(), 1..40),
            vals64 in proptest::collection::vec(any::<f64>(), 1..40),
            name in "[a-z.]{1,20}",
        ) {
            let mut ck = Checkpoint::new();
            let n32 = vals32.len();
            ck.push(name.clone(), Tensor::new(vec![n32], vals32.clone()).unwrap());
            ck.push(format!("{name}.x"), Tensor::new(vec![1, vals64.len()], vals64.clone()).unwrap());
            let bytes = ck.encode();
            let back = Checkpoint::decode(&bytes).unwrap();
            prop_assert_eq!(back.encode(), bytes);
            match &back.entries[0].1 {
                AnyTensor::F32(t) => {
                    let same = t.data().iter().zip(&vals32).all(|(a, b)| a.to_bits() == b.to_bits());
                    prop_assert!(same);
                }
                _ => prop_assert!(false),
            }
        }
    }

    #[test]
    fn header_layout() {
        let mut ck = Checkpoint::new();
        ck.push("ab", Tensor::new(vec![2], vec![1.0f32, 2.0]).unwrap());
        let b = ck.encode();
        assert_eq!(&b[..4], b"DTGI");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 1);
        assert_eq!(u16::from_le_bytes(b[12..14].try_into().unwrap()), 2);
        assert_eq!(&b[14..16], b"ab");
        assert_eq!(b[16], 0);
        assert_eq!(b[17], 1);
        assert_eq!(u32::from_le_bytes(b[18..22].try_into().unwrap()), 2);
        assert_eq!(f32::from_le_bytes(b[22..26].try_into().unwrap()), 1.0);
        assert_eq!(b.len(), 30);
    }

    #[test]
    fn rejects_garbage() {
        assert!(Checkpoint::decode(b"NOPE").is_err());
        let mut b = Checkpoint::new().encode();
        b.push(0);
        assert!(Checkpoint::decode(&b).is_err());
    }
}
