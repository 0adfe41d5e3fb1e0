//! SKCN parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SKCN" | version u32 = 1 | tensor_count u32
//! per tensor: name_len u16 | name (UTF-8) | group u8 | ndim u8 | dims u32 × ndim
//!             | dtype u8 (0 = f32) | values f32 × numel, row-major
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::param::{Group, ParamStore, Parameter};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SKCN";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub group: Group,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<Entry>,
}

impl Checkpoint {
    pub fn from_params<'a, T: Scalar>(params: impl IntoIterator<Item = &'a Parameter<T>>) -> Self {
        let entries = params
            .into_iter()
            .map(|p| Entry {
                name: p.name.clone(),
                group: p.group,
                shape: p.tensor.shape().to_vec(),
                data: p.tensor.data().iter().map(|v| v.to_f32_lossy()).collect(),
            })
            .collect();
        Self { entries }
    }

    pub fn from_store<T: Scalar>(store: &ParamStore<T>) -> Self {
        Self::from_params(store.iter())
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&u32::try_from(self.entries.len()).map_err(too_big)?.to_le_bytes());
        for e in &self.entries {
            let name = e.name.as_bytes();
            out.extend_from_slice(&u16::try_from(name.len()).map_err(too_big)?.to_le_bytes());
            out.extend_from_slice(name);
            out.push(e.group.code());
            out.push(u8::try_from(e.shape.len()).map_err(too_big)?);
            for &d in &e.shape {
                out.extend_from_slice(&u32::try_from(d).map_err(too_big)?.to_le_bytes());
            }
            out.push(DTYPE_F32);
            for &v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic, not an SKCN file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_owned();
            let code = r.u8()?;
            let group = Group::from_code(code)
                .ok_or_else(|| Error::Checkpoint(format!("{name}: unknown group code {code}")))?;
            let ndim = r.u8()? as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let dtype = r.u8()?;
            if dtype != DTYPE_F32 {
                return Err(Error::Checkpoint(format!("{name}: unsupported dtype {dtype}")));
            }
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflow")))?;
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            entries.push(Entry { name, group, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Overwrites every store parameter from the entry of the same name.
    /// Every parameter must be present with identical shape.
    pub fn restore_into<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        for p in store.iter_mut() {
            let e = self
                .get(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {}", p.name)))?;
            e.write_into(&mut p.tensor)?;
        }
        Ok(())
    }
}

impl Entry {
    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        Tensor::new(self.shape.clone(), self.data.iter().map(|&v| T::lit(v as f64)).collect())
    }

    pub(crate) fn write_into<T: Scalar>(&self, target: &mut Tensor<T>) -> Result<()> {
        if target.shape() != self.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "tensor {}: checkpoint shape {:?} does not match model shape {:?}",
                self.name,
                self.shape,
                target.shape()
            )));
        }
        for (dst, &v) in target.data_mut().iter_mut().zip(&self.data) {
            *dst = T::lit(v as f64);
        }
        Ok(())
    }
}

fn too_big<E>(_: E) -> Error {
    Error::Checkpoint("value exceeds field width".into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
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

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn byte_layout_is_exact() {
        let ck = Checkpoint {
            entries: vec![Entry {
                name: "ab".into(),
                group: Group::Head,
                shape: vec![2],
                data: vec![1.0, -2.5],
            }],
        };
        let bytes = ck.to_bytes().unwrap();
        let mut want = b"SKCN".to_vec();
        want.extend_from_slice(&[1, 0, 0, 0, 1, 0, 0, 0, 2, 0, b'a', b'b', 3, 1, 2, 0, 0, 0, 0]);
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        assert!(Checkpoint::from_bytes(b"NOPE\x01\0\0\0\0\0\0\0").is_err());
        assert!(Checkpoint::from_bytes(b"SKCN\x02\0\0\0\0\0\0\0").is_err());
        assert!(Checkpoint::from_bytes(b"SKCN\x01\0\0\0\x01\0\0\0").is_err());
        let ok = Checkpoint::default().to_bytes().unwrap();
        let mut extra = ok.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&ok).is_ok());
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }

    #[test]
    fn restore_requires_matching_shapes() {
        let mut store = ParamStore::<f32>::new();
        store.add("w", Tensor::zeros(vec![2, 2]), Group::Seg).unwrap();
        let bad = Checkpoint {
            entries: vec![Entry { name: "w".into(), group: Group::Seg, shape: vec![4], data: vec![0.0; 4] }],
        };
        let err = bad.restore_into(&mut store).unwrap_err().to_string();
        assert!(err.contains('w') && err.contains("[4]"), "{err}");
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            values in proptest::collection::vec(any::<f32>(), 1..40),
            code in 0u8..4,
            name in "[a-z_.0-9]{1,20}",
        ) {
            let ck = Checkpoint {
                entries: vec![Entry {
                    name,
                    group: Group::from_code(code).unwrap(),
                    shape: vec![values.len()],
                    data: values,
                }],
            };
            let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
            prop_assert_eq!(back.entries.len(), 1);
            let (a, b) = (&ck.entries[0], &back.entries[0]);
            prop_assert_eq!(&a.name, &b.name);
            prop_assert_eq!(a.group, b.group);
            prop_assert_eq!(&a.shape, &b.shape);
            let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&a.data), bits(&b.data));
        }
    }
}
