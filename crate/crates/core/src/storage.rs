//! Binary tensor container shared by datasets, checkpoints and filter banks.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "GWGNTNSR"
//! version    u32
//! n_meta     u32, then n_meta x (key: str, value: str)
//! n_tensors  u32, then n_tensors x
//!              name: str, dtype: u8 (1 = f32, 2 = f64), ndim: u32,
//!              dims: ndim x u64, payload_len: u64, payload
//! end        4 bytes  "END!"
//! ```
//!
//! where `str` is a `u32` byte length followed by UTF-8 bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"GWGNTNSR";
pub const END: &[u8; 4] = b"END!";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub dtype: u8,
    pub shape: Vec<usize>,
    pub payload: Vec<u8>,
}

impl StoredTensor {
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        let mut payload = Vec::with_capacity(t.len() * T::BYTES);
        for &v in t.data() {
            v.write_le(&mut payload);
        }
        StoredTensor {
            dtype: T::DTYPE,
            shape: t.shape().to_vec(),
            payload,
        }
    }

    /// Decodes the payload; the stored dtype must match `T`.
    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        if self.dtype != T::DTYPE {
            return Err(Error::ShapeMismatch {
                expected: format!("dtype {}", T::DTYPE),
                found: format!("dtype {}", self.dtype),
            });
        }
        let data = self
            .payload
            .chunks_exact(T::BYTES)
            .map(T::read_le)
            .collect();
        Tensor::new(self.shape.clone(), data)
    }

    /// Decodes the payload, converting between float widths if needed.
    pub fn to_tensor_cast<T: Scalar>(&self) -> Result<Tensor<T>> {
        match self.dtype {
            d if d == T::DTYPE => self.to_tensor(),
            1 => Ok(self.to_tensor::<f32>()?.cast()),
            2 => Ok(self.to_tensor::<f64>()?.cast()),
            d => Err(Error::CorruptHeader(format!("unknown dtype {d}"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, StoredTensor)>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl Into<String>) {
        let key = key.into();
        let value = value.into();
        match self.meta.iter_mut().find(|(k, _)| *k == key) {
            Some(slot) => slot.1 = value,
            None => self.meta.push((key, value)),
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require_meta(&self, key: &str) -> Result<&str> {
        self.meta(key)
            .ok_or_else(|| Error::CorruptHeader(format!("missing metadata `{key}`")))
    }

    pub fn put<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.tensors
            .push((name.into(), StoredTensor::from_tensor(t)));
    }

    pub fn get(&self, name: &str) -> Option<&StoredTensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&StoredTensor> {
        self.get(name)
            .ok_or_else(|| Error::CorruptHeader(format!("missing tensor `{name}`")))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.meta.len() as u32).to_le_bytes())?;
        for (k, v) in &self.meta {
            write_str(&mut w, k)?;
            write_str(&mut w, v)?;
        }
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            write_str(&mut w, name)?;
            w.write_all(&[t.dtype])?;
            w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
            for &d in &t.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            w.write_all(&(t.payload.len() as u64).to_le_bytes())?;
            for chunk in t.payload.chunks(1 << 20) {
                w.write_all(chunk)?;
            }
        }
        w.write_all(END)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(Error::CorruptHeader("bad magic".into()));
        }
        let version = read_u32(&mut r, "version")?;
        if version != VERSION {
            return Err(Error::VersionMismatch {
                expected: VERSION,
                found: version,
            });
        }
        let n_meta = read_u32(&mut r, "metadata count")?;
        let mut meta = Vec::with_capacity(n_meta.min(1024) as usize);
        for _ in 0..n_meta {
            let k = read_str(&mut r)?;
            let v = read_str(&mut r)?;
            meta.push((k, v));
        }
        let n_tensors = read_u32(&mut r, "tensor count")?;
        let mut tensors = Vec::new();
        for _ in 0..n_tensors {
            let name = read_str(&mut r)?;
            let mut dtype = [0u8];
            read_exact(&mut r, &mut dtype, "dtype")?;
            let bytes_per = match dtype[0] {
                1 => 4,
                2 => 8,
                d => return Err(Error::CorruptHeader(format!("unknown dtype {d}"))),
            };
            let ndim = read_u32(&mut r, "rank")?;
            if ndim > 16 {
                return Err(Error::CorruptHeader(format!("rank {ndim}")));
            }
            let mut shape = Vec::with_capacity(ndim as usize);
            for _ in 0..ndim {
                shape.push(read_u64(&mut r, "dimension")? as usize);
            }
            let len = read_u64(&mut r, "payload length")? as usize;
            let expected = shape.iter().product::<usize>() * bytes_per;
            if len != expected {
                return Err(Error::CorruptHeader(format!(
                    "tensor `{name}`: payload {len} bytes, shape {shape:?} needs {expected}"
                )));
            }
            let mut payload = vec![0u8; len];
            read_exact(&mut r, &mut payload, "payload")?;
            tensors.push((
                name,
                StoredTensor {
                    dtype: dtype[0],
                    shape,
                    payload,
                },
            ));
        }
        let mut end = [0u8; 4];
        read_exact(&mut r, &mut end, "end marker")?;
        if &end != END {
            return Err(Error::CorruptHeader("missing end marker".into()));
        }
        Ok(Container { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => {
            Error::CorruptHeader(format!("truncated while reading {what}"))
        }
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let len = read_u32(r, "string length")? as usize;
    if len > 1 << 24 {
        return Err(Error::CorruptHeader(format!("string length {len}")));
    }
    let mut buf = vec![0u8; len];
    read_exact(r, &mut buf, "string")?;
    String::from_utf8(buf).map_err(|_| Error::CorruptHeader("invalid utf-8".into()))
}
