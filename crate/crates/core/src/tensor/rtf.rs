//! Raw tensor records (`LGMT`) and named tensor archives (`LGMA`).
//!
//! Record layout, all little-endian:
//!
//! ```text
//! "LGMT" | u32 version = 1 | u32 dtype (0 = f32, 1 = f64) | u32 ndim
//!        | ndim x u64 extents | row-major payload
//! ```
//!
//! An archive is `"LGMA" | u32 version | u32 count` followed by `count`
//! entries of `u32 name_length | UTF-8 name | record`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{DType, Real, Tensor};
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"LGMT";
pub const ARCHIVE_MAGIC: &[u8; 4] = b"LGMA";
pub const VERSION: u32 = 1;

/// A tensor of either on-disk element type.
#[derive(Debug, Clone, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl StoredTensor {
    pub fn dtype(&self) -> DType {
        match self {
            StoredTensor::F32(_) => DType::F32,
            StoredTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::F32(t) => t.shape(),
            StoredTensor::F64(t) => t.shape(),
        }
    }

    /// Converts to `T`; exact when the stored type already is `T`.
    pub fn to_real<T: Real>(&self) -> Tensor<T> {
        match self {
            StoredTensor::F32(t) => t.cast(),
            StoredTensor::F64(t) => t.cast(),
        }
    }
}

impl From<Tensor<f32>> for StoredTensor {
    fn from(t: Tensor<f32>) -> Self {
        StoredTensor::F32(t)
    }
}

impl From<Tensor<f64>> for StoredTensor {
    fn from(t: Tensor<f64>) -> Self {
        StoredTensor::F64(t)
    }
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => format_err(format!("truncated {what}")),
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

pub fn write_tensor<W: Write, T: Real>(w: &mut W, t: &Tensor<T>) -> Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u32::<LittleEndian>(T::DTYPE.code())?;
    w.write_u32::<LittleEndian>(t.ndim() as u32)?;
    for &e in t.shape() {
        w.write_u64::<LittleEndian>(e as u64)?;
    }
    match T::DTYPE {
        DType::F32 => {
            for &v in t.data() {
                w.write_f32::<LittleEndian>(v.as_f64() as f32)?;
            }
        }
        DType::F64 => {
            for &v in t.data() {
                w.write_f64::<LittleEndian>(v.as_f64())?;
            }
        }
    }
    Ok(())
}

pub fn write_stored<W: Write>(w: &mut W, t: &StoredTensor) -> Result<()> {
    match t {
        StoredTensor::F32(t) => write_tensor(w, t),
        StoredTensor::F64(t) => write_tensor(w, t),
    }
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<StoredTensor> {
    let mut magic = [0u8; 4];
    read_exact_or(r, &mut magic, "tensor magic")?;
    if &magic != TENSOR_MAGIC {
        return Err(format_err(format!("bad tensor magic {:?}", magic)));
    }
    let version = read_u32(r, "tensor version")?;
    if version != VERSION {
        return Err(format_err(format!("unsupported tensor version {version}")));
    }
    let code = read_u32(r, "tensor dtype")?;
    let dtype = DType::from_code(code).ok_or_else(|| format_err(format!("unknown dtype code {code}")))?;
    let ndim = read_u32(r, "tensor rank")? as usize;
    if ndim > 16 {
        return Err(format_err(format!("implausible tensor rank {ndim}")));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let mut b = [0u8; 8];
        read_exact_or(r, &mut b, "tensor extent")?;
        shape.push(usize::try_from(u64::from_le_bytes(b)).map_err(|_| format_err("extent overflows usize"))?);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| format_err("tensor size overflows"))?;
    let width = match dtype {
        DType::F32 => 4,
        DType::F64 => 8,
    };
    let mut payload = vec![0u8; numel.checked_mul(width).ok_or_else(|| format_err("tensor size overflows"))?];
    read_exact_or(r, &mut payload, "tensor payload")?;
    Ok(match dtype {
        DType::F32 => StoredTensor::F32(Tensor::new(
            &shape,
            payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
        )?),
        DType::F64 => StoredTensor::F64(Tensor::new(
            &shape,
            payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
        )?),
    })
}

/// Ordered collection of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Archive {
    entries: Vec<(String, StoredTensor)>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces `name`.
    pub fn insert(&mut self, name: impl Into<String>, t: impl Into<StoredTensor>) {
        let name = name.into();
        let t = t.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = t,
            None => self.entries.push((name, t)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&StoredTensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&StoredTensor> {
        self.get(name).ok_or_else(|| format_err(format!("archive has no entry '{name}'")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(ARCHIVE_MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        w.write_u32::<LittleEndian>(self.entries.len() as u32)?;
        for (name, t) in &self.entries {
            w.write_u32::<LittleEndian>(name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            write_stored(w, t)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact_or(r, &mut magic, "archive magic")?;
        if &magic != ARCHIVE_MAGIC {
            return Err(format_err(format!("bad archive magic {:?}", magic)));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != VERSION {
            return Err(format_err(format!("unsupported archive version {version}")));
        }
        let count = read_u32(r, "archive count")?;
        let mut archive = Archive::new();
        for _ in 0..count {
            let len = read_u32(r, "entry name length")? as usize;
            if len > 4096 {
                return Err(format_err(format!("entry name of {len} bytes")));
            }
            let mut name = vec![0u8; len];
            read_exact_or(r, &mut name, "entry name")?;
            let name = String::from_utf8(name).map_err(|_| format_err("entry name is not UTF-8"))?;
            let t = read_tensor(r)?;
            archive.entries.push((name, t));
        }
        Ok(archive)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }
}

pub fn save_tensor<T: Real>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<StoredTensor> {
    read_tensor(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::<f32>::from_f64(&[2], &[1.0, -2.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert_eq!(&buf[..4], b"LGMT");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 0);
        assert_eq!(u32::from_le_bytes(buf[12..16].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(buf[16..24].try_into().unwrap()), 2);
        assert_eq!(f32::from_le_bytes(buf[24..28].try_into().unwrap()), 1.0);
        assert_eq!(buf.len(), 32);
    }

    #[test]
    fn truncated_and_garbage_inputs_fail() {
        let t = Tensor::<f64>::ones(&[3, 2]);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert!(matches!(read_tensor(&mut &buf[..buf.len() - 1]), Err(Error::Format(_))));
        assert!(matches!(read_tensor(&mut &b"XXXX"[..]), Err(Error::Format(_))));
        let mut bad = buf.clone();
        bad[8] = 7;
        assert!(matches!(read_tensor(&mut &bad[..]), Err(Error::Format(_))));
    }

    #[test]
    fn archive_keeps_order_and_replaces() {
        let mut a = Archive::new();
        a.insert("b", Tensor::<f32>::ones(&[1]));
        a.insert("a", Tensor::<f64>::zeros(&[2, 2]));
        a.insert("b", Tensor::<f32>::zeros(&[3]));
        assert_eq!(a.names().collect::<Vec<_>>(), vec!["b", "a"]);
        assert_eq!(a.get("b").unwrap().shape(), &[3]);
        let mut buf = Vec::new();
        a.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"LGMA");
        assert_eq!(Archive::read_from(&mut &buf[..]).unwrap(), a);
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            (shape, data) in proptest::collection::vec(1usize..5, 0..4).prop_flat_map(|shape| {
                let n: usize = shape.iter().product();
                (Just(shape), proptest::collection::vec(-1e30f32..1e30, n))
            }),
        ) {
            let t = Tensor::new(&shape, data).unwrap();
            let mut buf = Vec::new();
            write_tensor(&mut buf, &t).unwrap();
            let back = read_tensor(&mut &buf[..]).unwrap();
            prop_assert_eq!(back, StoredTensor::F32(t));
        }
    }
}
