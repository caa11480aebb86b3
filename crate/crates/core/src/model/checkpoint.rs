//! Versioned binary container for named tensors.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "APSCKPT\0" | version u32 | config_len u64 | config (UTF-8)
//! n_tensors u64 | tensors... | crc32 of everything before it
//! tensor: name_len u32 | name | dtype u8 (0 = f64, 1 = u64) | ndim u32 | dims u64... | data
//! ```

use crate::error::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"APSCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Data {
    F64(Vec<f64>),
    U64(Vec<u64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Data,
}

impl Tensor {
    pub fn f64(shape: &[usize], data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape: shape.to_vec(),
            data: Data::F64(data),
        }
    }

    pub fn u64(data: Vec<u64>) -> Self {
        Self {
            shape: vec![data.len()],
            data: Data::U64(data),
        }
    }

    fn len(&self) -> usize {
        match &self.data {
            Data::F64(v) => v.len(),
            Data::U64(v) => v.len(),
        }
    }
}

/// Named tensors plus a free-form config echo.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub config: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(config: String) -> Self {
        Self {
            config,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Corrupt(format!("missing tensor {name:?}")))
    }

    pub fn f64_data(&self, name: &str) -> Result<&[f64]> {
        match &self.get(name)?.data {
            Data::F64(v) => Ok(v),
            Data::U64(_) => Err(Error::Corrupt(format!("{name:?} is not f64"))),
        }
    }

    pub fn u64_data(&self, name: &str) -> Result<&[u64]> {
        match &self.get(name)?.data {
            Data::U64(v) => Ok(v),
            Data::F64(_) => Err(Error::Corrupt(format!("{name:?} is not u64"))),
        }
    }

    pub fn has(&self, name: &str) -> bool {
        self.tensors.iter().any(|(n, _)| n == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        b.extend_from_slice(&(self.config.len() as u64).to_le_bytes());
        b.extend_from_slice(self.config.as_bytes());
        b.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            b.extend_from_slice(&(name.len() as u32).to_le_bytes());
            b.extend_from_slice(name.as_bytes());
            b.push(match t.data {
                Data::F64(_) => 0,
                Data::U64(_) => 1,
            });
            b.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                b.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &t.data {
                Data::F64(v) => v.iter().for_each(|x| b.extend_from_slice(&x.to_le_bytes())),
                Data::U64(v) => v.iter().for_each(|x| b.extend_from_slice(&x.to_le_bytes())),
            }
        }
        let crc = crc32fast::hash(&b);
        b.extend_from_slice(&crc.to_le_bytes());
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Corrupt("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        if bytes.len() < 16 {
            return Err(Error::Corrupt("truncated".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(Error::Corrupt("checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 12 };
        let config_len = r.len_u64()?;
        let config = String::from_utf8(r.take(config_len)?.to_vec())
            .map_err(|_| Error::Corrupt("config is not UTF-8".into()))?;
        let n = r.len_u64()?;
        let mut tensors = Vec::new();
        for _ in 0..n {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Corrupt("tensor name is not UTF-8".into()))?;
            let dtype = r.take(1)?[0];
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.len_u64()).collect::<Result<Vec<_>>>()?;
            let count = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Corrupt(format!("{name}: shape overflow")))?;
            let raw = r.take(count.checked_mul(8).ok_or_else(|| Error::Corrupt("size overflow".into()))?)?;
            let words = raw.chunks_exact(8).map(|c| c.try_into().unwrap());
            let data = match dtype {
                0 => Data::F64(words.map(f64::from_le_bytes).collect()),
                1 => Data::U64(words.map(u64::from_le_bytes).collect()),
                other => return Err(Error::Corrupt(format!("{name}: unknown dtype {other}"))),
            };
            tensors.push((name, Tensor { shape, data }));
        }
        if r.pos != body.len() {
            return Err(Error::Corrupt(format!("{} trailing bytes", body.len() - r.pos)));
        }
        debug_assert!(tensors.iter().all(|(_, t)| t.len() == t.shape.iter().product::<usize>()));
        Ok(Self { config, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        f.sync_all()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Corrupt(format!("truncated at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn len_u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| Error::Corrupt(format!("length {v} too large")))
    }
}
