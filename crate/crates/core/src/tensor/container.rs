//! Versioned binary container used for network checkpoints and shape models.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic        8 bytes   "SIRBLOB\0"
//! version      u32       currently 1
//! kind_len     u32
//! kind         utf-8     e.g. "lan", "stack", "shape-model"
//! header_len   u32
//! header       utf-8     JSON metadata (network spec, model dims, ...)
//! count        u32       number of tensor entries
//! entries      count ×
//!   name_len   u32
//!   name       utf-8
//!   role       u8        0 = weight, 1 = bias, 2 = plain data
//!   ndim       u32
//!   dims       ndim × u64
//!   payload    product(dims) × f64
//! ```

use std::io::{self, Read, Write};

use super::{ParamRole, Tensor};

pub const MAGIC: &[u8; 8] = b"SIRBLOB\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntryRole {
    Param(ParamRole),
    Data,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub role: EntryRole,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub header: String,
    pub entries: Vec<Entry>,
}

fn bad(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_string(r: &mut impl Read, limit: usize) -> io::Result<String> {
    let len = read_u32(r)? as usize;
    if len > limit {
        return Err(bad(format!("string length {len} exceeds limit {limit}")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| bad(e.to_string()))
}

fn write_string(w: &mut impl Write, s: &str) -> io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

impl Container {
    pub fn new(kind: impl Into<String>, header: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            header: header.into(),
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, role: EntryRole, tensor: Tensor) {
        self.entries.push(Entry {
            name: name.into(),
            role,
            tensor,
        });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.tensor)
    }

    pub fn payload_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    pub fn write_to(&self, w: &mut impl Write) -> io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        write_string(w, &self.kind)?;
        write_string(w, &self.header)?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for e in &self.entries {
            write_string(w, &e.name)?;
            let role = match e.role {
                EntryRole::Param(ParamRole::Weight) => 0u8,
                EntryRole::Param(ParamRole::Bias) => 1,
                EntryRole::Data => 2,
            };
            w.write_all(&[role])?;
            w.write_all(&(e.tensor.shape().len() as u32).to_le_bytes())?;
            for &d in e.tensor.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(e.tensor.len() * 8);
            for v in e.tensor.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from(r: &mut impl Read) -> io::Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("not a SIRBLOB container (bad magic)"));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(bad(format!("unsupported container version {version}")));
        }
        let kind = read_string(r, 1 << 10)?;
        let header = read_string(r, 1 << 24)?;
        let count = read_u32(r)? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = read_string(r, 1 << 16)?;
            let mut role = [0u8; 1];
            r.read_exact(&mut role)?;
            let role = match role[0] {
                0 => EntryRole::Param(ParamRole::Weight),
                1 => EntryRole::Param(ParamRole::Bias),
                2 => EntryRole::Data,
                other => return Err(bad(format!("unknown entry role {other}"))),
            };
            let ndim = read_u32(r)? as usize;
            if ndim > 8 {
                return Err(bad(format!("entry `{name}` has {ndim} dimensions")));
            }
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(read_u64(r)? as usize);
            }
            let len: usize = dims.iter().product();
            let mut raw = vec![0u8; len * 8];
            r.read_exact(&mut raw)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let tensor = Tensor::new(dims, data).map_err(|e| bad(format!("entry `{name}`: {e}")))?;
            entries.push(Entry { name, role, tensor });
        }
        Ok(Self { kind, header, entries })
    }

    pub fn from_bytes(mut bytes: &[u8]) -> io::Result<Self> {
        Self::read_from(&mut bytes)
    }

    pub fn save(&self, path: &std::path::Path) -> io::Result<()> {
        let mut f = io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()
    }

    pub fn load(path: &std::path::Path) -> io::Result<Self> {
        let mut f = io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}
