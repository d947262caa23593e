//! The `ETLT` tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "ETLT"  u32 version (=1)  u32 section count
//! per section:
//!   u16 name length, UTF-8 name
//!   u8 dtype   1 = f32, 2 = f64, 3 = u8, 4 = string table
//!   u8 rank, rank x u64 dims
//!   payload, row-major
//! ```
//!
//! A string table has rank 1; its payload is `dims[0]` NUL-terminated
//! UTF-8 strings back to back.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const MAGIC: &[u8; 4] = b"ETLT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
    Strings(Vec<String>),
}

impl Payload {
    pub fn dtype_code(&self) -> u8 {
        match self {
            Payload::F32(_) => 1,
            Payload::F64(_) => 2,
            Payload::U8(_) => 3,
            Payload::Strings(_) => 4,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::F64(v) => v.len(),
            Payload::U8(v) => v.len(),
            Payload::Strings(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Bitwise equality, so NaN payloads compare equal to themselves.
    fn bits_eq(&self, other: &Payload) -> bool {
        match (self, other) {
            (Payload::F32(a), Payload::F32(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (Payload::F64(a), Payload::F64(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            _ => self == other,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Section {
    pub name: String,
    pub dims: Vec<usize>,
    pub payload: Payload,
}

impl PartialEq for Section {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name && self.dims == other.dims && self.payload.bits_eq(&other.payload)
    }
}

impl Section {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, payload: Payload) -> Result<Self> {
        let name = name.into();
        if name.is_empty() || name.len() > u16::MAX as usize {
            return Err(Error::InvalidArgument(format!(
                "section name must be 1..=65535 bytes, got {}",
                name.len()
            )));
        }
        if dims.len() > u8::MAX as usize {
            return Err(Error::InvalidArgument(format!(
                "section `{name}` has rank {}",
                dims.len()
            )));
        }
        let expected = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        if let Payload::Strings(s) = &payload {
            if dims.len() != 1 || dims[0] != s.len() {
                return Err(Error::shape(format!(
                    "string table `{name}` must have dims [{}], got {dims:?}",
                    s.len()
                )));
            }
            if s.iter().any(|x| x.contains('\0')) {
                return Err(Error::InvalidArgument(format!(
                    "string table `{name}` contains a NUL byte"
                )));
            }
        } else if expected != Some(payload.len()) {
            return Err(Error::shape(format!(
                "section `{name}` dims {dims:?} do not match payload length {}",
                payload.len()
            )));
        }
        Ok(Self {
            name,
            dims,
            payload,
        })
    }

    pub fn matrix(name: impl Into<String>, m: &Matrix) -> Result<Self> {
        Self::new(
            name,
            vec![m.rows(), m.cols()],
            Payload::F64(m.as_slice().to_vec()),
        )
    }

    /// Stores `m` in single precision.
    pub fn matrix_f32(name: impl Into<String>, m: &Matrix) -> Result<Self> {
        Self::new(
            name,
            vec![m.rows(), m.cols()],
            Payload::F32(m.as_slice().iter().map(|&v| v as f32).collect()),
        )
    }

    pub fn vector(name: impl Into<String>, v: &[f64]) -> Result<Self> {
        Self::new(name, vec![v.len()], Payload::F64(v.to_vec()))
    }

    pub fn bytes(name: impl Into<String>, v: &[u8]) -> Result<Self> {
        Self::new(name, vec![v.len()], Payload::U8(v.to_vec()))
    }

    pub fn strings(name: impl Into<String>, v: Vec<String>) -> Result<Self> {
        Self::new(name, vec![v.len()], Payload::Strings(v))
    }

    /// Numeric payload widened to `f64`.
    pub fn to_f64(&self) -> Result<Vec<f64>> {
        match &self.payload {
            Payload::F32(v) => Ok(v.iter().map(|&x| f64::from(x)).collect()),
            Payload::F64(v) => Ok(v.clone()),
            Payload::U8(v) => Ok(v.iter().map(|&x| f64::from(x)).collect()),
            Payload::Strings(_) => Err(Error::Config(format!(
                "section `{}` is a string table",
                self.name
            ))),
        }
    }

    pub fn to_matrix(&self) -> Result<Matrix> {
        if self.dims.len() != 2 {
            return Err(Error::shape(format!(
                "section `{}` has rank {}, expected 2",
                self.name,
                self.dims.len()
            )));
        }
        Matrix::new(self.dims[0], self.dims[1], self.to_f64()?)
    }

    pub fn as_u8(&self) -> Result<&[u8]> {
        match &self.payload {
            Payload::U8(v) => Ok(v),
            _ => Err(Error::Config(format!(
                "section `{}` is not a u8 section",
                self.name
            ))),
        }
    }

    pub fn as_strings(&self) -> Result<&[String]> {
        match &self.payload {
            Payload::Strings(v) => Ok(v),
            _ => Err(Error::Config(format!(
                "section `{}` is not a string table",
                self.name
            ))),
        }
    }
}

/// An ordered set of uniquely named sections.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    sections: Vec<Section>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn sections(&self) -> &[Section] {
        &self.sections
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.sections.iter().map(|s| s.name.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Section> {
        self.get(name)
            .ok_or_else(|| Error::Config(format!("container has no `{name}` section")))
    }

    /// Appends a section; names must be unique.
    pub fn push(&mut self, section: Section) -> Result<()> {
        if self.get(&section.name).is_some() {
            return Err(Error::InvalidArgument(format!(
                "duplicate section `{}`",
                section.name
            )));
        }
        self.sections.push(section);
        Ok(())
    }

    /// Replaces a same-named section in place, or appends.
    pub fn upsert(&mut self, section: Section) {
        match self.sections.iter_mut().find(|s| s.name == section.name) {
            Some(slot) => *slot = section,
            None => self.sections.push(section),
        }
    }

    pub fn remove(&mut self, name: &str) -> Option<Section> {
        let i = self.sections.iter().position(|s| s.name == name)?;
        Some(self.sections.remove(i))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for s in &self.sections {
            out.extend_from_slice(&(s.name.len() as u16).to_le_bytes());
            out.extend_from_slice(s.name.as_bytes());
            out.push(s.payload.dtype_code());
            out.push(s.dims.len() as u8);
            for &d in &s.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &s.payload {
                Payload::F32(v) => v
                    .iter()
                    .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::F64(v) => v
                    .iter()
                    .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::U8(v) => out.extend_from_slice(v),
                Payload::Strings(v) => v.iter().for_each(|x| {
                    out.extend_from_slice(x.as_bytes());
                    out.push(0);
                }),
            }
        }
        out
    }

    /// Parses and validates a container image. `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            path,
        };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(r.format(format!(
                "bad magic {:?}, expected \"ETLT\"",
                String::from_utf8_lossy(magic)
            )));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(r.format(format!("unsupported version {version}")));
        }
        let count = r.u32("section count")?;
        let mut c = Container::new();
        for _ in 0..count {
            let start = r.pos;
            let name_len = r.u16("section name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "section name")?)
                .map_err(|_| r.corrupt(start, "section name is not UTF-8"))?
                .to_string();
            let dtype = r.take(1, "dtype")?[0];
            let rank = r.take(1, "rank")?[0] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                let d = r.u64("dimension")?;
                dims.push(
                    usize::try_from(d).map_err(|_| r.corrupt(r.pos - 8, "dimension too large"))?,
                );
            }
            let count = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| r.corrupt(start, "element count overflows"))?;
            let payload = match dtype {
                1 => Payload::F32(
                    r.take_elems(count, 4, &name)?
                        .chunks_exact(4)
                        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                        .collect(),
                ),
                2 => Payload::F64(
                    r.take_elems(count, 8, &name)?
                        .chunks_exact(8)
                        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                        .collect(),
                ),
                3 => Payload::U8(r.take_elems(count, 1, &name)?.to_vec()),
                4 => {
                    if rank != 1 {
                        return Err(r.format(format!("string table `{name}` has rank {rank}")));
                    }
                    let mut strings = Vec::with_capacity(count.min(1 << 16));
                    for _ in 0..count {
                        let at = r.pos;
                        let rest = &r.bytes[r.pos..];
                        let end = rest.iter().position(|&b| b == 0).ok_or_else(|| {
                            r.corrupt(at, format!("unterminated string in `{name}`"))
                        })?;
                        let s = std::str::from_utf8(&rest[..end]).map_err(|_| {
                            r.corrupt(at, format!("string in `{name}` is not UTF-8"))
                        })?;
                        strings.push(s.to_string());
                        r.pos += end + 1;
                    }
                    Payload::Strings(strings)
                }
                other => {
                    return Err(r.format(format!("section `{name}` has unknown dtype {other}")))
                }
            };
            if c.get(&name).is_some() {
                return Err(r.format(format!("duplicate section `{name}`")));
            }
            c.sections.push(Section {
                name,
                dims,
                payload,
            });
        }
        if r.pos != bytes.len() {
            return Err(r.corrupt(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(c)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(e) => {
                let out = &self.bytes[self.pos..e];
                self.pos = e;
                Ok(out)
            }
            None => Err(self.corrupt(
                self.pos,
                format!(
                    "truncated {what}: need {n} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            )),
        }
    }

    fn take_elems(&mut self, count: usize, size: usize, name: &str) -> Result<&'a [u8]> {
        let n = count
            .checked_mul(size)
            .ok_or_else(|| self.corrupt(self.pos, "payload size overflows"))?;
        self.take(n, &format!("payload of `{name}`"))
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn format(&self, reason: String) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            reason,
        }
    }

    fn corrupt(&self, offset: usize, reason: impl Into<String>) -> Error {
        Error::Corruption {
            path: self.path.to_path_buf(),
            offset: offset as u64,
            reason: reason.into(),
        }
    }
}

/// Writes `bytes` to a temporary file next to `path`, then renames it over
/// `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let mut builder = tempfile::Builder::new();
    // Temp files default to 0600; results are ordinary files.
    #[cfg(unix)]
    builder.permissions(std::os::unix::fs::PermissionsExt::from_mode(0o644));
    let mut tmp = builder.tempfile_in(&dir).map_err(|e| Error::io(path, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn write_container(path: impl AsRef<Path>, container: &Container) -> Result<()> {
    write_atomic(path.as_ref(), &container.to_bytes())
}

pub fn read_container(path: impl AsRef<Path>) -> Result<Container> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Container::from_bytes(&bytes, path)
}
