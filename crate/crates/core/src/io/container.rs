//! Little-endian binary container used for checkpoints, fields and priors.
//!
//! Layout:
//!   magic  b"LFT3"
//!   u32    format version (1)
//!   u32    section count
//! then per section:
//!   u16    name length, followed by UTF-8 name bytes
//!   u8     dtype tag (0 = f64, 1 = u64, 2 = i64, 3 = u8)
//!   u32    number of dimensions
//!   u64[]  dimensions
//!   bytes  payload, little endian, row-major
//!
//! Round-trips are bitwise exact.

use crate::error::{Error, Result};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"LFT3";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F64 { dims: Vec<u64>, data: Vec<f64> },
    U64 { dims: Vec<u64>, data: Vec<u64> },
    I64 { dims: Vec<u64>, data: Vec<i64> },
    Bytes { dims: Vec<u64>, data: Vec<u8> },
}

impl Payload {
    pub fn f64_vec(data: Vec<f64>) -> Self {
        let n = data.len() as u64;
        Payload::F64 { dims: vec![n], data }
    }

    pub fn scalar_u64(v: u64) -> Self {
        Payload::U64 { dims: vec![], data: vec![v] }
    }

    pub fn scalar_f64(v: f64) -> Self {
        Payload::F64 { dims: vec![], data: vec![v] }
    }

    pub fn text(s: &str) -> Self {
        let b = s.as_bytes().to_vec();
        Payload::Bytes { dims: vec![b.len() as u64], data: b }
    }

    pub fn as_f64(&self) -> Result<&[f64]> {
        match self {
            Payload::F64 { data, .. } => Ok(data),
            _ => Err(Error::Container("expected f64 section".into())),
        }
    }

    pub fn as_u64(&self) -> Result<&[u64]> {
        match self {
            Payload::U64 { data, .. } => Ok(data),
            _ => Err(Error::Container("expected u64 section".into())),
        }
    }

    pub fn as_text(&self) -> Result<String> {
        match self {
            Payload::Bytes { data, .. } => String::from_utf8(data.clone())
                .map_err(|_| Error::Container("invalid UTF-8 in text section".into())),
            _ => Err(Error::Container("expected byte section".into())),
        }
    }

    pub fn dims(&self) -> &[u64] {
        match self {
            Payload::F64 { dims, .. }
            | Payload::U64 { dims, .. }
            | Payload::I64 { dims, .. }
            | Payload::Bytes { dims, .. } => dims,
        }
    }

    fn elem_count(dims: &[u64]) -> usize {
        if dims.is_empty() {
            1
        } else {
            dims.iter().product::<u64>() as usize
        }
    }
}

/// An ordered set of named sections.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    sections: BTreeMap<String, Payload>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, payload: Payload) {
        self.sections.insert(name.to_string(), payload);
    }

    pub fn get(&self, name: &str) -> Result<&Payload> {
        self.sections
            .get(name)
            .ok_or_else(|| Error::Container(format!("missing section '{name}'")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.sections.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.sections.keys()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.sections.len() as u32).to_le_bytes())?;
        for (name, payload) in &self.sections {
            let nb = name.as_bytes();
            w.write_all(&(nb.len() as u16).to_le_bytes())?;
            w.write_all(nb)?;
            let (tag, dims): (u8, &[u64]) = match payload {
                Payload::F64 { dims, .. } => (0, dims),
                Payload::U64 { dims, .. } => (1, dims),
                Payload::I64 { dims, .. } => (2, dims),
                Payload::Bytes { dims, .. } => (3, dims),
            };
            w.write_all(&[tag])?;
            w.write_all(&(dims.len() as u32).to_le_bytes())?;
            for d in dims {
                w.write_all(&d.to_le_bytes())?;
            }
            match payload {
                Payload::F64 { data, .. } => {
                    for v in data {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
                Payload::U64 { data, .. } => {
                    for v in data {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
                Payload::I64 { data, .. } => {
                    for v in data {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
                Payload::Bytes { data, .. } => w.write_all(data)?,
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Container("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Container(format!("unsupported version {version}")));
        }
        let count = read_u32(&mut r)? as usize;
        let mut sections = BTreeMap::new();
        for _ in 0..count {
            let name_len = read_u16(&mut r)? as usize;
            let mut nb = vec![0u8; name_len];
            r.read_exact(&mut nb)?;
            let name = String::from_utf8(nb)
                .map_err(|_| Error::Container("invalid UTF-8 section name".into()))?;
            let mut tag = [0u8; 1];
            r.read_exact(&mut tag)?;
            let ndim = read_u32(&mut r)? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(read_u64(&mut r)?);
            }
            let n = Payload::elem_count(&dims);
            let payload = match tag[0] {
                0 => {
                    let mut data = Vec::with_capacity(n);
                    let mut buf = [0u8; 8];
                    for _ in 0..n {
                        r.read_exact(&mut buf)?;
                        data.push(f64::from_le_bytes(buf));
                    }
                    Payload::F64 { dims, data }
                }
                1 => {
                    let mut data = Vec::with_capacity(n);
                    let mut buf = [0u8; 8];
                    for _ in 0..n {
                        r.read_exact(&mut buf)?;
                        data.push(u64::from_le_bytes(buf));
                    }
                    Payload::U64 { dims, data }
                }
                2 => {
                    let mut data = Vec::with_capacity(n);
                    let mut buf = [0u8; 8];
                    for _ in 0..n {
                        r.read_exact(&mut buf)?;
                        data.push(i64::from_le_bytes(buf));
                    }
                    Payload::I64 { dims, data }
                }
                3 => {
                    let mut data = vec![0u8; n];
                    r.read_exact(&mut data)?;
                    Payload::Bytes { dims, data }
                }
                t => return Err(Error::Container(format!("unknown dtype tag {t}"))),
            };
            sections.insert(name, payload);
        }
        Ok(Self { sections })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut r = std::io::BufReader::new(file);
        Self::read_from(&mut r)
    }
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_bitwise() {
        let mut c = Container::new();
        c.insert("a/values", Payload::f64_vec(vec![1.5, -2.25, 0.0, f64::MIN_POSITIVE]));
        c.insert("a/dims", Payload::U64 { dims: vec![3], data: vec![4, 5, 6] });
        c.insert("meta/name", Payload::text("sphere"));
        c.insert("meta/iter", Payload::scalar_u64(42));

        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        let c2 = Container::read_from(buf.as_slice()).unwrap();
        assert_eq!(c, c2);

        // Bitwise: re-serializing gives identical bytes.
        let mut buf2 = Vec::new();
        c2.write_to(&mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn missing_section_named_in_error() {
        let c = Container::new();
        let err = c.get("sdf/level0").unwrap_err();
        assert!(err.to_string().contains("sdf/level0"));
    }

    #[test]
    fn bad_magic_rejected() {
        let buf = b"NOPE\x01\x00\x00\x00\x00\x00\x00\x00".to_vec();
        assert!(Container::read_from(buf.as_slice()).is_err());
    }
}
