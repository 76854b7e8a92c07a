//! Versioned binary container: the magic bytes, a little-endian `u32`
//! version, then sections of `name_len: u32`, `name`, `payload_len: u64`,
//! `payload`. Numeric payloads are little-endian `f64` (or `u64` for
//! counters); the configuration is UTF-8 text.

use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"GLGANCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    sections: Vec<(String, Vec<u8>)>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_bytes(&mut self, name: impl Into<String>, payload: Vec<u8>) {
        self.sections.push((name.into(), payload));
    }

    pub fn push_f64(&mut self, name: impl Into<String>, values: &[f64]) {
        self.push_bytes(name, values.iter().flat_map(|v| v.to_le_bytes()).collect());
    }

    pub fn push_u64(&mut self, name: impl Into<String>, values: &[u64]) {
        self.push_bytes(name, values.iter().flat_map(|v| v.to_le_bytes()).collect());
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.sections.iter().map(|(n, _)| n.as_str())
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8]> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, p)| p.as_slice())
            .ok_or_else(|| Error::Checkpoint(format!("missing section `{name}`")))
    }

    fn words(&self, name: &str) -> Result<impl Iterator<Item = [u8; 8]> + '_> {
        let b = self.bytes(name)?;
        if b.len() % 8 != 0 {
            return Err(Error::Checkpoint(format!("section `{name}` is not a whole number of 8-byte values")));
        }
        Ok(b.chunks_exact(8).map(|c| c.try_into().expect("8 bytes")))
    }

    pub fn f64s(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self.words(name)?.map(f64::from_le_bytes).collect())
    }

    pub fn u64s(&self, name: &str) -> Result<Vec<u64>> {
        Ok(self.words(name)?.map(u64::from_le_bytes).collect())
    }

    /// Reads an `f64` section that must hold exactly `len` values.
    pub fn f64s_exact(&self, name: &str, len: usize) -> Result<Vec<f64>> {
        let v = self.f64s(name)?;
        if v.len() != len {
            return Err(Error::Checkpoint(format!("section `{name}` holds {} values, expected {len}", v.len())));
        }
        Ok(v)
    }

    pub fn text(&self, name: &str) -> Result<String> {
        String::from_utf8(self.bytes(name)?.to_vec())
            .map_err(|_| Error::Checkpoint(format!("section `{name}` is not valid UTF-8")))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for (name, payload) in &self.sections {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(payload);
        }
        out
    }

    /// Parses a whole file image. A short read names the section being read.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8, "header")?;
        if magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(r.take(4, "header")?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (this build reads {VERSION})"
            )));
        }
        let mut sections = Vec::new();
        let mut last = String::from("header");
        while r.pos < bytes.len() {
            let after = format!("section header after `{last}`");
            let len = u32::from_le_bytes(r.take(4, &after)?.try_into().expect("4 bytes")) as usize;
            let name = String::from_utf8(r.take(len, &after)?.to_vec())
                .map_err(|_| Error::Checkpoint(format!("{after}: name is not UTF-8")))?;
            let ctx = format!("section `{name}`");
            let plen = u64::from_le_bytes(r.take(8, &ctx)?.try_into().expect("8 bytes")) as usize;
            let payload = r.take(plen, &ctx)?.to_vec();
            last = name.clone();
            sections.push((name, payload));
        }
        Ok(Container { sections })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(Error::Checkpoint(format!(
                "file truncated in {what} ({} of {n} bytes present)",
                self.bytes.len() - self.pos
            ))),
        }
    }
}
