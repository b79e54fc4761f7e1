//! `PINN1` binary container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "PINN1"
//! u32 tag length, tag bytes (UTF-8)
//! u32 header length, header bytes (JSON)
//! u32 block count
//! per block: u64 value count, values as f64
//! ```

use std::path::{Path, PathBuf};

use serde_json::Value;

pub const MAGIC: &[u8; 5] = b"PINN1";

#[derive(Debug, thiserror::Error)]
pub enum ContainerError {
    #[error("{path}: not a PINN1 file (bad magic)")]
    BadMagic { path: PathBuf },
    #[error("{path}: truncated while reading {what}")]
    Truncated { path: PathBuf, what: &'static str },
    #[error("{path}: expected a `{expected}` container, found `{found}`")]
    WrongTag {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("{path}: malformed header: {reason}")]
    Header { path: PathBuf, reason: String },
    #[error("{path}: {extra} trailing bytes after last block")]
    Trailing { path: PathBuf, extra: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub tag: String,
    pub header: Value,
    pub blocks: Vec<Vec<f64>>,
}

impl Container {
    pub fn new(tag: impl Into<String>, header: Value, blocks: Vec<Vec<f64>>) -> Self {
        Self {
            tag: tag.into(),
            header,
            blocks,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("JSON value serializes");
        let payload: usize = self.blocks.iter().map(|b| 8 + 8 * b.len()).sum();
        let mut out = Vec::with_capacity(5 + 12 + self.tag.len() + header.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.tag.len() as u32).to_le_bytes());
        out.extend_from_slice(self.tag.as_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for block in &self.blocks {
            out.extend_from_slice(&(block.len() as u64).to_le_bytes());
            for v in block {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses a container; `path` is only used in error messages.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self, ContainerError> {
        let mut r = Reader {
            bytes,
            pos: 0,
            path,
        };
        if r.take(MAGIC.len(), "magic")? != MAGIC {
            return Err(ContainerError::BadMagic {
                path: path.to_path_buf(),
            });
        }
        let tag_len = r.u32("tag length")? as usize;
        let tag = String::from_utf8(r.take(tag_len, "tag")?.to_vec()).map_err(|e| {
            ContainerError::Header {
                path: path.to_path_buf(),
                reason: e.to_string(),
            }
        })?;
        let header_len = r.u32("header length")? as usize;
        let header: Value = serde_json::from_slice(r.take(header_len, "header")?).map_err(|e| {
            ContainerError::Header {
                path: path.to_path_buf(),
                reason: e.to_string(),
            }
        })?;
        let count = r.u32("block count")? as usize;
        let mut blocks = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let n = r.u64("block length")? as usize;
            let raw = r.take(n.checked_mul(8).unwrap_or(usize::MAX), "block values")?;
            blocks.push(
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            );
        }
        if r.pos != bytes.len() {
            return Err(ContainerError::Trailing {
                path: path.to_path_buf(),
                extra: bytes.len() - r.pos,
            });
        }
        Ok(Self { tag, header, blocks })
    }

    pub fn save(&self, path: &Path) -> Result<(), ContainerError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| ContainerError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ContainerError> {
        let bytes = std::fs::read(path).map_err(|source| ContainerError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes, path)
    }

    /// Loads and checks the tag.
    pub fn load_tagged(path: &Path, tag: &str) -> Result<Self, ContainerError> {
        let c = Self::load(path)?;
        if c.tag != tag {
            return Err(ContainerError::WrongTag {
                path: path.to_path_buf(),
                expected: tag.to_string(),
                found: c.tag,
            });
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
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], ContainerError> {
        if self.bytes.len() - self.pos < n {
            return Err(ContainerError::Truncated {
                path: self.path.to_path_buf(),
                what,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, ContainerError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, ContainerError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn sample() -> Container {
        Container::new(
            "test",
            json!({"a": 1}),
            vec![vec![1.0, -2.5], vec![], vec![f64::MIN_POSITIVE]],
        )
    }

    #[test]
    fn round_trip() {
        let c = sample();
        let back = Container::from_bytes(&c.to_bytes(), Path::new("mem")).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), c.to_bytes());
    }

    #[test]
    fn bad_magic_names_file() {
        let mut b = sample().to_bytes();
        b[0] = b'X';
        let err = Container::from_bytes(&b, Path::new("ckpt.bin")).unwrap_err();
        assert!(matches!(err, ContainerError::BadMagic { .. }));
        assert!(err.to_string().contains("ckpt.bin"));
    }

    #[test]
    fn truncation_detected() {
        let b = sample().to_bytes();
        for cut in [3, 10, b.len() - 1] {
            assert!(matches!(
                Container::from_bytes(&b[..cut], Path::new("x")),
                Err(ContainerError::Truncated { .. })
            ));
        }
    }
}
