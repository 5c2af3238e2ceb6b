//! Tiny versioned container for the binary artifacts (trie, index, policy
//! parameters).
//!
//! Layout: an 8-byte magic, a little-endian `u32` format version, the `u64`
//! run seed, then the payload. All integers are little-endian; strings are a
//! `u32` byte length followed by UTF-8. Writers produce the payload in a
//! fixed order, so re-serializing the same value is byte-identical.

use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: expected magic {expected:?}")]
    BadMagic { path: String, expected: String },
    #[error("{path}: unsupported version {found} (expected {expected})")]
    BadVersion {
        path: String,
        found: u32,
        expected: u32,
    },
    #[error("{path}: truncated or corrupt ({context})")]
    Corrupt { path: String, context: String },
}

/// Writes `bytes` to `path` through a temporary file in the same directory,
/// so a crash never leaves a half-written artifact behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), SnapshotError> {
    let io_err = |source| SnapshotError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(io_err)?;
    std::fs::rename(&tmp, path).map_err(io_err)
}

/// Serializes one snapshot body after the standard header.
pub struct SnapshotWriter {
    buf: Vec<u8>,
}

impl SnapshotWriter {
    pub fn new(magic: &[u8; 8], version: u32, seed: u64) -> SnapshotWriter {
        let mut buf = Vec::new();
        buf.extend_from_slice(magic);
        buf.extend_from_slice(&version.to_le_bytes());
        buf.extend_from_slice(&seed.to_le_bytes());
        SnapshotWriter { buf }
    }

    pub fn put_u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn put_u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn put_u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn put_f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn put_str(&mut self, s: &str) {
        self.put_u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }

    pub fn write_to(self, path: &Path) -> Result<(), SnapshotError> {
        write_atomic(path, &self.buf)
    }
}

/// Reads one snapshot, validating magic and version up front.
pub struct SnapshotReader {
    path: String,
    data: Vec<u8>,
    pos: usize,
    seed: u64,
}

impl SnapshotReader {
    pub fn open(path: &Path, magic: &[u8; 8], version: u32) -> Result<SnapshotReader, SnapshotError> {
        let display = path.display().to_string();
        let data = std::fs::read(path).map_err(|source| SnapshotError::Io {
            path: display.clone(),
            source,
        })?;
        let mut reader = SnapshotReader {
            path: display,
            data,
            pos: 0,
            seed: 0,
        };
        let found_magic = reader.take(8, "magic")?;
        if found_magic != magic {
            return Err(SnapshotError::BadMagic {
                path: reader.path,
                expected: String::from_utf8_lossy(magic).into_owned(),
            });
        }
        let found_version = reader.get_u32("version")?;
        if found_version != version {
            return Err(SnapshotError::BadVersion {
                path: reader.path,
                found: found_version,
                expected: version,
            });
        }
        reader.seed = reader.get_u64("seed")?;
        Ok(reader)
    }

    /// Seed recorded when the artifact was written.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn corrupt(&self, context: &str) -> SnapshotError {
        SnapshotError::Corrupt {
            path: self.path.clone(),
            context: context.to_string(),
        }
    }

    fn take(&mut self, n: usize, context: &str) -> Result<&[u8], SnapshotError> {
        if self.pos + n > self.data.len() {
            return Err(self.corrupt(context));
        }
        let slice = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    pub fn get_u8(&mut self, context: &str) -> Result<u8, SnapshotError> {
        Ok(self.take(1, context)?[0])
    }

    pub fn get_u32(&mut self, context: &str) -> Result<u32, SnapshotError> {
        Ok(u32::from_le_bytes(self.take(4, context)?.try_into().unwrap()))
    }

    pub fn get_u64(&mut self, context: &str) -> Result<u64, SnapshotError> {
        Ok(u64::from_le_bytes(self.take(8, context)?.try_into().unwrap()))
    }

    pub fn get_f64(&mut self, context: &str) -> Result<f64, SnapshotError> {
        Ok(f64::from_le_bytes(self.take(8, context)?.try_into().unwrap()))
    }

    pub fn get_str(&mut self, context: &str) -> Result<String, SnapshotError> {
        let len = self.get_u32(context)? as usize;
        let bytes = self.take(len, context)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| SnapshotError::Corrupt {
            path: self.path.clone(),
            context: format!("{context}: invalid utf-8"),
        })
    }

    /// Fails if any payload bytes were left unread; catches format drift.
    pub fn finish(self) -> Result<(), SnapshotError> {
        if self.pos != self.data.len() {
            let context = format!("{} trailing bytes", self.data.len() - self.pos);
            return Err(SnapshotError::Corrupt {
                path: self.path,
                context,
            });
        }
        Ok(())
    }
}
