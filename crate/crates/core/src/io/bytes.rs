use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Little-endian container writer; the trailing CRC32 covers every byte
/// before it.
pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8; 4], version: u16) -> Self {
        let mut w = Self { buf: Vec::new() };
        w.bytes(magic);
        w.u16(version);
        w
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn i8(&mut self, v: i8) {
        self.buf.push(v as u8);
    }

    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: usize) {
        let v = u32::try_from(v).expect("container field exceeds u32");
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.buf.extend_from_slice(&crc.to_le_bytes());
        self.buf
    }
}

/// Bounds-checked reader reporting byte offsets in its errors.
pub(crate) struct Reader<'a> {
    path: PathBuf,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Checks magic, version and CRC, leaving the cursor after the version.
    pub fn open(path: &Path, buf: &'a [u8], magic: &[u8; 4], version: u16) -> Result<Self> {
        let min = magic.len() + 2 + 4;
        if buf.len() < min {
            return Err(parse(path, 0, format!("file is {} bytes, shorter than the {min}-byte header", buf.len())));
        }
        if &buf[..4] != magic {
            return Err(parse(
                path,
                0,
                format!("bad magic {:?}, expected {:?}", String::from_utf8_lossy(&buf[..4]), String::from_utf8_lossy(magic)),
            ));
        }
        let (body, tail) = buf.split_at(buf.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Integrity { path: path.to_path_buf(), stored, computed });
        }
        let found = u16::from_le_bytes([buf[4], buf[5]]);
        if found != version {
            return Err(Error::Version { path: path.to_path_buf(), found, expected: version });
        }
        Ok(Self { path: path.to_path_buf(), buf: body, pos: 6 })
    }

    pub fn error(&self, message: impl Into<String>) -> Error {
        parse(&self.path, self.pos as u64, message)
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.error(format!(
                "need {n} bytes, only {} left before the checksum",
                self.buf.len() - self.pos
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn i8(&mut self) -> Result<i8> {
        Ok(self.u8()? as i8)
    }

    pub fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.error(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

pub(crate) fn parse(path: &Path, offset: u64, message: impl Into<String>) -> Error {
    Error::Parse { path: path.to_path_buf(), offset, message: message.into() }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes through a temporary file in the target directory and renames it
/// into place, so a failed write never leaves a partial artifact.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    use std::io::Write;
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}
