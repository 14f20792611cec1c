//! Versioned little-endian binary container used for graph files and
//! parameter checkpoints. Round-trips are bit-exact: floats are written as
//! raw IEEE-754 bits.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"GREC";
pub const FORMAT_VERSION: u32 = 1;

/// Payload discriminator stored in the header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Graph,
    Checkpoint,
}

impl Kind {
    fn code(self) -> u8 {
        match self {
            Kind::Graph => 1,
            Kind::Checkpoint => 2,
        }
    }

    fn from_code(c: u8) -> Option<Kind> {
        match c {
            1 => Some(Kind::Graph),
            2 => Some(Kind::Checkpoint),
            _ => None,
        }
    }
}

pub struct Writer<W: Write> {
    inner: W,
}

impl Writer<BufWriter<File>> {
    pub fn create(path: &Path, kind: Kind) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = Writer {
            inner: BufWriter::new(file),
        };
        w.header(kind).map_err(|e| Error::io(path, e))?;
        Ok(w)
    }
}

impl<W: Write> Writer<W> {
    pub fn new(inner: W, kind: Kind) -> io::Result<Self> {
        let mut w = Writer { inner };
        w.header(kind)?;
        Ok(w)
    }

    fn header(&mut self, kind: Kind) -> io::Result<()> {
        self.inner.write_all(MAGIC)?;
        self.inner.write_u32::<LittleEndian>(FORMAT_VERSION)?;
        self.inner.write_u8(kind.code())
    }

    pub fn u8(&mut self, v: u8) -> io::Result<()> {
        self.inner.write_u8(v)
    }

    pub fn u16(&mut self, v: u16) -> io::Result<()> {
        self.inner.write_u16::<LittleEndian>(v)
    }

    pub fn u32(&mut self, v: u32) -> io::Result<()> {
        self.inner.write_u32::<LittleEndian>(v)
    }

    pub fn u64(&mut self, v: u64) -> io::Result<()> {
        self.inner.write_u64::<LittleEndian>(v)
    }

    pub fn usize(&mut self, v: usize) -> io::Result<()> {
        self.inner.write_u64::<LittleEndian>(v as u64)
    }

    pub fn f64(&mut self, v: f64) -> io::Result<()> {
        self.inner.write_u64::<LittleEndian>(v.to_bits())
    }

    pub fn str(&mut self, s: &str) -> io::Result<()> {
        self.u32(s.len() as u32)?;
        self.inner.write_all(s.as_bytes())
    }

    pub fn f64_slice(&mut self, vs: &[f64]) -> io::Result<()> {
        self.usize(vs.len())?;
        for &v in vs {
            self.f64(v)?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

pub struct Reader<R: Read> {
    inner: R,
    path: std::path::PathBuf,
}

impl Reader<BufReader<File>> {
    pub fn open(path: &Path, expect: Kind) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = Reader {
            inner: BufReader::new(file),
            path: path.to_path_buf(),
        };
        r.check_header(expect)?;
        Ok(r)
    }
}

impl<R: Read> Reader<R> {
    pub fn new(inner: R, expect: Kind) -> Result<Self> {
        let mut r = Reader {
            inner,
            path: "<memory>".into(),
        };
        r.check_header(expect)?;
        Ok(r)
    }

    fn format_err(&self, reason: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.clone(),
            reason: reason.into(),
        }
    }

    fn check_header(&mut self, expect: Kind) -> Result<()> {
        let mut magic = [0u8; 4];
        self.inner
            .read_exact(&mut magic)
            .map_err(|e| Error::io(&self.path, e))?;
        if &magic != MAGIC {
            return Err(self.format_err("bad magic bytes"));
        }
        let version = self.u32()?;
        if version != FORMAT_VERSION {
            return Err(self.format_err(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let code = self.u8()?;
        match Kind::from_code(code) {
            Some(k) if k == expect => Ok(()),
            Some(k) => Err(self.format_err(format!("expected {expect:?} payload, found {k:?}"))),
            None => Err(self.format_err(format!("unknown payload kind {code}"))),
        }
    }

    fn io_err(&self, e: io::Error) -> Error {
        Error::io(&self.path, e)
    }

    pub fn u8(&mut self) -> Result<u8> {
        self.inner.read_u8().map_err(|e| self.io_err(e))
    }

    pub fn u16(&mut self) -> Result<u16> {
        self.inner
            .read_u16::<LittleEndian>()
            .map_err(|e| self.io_err(e))
    }

    pub fn u32(&mut self) -> Result<u32> {
        self.inner
            .read_u32::<LittleEndian>()
            .map_err(|e| self.io_err(e))
    }

    pub fn u64(&mut self) -> Result<u64> {
        self.inner
            .read_u64::<LittleEndian>()
            .map_err(|e| self.io_err(e))
    }

    pub fn usize(&mut self) -> Result<usize> {
        Ok(self.u64()? as usize)
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }

    pub fn str(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let mut buf = vec![0u8; len];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| self.io_err(e))?;
        String::from_utf8(buf).map_err(|_| self.format_err("invalid utf-8 in string"))
    }

    pub fn f64_vec(&mut self) -> Result<Vec<f64>> {
        let n = self.usize()?;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(self.f64()?);
        }
        Ok(out)
    }

    /// Fails if any bytes remain unread, a guard against truncated readers.
    pub fn expect_eof(mut self) -> Result<()> {
        let mut buf = [0u8; 1];
        match self.inner.read(&mut buf) {
            Ok(0) => Ok(()),
            Ok(_) => Err(self.format_err("trailing bytes after payload")),
            Err(e) => Err(self.io_err(e)),
        }
    }
}
