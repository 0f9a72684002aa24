//! Little-endian binary helpers, the `BLEMB001` embedding file, and atomic
//! file replacement.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use crate::codec::CodeBlock;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const EMBEDDING_MAGIC: &[u8; 8] = b"BLEMB001";

const DTYPE_F32: u8 = 0;
const DTYPE_U8: u8 = 1;

/// Contents of an embedding file.
#[derive(Debug, Clone, PartialEq)]
pub enum Embeddings {
    F32(Matrix),
    U8(CodeBlock),
}

impl Embeddings {
    pub fn rows(&self) -> usize {
        match self {
            Embeddings::F32(m) => m.rows(),
            Embeddings::U8(c) => c.n,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Embeddings::F32(m) => m.cols(),
            Embeddings::U8(c) => c.bytes_per_vector,
        }
    }

    pub fn into_f32(self) -> Result<Matrix> {
        match self {
            Embeddings::F32(m) => Ok(m),
            Embeddings::U8(_) => Err(Error::Format("expected f32 embeddings, found u8 codes".into())),
        }
    }

    pub fn into_codes(self) -> Result<CodeBlock> {
        match self {
            Embeddings::U8(c) => Ok(c),
            Embeddings::F32(_) => Err(Error::Format("expected u8 codes, found f32 embeddings".into())),
        }
    }
}

pub fn write_embeddings<W: Write>(w: &mut W, emb: &Embeddings) -> Result<()> {
    let mut out = ByteWriter::default();
    out.bytes(EMBEDDING_MAGIC);
    out.u64(emb.rows() as u64);
    out.u32(dim_u32(emb.dim())?);
    match emb {
        Embeddings::F32(m) => {
            out.u8(DTYPE_F32);
            out.f32s(m.as_slice());
        }
        Embeddings::U8(c) => {
            out.u8(DTYPE_U8);
            out.bytes(&c.codes);
        }
    }
    w.write_all(&out.into_inner())?;
    Ok(())
}

pub fn read_embeddings<R: Read>(r: &mut R) -> Result<Embeddings> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut rd = ByteReader::new(&buf);
    rd.expect_magic(EMBEDDING_MAGIC)?;
    let n = usize::try_from(rd.u64()?).map_err(|_| Error::Format("row count overflows".into()))?;
    let d = rd.u32()? as usize;
    let dtype = rd.u8()?;
    let total = n
        .checked_mul(d)
        .ok_or_else(|| Error::Format("payload size overflows".into()))?;
    let emb = match dtype {
        DTYPE_F32 => Embeddings::F32(Matrix::new(n, d, rd.f32s(total)?)?),
        DTYPE_U8 => Embeddings::U8(CodeBlock::new(n, d, rd.take(total)?.to_vec())?),
        other => return Err(Error::Format(format!("unknown dtype tag {other}"))),
    };
    rd.finish()?;
    Ok(emb)
}

pub fn save_embeddings(path: &Path, emb: &Embeddings) -> Result<()> {
    let mut buf = Vec::new();
    write_embeddings(&mut buf, emb)?;
    write_atomic(path, &buf)
}

pub fn load_embeddings(path: &Path) -> Result<Embeddings> {
    let mut f = fs::File::open(path)?;
    read_embeddings(&mut f)
}

/// Writes `bytes` to a sibling temp file and renames it over `path`, so a
/// reader never observes a partially written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::Io(io::Error::new(io::ErrorKind::InvalidInput, "path has no file name")))?;
    let tmp = dir.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

pub(crate) fn dim_u32(d: usize) -> Result<u32> {
    u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} does not fit in u32")))
}

#[derive(Default)]
pub(crate) struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32s(&mut self, values: &[f64]) {
        self.buf.reserve(values.len() * 4);
        for &v in values {
            self.buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }

    pub fn into_inner(self) -> Vec<u8> {
        self.buf
    }
}

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                Error::Format(format!(
                    "truncated: wanted {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.buf.len()
                ))
            })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn expect_magic(&mut self, magic: &[u8; 8]) -> Result<()> {
        let got = self.take(8)?;
        if got != magic {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(magic)
            )));
        }
        Ok(())
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("payload overflows".into()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect())
    }

    pub fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        Matrix::new(rows, cols, self.f32s(rows * cols)?)
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}
