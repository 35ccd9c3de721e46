//! `.bvt` container: a small, bit-exact binary format for dense f32/f64
//! arrays exchanged between commands and external producers.
//!
//! Layout (all little-endian):
//!
//! ```text
//! magic   4 bytes  "BVST"
//! version u32      1
//! dtype   u32      0 = f32, 1 = f64
//! ndim    u32      1..=4
//! dims    ndim x u64, outermost first
//! payload row-major scalars
//! ```
//!
//! There is no padding and no compression.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"BVST";
pub const VERSION: u32 = 1;
pub const MAX_NDIM: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u32 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }
}

/// A dense array with its shape. Construction validates the invariants, so
/// every value of this type can be written.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorContainer {
    shape: Vec<usize>,
    data: TensorData,
}

impl TensorContainer {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        validate_shape(&shape)?;
        let expected = element_count(&shape)?;
        if data.len() != expected {
            return Err(Error::domain(format!(
                "payload holds {} scalars but shape {:?} needs {}",
                data.len(),
                shape,
                expected
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn from_f64(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        Self::new(shape, TensorData::F64(values))
    }

    pub fn from_f32(shape: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        Self::new(shape, TensorData::F32(values))
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn into_data(self) -> TensorData {
        self.data
    }

    /// Payload widened to f64 (lossless for both dtypes).
    pub fn to_f64_vec(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }

    pub fn header_len(&self) -> usize {
        16 + 8 * self.shape.len()
    }

    pub fn byte_len(&self) -> usize {
        self.header_len() + self.data.len() * self.dtype().width()
    }
}

fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > MAX_NDIM {
        return Err(Error::domain(format!(
            "tensor rank must be 1..={MAX_NDIM}, got {}",
            shape.len()
        )));
    }
    if let Some(pos) = shape.iter().position(|&d| d == 0) {
        return Err(Error::domain(format!("dimension {pos} is zero in {shape:?}")));
    }
    Ok(())
}

fn element_count(shape: &[usize]) -> Result<usize> {
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::domain(format!("shape {shape:?} overflows usize")))
}

/// Counts bytes so sink failures can report where they happened.
struct CountingWriter<W> {
    inner: W,
    written: u64,
}

impl<W: Write> CountingWriter<W> {
    fn put(&mut self, bytes: &[u8]) -> Result<()> {
        self.inner.write_all(bytes).map_err(|source| Error::Io {
            offset: self.written,
            source,
        })?;
        self.written += bytes.len() as u64;
        Ok(())
    }
}

/// Writes header and payload; returns the number of bytes emitted.
pub fn write_tensor<W: Write>(t: &TensorContainer, sink: W) -> Result<u64> {
    let mut w = CountingWriter {
        inner: sink,
        written: 0,
    };
    w.put(&MAGIC)?;
    w.put(&VERSION.to_le_bytes())?;
    w.put(&t.dtype().code().to_le_bytes())?;
    w.put(&(t.shape.len() as u32).to_le_bytes())?;
    for &d in &t.shape {
        w.put(&(d as u64).to_le_bytes())?;
    }
    // Chunked so large payloads do not need a second full-size buffer.
    const CHUNK: usize = 8192;
    let mut buf = Vec::with_capacity(CHUNK * 8);
    match &t.data {
        TensorData::F32(v) => {
            for chunk in v.chunks(CHUNK) {
                buf.clear();
                chunk.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes()));
                w.put(&buf)?;
            }
        }
        TensorData::F64(v) => {
            for chunk in v.chunks(CHUNK) {
                buf.clear();
                chunk.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes()));
                w.put(&buf)?;
            }
        }
    }
    let offset = w.written;
    w.inner
        .flush()
        .map_err(|source| Error::Io { offset, source })?;
    Ok(w.written)
}

/// Reads up to `n` bytes, returning how many arrived before EOF.
fn read_up_to<R: Read>(src: &mut R, buf: &mut [u8], offset: u64) -> Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match src.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => continue,
            Err(source) => {
                return Err(Error::Io {
                    offset: offset + filled as u64,
                    source,
                })
            }
        }
    }
    Ok(filled)
}

fn read_field<R: Read, const N: usize>(
    src: &mut R,
    field: &'static str,
    offset: &mut u64,
) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    let got = read_up_to(src, &mut buf, *offset)?;
    if got < N {
        return Err(Error::parse(
            field,
            format!("stream ended after {got} of {N} bytes"),
        ));
    }
    *offset += N as u64;
    Ok(buf)
}

/// Parses one container, consuming exactly its header and payload.
pub fn read_tensor<R: Read>(mut source: R) -> Result<TensorContainer> {
    let mut offset = 0u64;
    let magic: [u8; 4] = read_field(&mut source, "magic", &mut offset)?;
    if magic != MAGIC {
        return Err(Error::parse("magic", format!("expected BVST, found {magic:?}")));
    }
    let version = u32::from_le_bytes(read_field(&mut source, "version", &mut offset)?);
    if version != VERSION {
        return Err(Error::parse("version", format!("unsupported version {version}")));
    }
    let code = u32::from_le_bytes(read_field(&mut source, "dtype", &mut offset)?);
    let dtype = DType::from_code(code)
        .ok_or_else(|| Error::parse("dtype", format!("unknown dtype code {code}")))?;
    let ndim = u32::from_le_bytes(read_field(&mut source, "ndim", &mut offset)?) as usize;
    if ndim == 0 || ndim > MAX_NDIM {
        return Err(Error::parse("ndim", format!("rank {ndim} outside 1..={MAX_NDIM}")));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let d = u64::from_le_bytes(read_field(&mut source, "dims", &mut offset)?);
        if d == 0 {
            return Err(Error::parse("dims", "zero-length dimension"));
        }
        let d = usize::try_from(d).map_err(|_| Error::parse("dims", format!("{d} too large")))?;
        shape.push(d);
    }
    let count = element_count(&shape).map_err(|_| Error::parse("dims", "element count overflows"))?;
    let nbytes = count
        .checked_mul(dtype.width())
        .ok_or_else(|| Error::parse("dims", "payload size overflows"))?;

    let mut payload = Vec::new();
    let got = (&mut source)
        .take(nbytes as u64)
        .read_to_end(&mut payload)
        .map_err(|source| Error::Io { offset, source })?;
    if got < nbytes {
        return Err(Error::parse(
            "payload",
            format!("truncated payload: expected {nbytes} bytes, got {got}"),
        ));
    }
    let data = match dtype {
        DType::F32 => TensorData::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        ),
        DType::F64 => TensorData::F64(
            payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
                .collect(),
        ),
    };
    Ok(TensorContainer { shape, data })
}

pub fn write_file(path: impl AsRef<Path>, t: &TensorContainer) -> Result<u64> {
    let file = File::create(path.as_ref()).map_err(|source| Error::Io { offset: 0, source })?;
    write_tensor(t, BufWriter::new(file))
}

pub fn read_file(path: impl AsRef<Path>) -> Result<TensorContainer> {
    let file = File::open(path.as_ref()).map_err(|source| Error::Io { offset: 0, source })?;
    read_tensor(BufReader::new(file))
}
