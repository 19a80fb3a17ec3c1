//! Binary tensor serialization.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "CVT1" | u8 dtype (0 = f32, 1 = f64) | u32 rank | rank x u32 dims |
//! payload, row-major little-endian
//! ```

use std::fs;
use std::io::Write as _;
use std::path::Path;

use thiserror::Error;

use super::{Dtype, Scalar, Tensor};

pub const TENSOR_MAGIC: &[u8; 4] = b"CVT1";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u16, found: u16 },
    #[error("truncated payload: {context}")]
    Truncated { context: String },
    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),
    #[error("dtype mismatch: archive holds {found:?}, requested {expected:?}")]
    DtypeMismatch { expected: Dtype, found: Dtype },
    #[error("malformed metadata: {0}")]
    BadMetadata(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type IoResult<T> = std::result::Result<T, IoError>;

/// Cursor over a byte slice with truncation-aware reads.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize, context: &str) -> IoResult<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(IoError::Truncated {
                context: context.to_string(),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u8(&mut self, context: &str) -> IoResult<u8> {
        Ok(self.take(1, context)?[0])
    }

    pub fn u16(&mut self, context: &str) -> IoResult<u16> {
        let b = self.take(2, context)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub fn u32(&mut self, context: &str) -> IoResult<u32> {
        let b = self.take(4, context)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub(crate) fn check_magic(r: &mut Reader, expected: &[u8; 4]) -> IoResult<()> {
    let found = r.take(4, "magic")?;
    if found != expected {
        return Err(IoError::BadMagic {
            expected: String::from_utf8_lossy(expected).into_owned(),
            found: String::from_utf8_lossy(found).into_owned(),
        });
    }
    Ok(())
}

/// Serialize a tensor into `out`.
pub fn write_tensor<T: Scalar>(tensor: &Tensor<T>, out: &mut Vec<u8>) {
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(T::DTYPE.code());
    out.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in tensor.data() {
        v.to_le_bytes(out);
    }
}

/// Deserialize one tensor from the reader position.
pub(crate) fn read_tensor_from<T: Scalar>(r: &mut Reader) -> IoResult<Tensor<T>> {
    check_magic(r, TENSOR_MAGIC)?;
    let code = r.u8("dtype")?;
    let dtype = Dtype::from_code(code).ok_or(IoError::UnknownDtype(code))?;
    if dtype != T::DTYPE {
        return Err(IoError::DtypeMismatch {
            expected: T::DTYPE,
            found: dtype,
        });
    }
    let rank = r.u32("rank")? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u32("dims")? as usize);
    }
    let numel: usize = shape.iter().product();
    let width = T::byte_width();
    let payload = r.take(numel * width, "tensor payload")?;
    let data: Vec<T> = payload
        .chunks_exact(width)
        .map(T::from_le_slice)
        .collect();
    Ok(Tensor::from_parts(shape, data))
}

pub fn read_tensor<T: Scalar>(bytes: &[u8]) -> IoResult<Tensor<T>> {
    let mut r = Reader::new(bytes);
    read_tensor_from(&mut r)
}

pub fn save_tensor<T: Scalar>(tensor: &Tensor<T>, path: &Path) -> IoResult<()> {
    let mut buf = Vec::new();
    write_tensor(tensor, &mut buf);
    atomic_write(path, &buf)
}

pub fn load_tensor<T: Scalar>(path: &Path) -> IoResult<Tensor<T>> {
    read_tensor(&fs::read(path)?)
}

/// Write to a temporary sibling and rename into place, so readers never see a
/// partial file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> IoResult<()> {
    let tmp = path.with_extension(format!(
        "tmp.{}",
        std::process::id()
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
