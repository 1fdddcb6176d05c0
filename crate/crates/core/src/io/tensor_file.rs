use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::DType;
use crate::tensor::Tensor;
use crate::Scalar;

const TENSOR_MAGIC: &[u8; 4] = b"BTNS";
const CHECKPOINT_MAGIC: &[u8; 4] = b"BCKP";
const VERSION: u32 = 1;

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

/// A tensor whose element type is only known at load time.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn dims(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.dims(),
            AnyTensor::F64(t) => t.dims(),
        }
    }

    /// Converted to `T` (exact when the stored dtype already is `T`).
    pub fn to<T: Scalar>(&self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

impl From<Tensor<f32>> for AnyTensor {
    fn from(t: Tensor<f32>) -> Self {
        AnyTensor::F32(t)
    }
}

impl From<Tensor<f64>> for AnyTensor {
    fn from(t: Tensor<f64>) -> Self {
        AnyTensor::F64(t)
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end =
            end.ok_or_else(|| format_err(format!("truncated input while reading {what} at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

fn encode_typed<T: Scalar>(t: &Tensor<T>, out: &mut Vec<u8>) {
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(T::DTYPE.code());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

pub fn encode_tensor(t: &AnyTensor, out: &mut Vec<u8>) {
    match t {
        AnyTensor::F32(t) => encode_typed(t, out),
        AnyTensor::F64(t) => encode_typed(t, out),
    }
}

fn decode_payload<T: Scalar>(r: &mut Reader<'_>, dims: Vec<usize>) -> Result<Tensor<T>> {
    let n: usize = dims.iter().product();
    let size = T::DTYPE.size();
    let bytes = r.take(n.checked_mul(size).ok_or_else(|| format_err("tensor too large"))?, "payload")?;
    let data = bytes.chunks_exact(size).map(T::read_le).collect();
    Tensor::new(dims, data)
}

pub(crate) fn decode_tensor(r: &mut Reader<'_>) -> Result<AnyTensor> {
    if r.take(4, "magic")? != TENSOR_MAGIC {
        return Err(format_err("bad tensor magic (expected BTNS)"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(format_err(format!("unsupported tensor version {version}")));
    }
    let code = r.take(1, "dtype")?[0];
    let dtype = DType::from_code(code).ok_or_else(|| format_err(format!("unknown dtype code {code}")))?;
    let rank = r.u32("rank")? as usize;
    let mut dims = Vec::with_capacity(rank.min(16));
    for _ in 0..rank {
        dims.push(r.u32("dims")? as usize);
    }
    Ok(match dtype {
        DType::F32 => AnyTensor::F32(decode_payload(r, dims)?),
        DType::F64 => AnyTensor::F64(decode_payload(r, dims)?),
    })
}

pub fn tensor_to_bytes(t: &AnyTensor) -> Vec<u8> {
    let mut out = Vec::new();
    encode_tensor(t, &mut out);
    out
}

pub fn tensor_from_bytes(buf: &[u8]) -> Result<AnyTensor> {
    let mut r = Reader::new(buf);
    let t = decode_tensor(&mut r)?;
    if r.pos != buf.len() {
        return Err(format_err(format!("{} trailing bytes after tensor", buf.len() - r.pos)));
    }
    Ok(t)
}

pub fn tensor_save(t: &AnyTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, tensor_to_bytes(t)).map_err(|e| Error::io(path, e))
}

pub fn tensor_load(path: impl AsRef<Path>) -> Result<AnyTensor> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    tensor_from_bytes(&buf).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Named tensors, kept sorted by name.
pub type Checkpoint = BTreeMap<String, AnyTensor>;

pub fn checkpoint_to_bytes(ck: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(ck.len() as u32).to_le_bytes());
    let mut offsets = Vec::with_capacity(ck.len());
    for (name, t) in ck {
        offsets.push(out.len() as u64);
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        encode_tensor(t, &mut out);
    }
    for o in offsets {
        out.extend_from_slice(&o.to_le_bytes());
    }
    out
}

pub fn checkpoint_from_bytes(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(buf);
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(format_err("bad checkpoint magic (expected BCKP)"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(format_err(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32("entry count")? as usize;
    let mut ck = Checkpoint::new();
    let mut offsets = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        offsets.push(r.pos as u64);
        let len = r.u32("name length")? as usize;
        let name =
            std::str::from_utf8(r.take(len, "name")?).map_err(|_| format_err("entry name is not UTF-8"))?.to_string();
        let t = decode_tensor(&mut r)?;
        if ck.insert(name.clone(), t).is_some() {
            return Err(format_err(format!("duplicate entry `{name}`")));
        }
    }
    for (i, &want) in offsets.iter().enumerate() {
        let got = r.u64("offset table")?;
        if got != want {
            return Err(format_err(format!("offset table entry {i} is {got}, entry starts at {want}")));
        }
    }
    if r.pos != buf.len() {
        return Err(format_err(format!("{} trailing bytes after offset table", buf.len() - r.pos)));
    }
    Ok(ck)
}

pub fn checkpoint_save(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, checkpoint_to_bytes(ck)).map_err(|e| Error::io(path, e))
}

pub fn checkpoint_load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&buf).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}
