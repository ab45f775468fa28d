//! The `ADPT` container: magic, version, a JSON header, then tensor records.
//!
//! ```text
//! "ADPT" | version u32 | header_len u64 | header (UTF-8 JSON)
//! tensor_count u64
//! per record: name_len u32 | name | dtype u8 | rank u32 | dims u64 × rank
//!             | payload_len u64 | payload (little-endian)
//! ```
//!
//! An i8 payload is `rows·cols` codes followed by `rows` f32 scales. The
//! header's `content_hash` is the SHA-256 of the header bytes (with the hash
//! field zeroed) followed by everything after the header.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, FormatError, Result};
use crate::quant::QuantizedTensor;

pub const MAGIC: [u8; 4] = *b"ADPT";
pub const VERSION: u32 = 1;
const MAX_RANK: u32 = 8;
const MAX_NAME_LEN: u32 = 1 << 16;
// name_len + dtype + rank + payload_len
const MIN_RECORD_BYTES: u64 = 4 + 1 + 4 + 8;
const HASH_PREFIX: &[u8] = b"{\"content_hash\":\"";
const HASH_HEX_LEN: usize = 64;

/// On-disk element type for floating-point tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I8(QuantizedTensor),
}

impl TensorData {
    fn tag(&self) -> u8 {
        match self {
            TensorData::F32(_) => 0,
            TensorData::F64(_) => 1,
            TensorData::I8(_) => 2,
        }
    }
}

/// A named tensor record.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    /// Floating-point tensor stored at `dtype`.
    pub fn float(name: impl Into<String>, dims: Vec<usize>, values: &[f64], dtype: Dtype) -> Self {
        let data = match dtype {
            Dtype::F32 => TensorData::F32(values.iter().map(|&x| x as f32).collect()),
            Dtype::F64 => TensorData::F64(values.to_vec()),
        };
        Self {
            name: name.into(),
            dims,
            data,
        }
    }

    pub fn quantized(name: impl Into<String>, q: QuantizedTensor) -> Self {
        Self {
            name: name.into(),
            dims: vec![q.rows(), q.cols()],
            data: TensorData::I8(q),
        }
    }

    /// Values widened to f64. `None` for int8 tensors.
    pub fn to_f64(&self) -> Option<Vec<f64>> {
        match &self.data {
            TensorData::F32(v) => Some(v.iter().map(|&x| x as f64).collect()),
            TensorData::F64(v) => Some(v.clone()),
            TensorData::I8(_) => None,
        }
    }

    fn payload_len(&self) -> u64 {
        match &self.data {
            TensorData::F32(v) => 4 * v.len() as u64,
            TensorData::F64(v) => 8 * v.len() as u64,
            TensorData::I8(q) => q.storage_bytes() as u64,
        }
    }

    fn element_count(&self) -> usize {
        match &self.data {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::I8(q) => q.codes().len(),
        }
    }

    fn encode(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&(self.name.len() as u32).to_le_bytes())?;
        w.write_all(self.name.as_bytes())?;
        w.write_all(&[self.data.tag()])?;
        w.write_all(&(self.dims.len() as u32).to_le_bytes())?;
        for &d in &self.dims {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        w.write_all(&self.payload_len().to_le_bytes())?;
        match &self.data {
            TensorData::F32(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
            TensorData::F64(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
            TensorData::I8(q) => {
                let codes: Vec<u8> = q.codes().iter().map(|&c| c as u8).collect();
                w.write_all(&codes)?;
                for s in q.scales() {
                    w.write_all(&s.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }
}

/// Structured metadata block at the front of every container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    /// Must stay the first field: the hash is located by byte offset.
    pub content_hash: String,
    pub kind: String,
    pub tensors: Vec<String>,
    pub meta: serde_json::Value,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

struct HashWriter<'a>(&'a mut Sha256);

impl Write for HashWriter<'_> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.update(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

fn io_err(path: Option<&Path>) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.map(Path::to_path_buf),
        source,
    }
}

/// Writes a container whose records come from `records`, which is called
/// twice (once to hash, once to write) and must yield the same sequence.
pub fn write_container_with<W, F>(
    mut w: W,
    kind: &str,
    meta: serde_json::Value,
    names: Vec<String>,
    records: F,
) -> Result<()>
where
    W: Write,
    F: Fn(&mut dyn FnMut(&Tensor) -> Result<()>) -> Result<()>,
{
    let mut header = Header {
        content_hash: "0".repeat(HASH_HEX_LEN),
        kind: kind.to_string(),
        tensors: names,
        meta,
    };
    let zeroed = serde_json::to_vec(&header).map_err(|e| Error::Config(format!("unserializable header: {e}")))?;
    let count = header.tensors.len() as u64;

    let mut hasher = Sha256::new();
    hasher.update(&zeroed);
    hasher.update(count.to_le_bytes());
    let mut seen = 0usize;
    records(&mut |t| {
        match header.tensors.get(seen) {
            Some(n) if *n == t.name => {}
            _ => return Err(FormatError::UndeclaredTensor(t.name.clone()).into()),
        }
        check_tensor(t)?;
        seen += 1;
        t.encode(&mut HashWriter(&mut hasher))?;
        Ok(())
    })?;
    if seen != header.tensors.len() {
        return Err(FormatError::MissingTensor(header.tensors[seen].clone()).into());
    }
    header.content_hash = hex(&hasher.finalize());
    let bytes = serde_json::to_vec(&header).map_err(|e| Error::Config(format!("unserializable header: {e}")))?;
    debug_assert_eq!(bytes.len(), zeroed.len());

    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(bytes.len() as u64).to_le_bytes())?;
    w.write_all(&bytes)?;
    w.write_all(&count.to_le_bytes())?;
    records(&mut |t| Ok(t.encode(&mut w)?))?;
    w.flush()?;
    Ok(())
}

fn check_tensor(t: &Tensor) -> Result<()> {
    let bad = |detail: String| {
        Err(FormatError::BadTensor {
            tensor: t.name.clone(),
            detail,
        }
        .into())
    };
    if t.dims.len() > MAX_RANK as usize {
        return bad(format!("rank {} exceeds {MAX_RANK}", t.dims.len()));
    }
    if t.dims.iter().product::<usize>() != t.element_count() {
        return bad(format!("{} values for dims {:?}", t.element_count(), t.dims));
    }
    if matches!(t.data, TensorData::I8(_)) && t.dims.len() != 2 {
        return bad("int8 tensors must be 2-D".into());
    }
    Ok(())
}

/// Writes an in-memory container.
pub fn write_container<W: Write>(w: W, kind: &str, meta: serde_json::Value, tensors: &[Tensor]) -> Result<()> {
    let names = tensors.iter().map(|t| t.name.clone()).collect();
    write_container_with(w, kind, meta, names, |emit| {
        for t in tensors {
            emit(t)?;
        }
        Ok(())
    })
}

pub fn save_container(path: &Path, kind: &str, meta: serde_json::Value, tensors: &[Tensor]) -> Result<()> {
    let file = File::create(path).map_err(io_err(Some(path)))?;
    write_container(BufWriter::new(file), kind, meta, tensors).map_err(|e| with_path(e, path))
}

pub(crate) fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Io { path: None, source } => Error::Io {
            path: Some(path.to_path_buf()),
            source,
        },
        other => other,
    }
}

/// A fully decoded container.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub header: Header,
    pub tensors: Vec<Tensor>,
}

impl Container {
    pub fn kind(&self) -> &str {
        &self.header.kind
    }

    pub fn meta(&self) -> &serde_json::Value {
        &self.header.meta
    }

    pub fn content_hash(&self) -> &str {
        &self.header.content_hash
    }

    /// Re-encodes to bytes. For a decoded container this reproduces the input.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        write_container(&mut out, &self.header.kind, self.header.meta.clone(), &self.tensors)?;
        Ok(out)
    }
}

/// Incremental reader. Records are decoded one at a time; the content hash,
/// tensor count and trailing-byte checks happen once the last record is read.
pub struct ContainerReader<R: Read> {
    src: R,
    remaining: u64,
    header: Header,
    hasher: Option<Sha256>,
    count: u64,
    read: u64,
}

impl<R: Read> ContainerReader<R> {
    /// `len` is the total byte length of `src`; every declared length is
    /// checked against it before anything is allocated.
    pub fn new(mut src: R, len: u64) -> Result<Self> {
        let mut remaining = len;
        let magic: [u8; 4] = take_array(&mut src, &mut remaining, || "magic".into())?;
        if magic != MAGIC {
            return Err(FormatError::BadMagic(magic).into());
        }
        let version = u32::from_le_bytes(take_array(&mut src, &mut remaining, || "version".into())?);
        if version != VERSION {
            return Err(FormatError::UnsupportedVersion(version).into());
        }
        let header_len = u64::from_le_bytes(take_array(&mut src, &mut remaining, || "header length".into())?);
        let mut raw = take_vec(&mut src, &mut remaining, header_len, || "header".into())?;
        let header: Header =
            serde_json::from_slice(&raw).map_err(|e| FormatError::Header(e.to_string()))?;
        let hash_range = HASH_PREFIX.len()..HASH_PREFIX.len() + HASH_HEX_LEN;
        if !raw.starts_with(HASH_PREFIX)
            || header.content_hash.len() != HASH_HEX_LEN
            || !header.content_hash.bytes().all(|b| b.is_ascii_hexdigit())
        {
            return Err(FormatError::Header("content_hash must be the first field, 64 hex digits".into()).into());
        }
        let mut names: Vec<&str> = header.tensors.iter().map(String::as_str).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(FormatError::DuplicateTensor(w[0].to_string()).into());
        }
        raw[hash_range].fill(b'0');
        let mut hasher = Sha256::new();
        hasher.update(&raw);

        let count_bytes = take_array(&mut src, &mut remaining, || "tensor count".into())?;
        hasher.update(count_bytes);
        let count = u64::from_le_bytes(count_bytes);
        if count != header.tensors.len() as u64 {
            return Err(FormatError::LengthMismatch {
                what: "tensor count".into(),
                declared: count,
                expected: header.tensors.len() as u64,
            }
            .into());
        }
        if count > remaining / MIN_RECORD_BYTES {
            return Err(FormatError::Truncated {
                what: format!("{count} tensor records"),
            }
            .into());
        }
        Ok(Self {
            src,
            remaining,
            header,
            hasher: Some(hasher),
            count,
            read: 0,
        })
    }

    pub fn header(&self) -> &Header {
        &self.header
    }

    /// Next record, or `None` after the last one has been read and the
    /// whole file verified.
    pub fn next_tensor(&mut self) -> Result<Option<Tensor>> {
        let Some(hasher) = self.hasher.as_mut() else {
            return Ok(None);
        };
        if self.read == self.count {
            let hasher = self.hasher.take().expect("checked above");
            if self.remaining != 0 {
                return Err(FormatError::TrailingBytes.into());
            }
            let actual = hex(&hasher.finalize());
            if actual != self.header.content_hash {
                return Err(FormatError::HashMismatch {
                    expected: self.header.content_hash.clone(),
                    actual,
                }
                .into());
            }
            return Ok(None);
        }
        let index = self.read as usize;
        let expected_name = &self.header.tensors[index];
        let src = &mut self.src;
        let rem = &mut self.remaining;

        let name_len_b = take_array(src, rem, || format!("name length of record {index}"))?;
        hasher.update(name_len_b);
        let name_len = u32::from_le_bytes(name_len_b);
        if name_len > MAX_NAME_LEN {
            return Err(FormatError::BadTensor {
                tensor: format!("record {index}"),
                detail: format!("name length {name_len} too large"),
            }
            .into());
        }
        let name_b = take_vec(src, rem, name_len as u64, || format!("name of record {index}"))?;
        hasher.update(&name_b);
        let name = String::from_utf8(name_b).map_err(|_| FormatError::BadTensor {
            tensor: format!("record {index}"),
            detail: "name is not UTF-8".into(),
        })?;
        if name != *expected_name {
            let err = if self.header.tensors[..index].contains(&name) {
                FormatError::DuplicateTensor(name)
            } else if self.header.tensors.contains(&name) {
                FormatError::MissingTensor(expected_name.clone())
            } else {
                FormatError::UndeclaredTensor(name)
            };
            return Err(err.into());
        }
        let bad = |detail: String| -> Error {
            FormatError::BadTensor {
                tensor: name.clone(),
                detail,
            }
            .into()
        };

        let [tag] = take_array(src, rem, || format!("dtype of `{name}`"))?;
        hasher.update([tag]);
        if tag > 2 {
            return Err(FormatError::UnknownDtype { tensor: name.clone(), tag }.into());
        }
        let rank_b = take_array(src, rem, || format!("rank of `{name}`"))?;
        hasher.update(rank_b);
        let rank = u32::from_le_bytes(rank_b);
        if rank > MAX_RANK {
            return Err(bad(format!("rank {rank} exceeds {MAX_RANK}")));
        }
        let mut dims = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            let b = take_array(src, rem, || format!("dims of `{name}`"))?;
            hasher.update(b);
            let d = u64::from_le_bytes(b);
            dims.push(usize::try_from(d).map_err(|_| bad(format!("dimension {d} too large")))?);
        }
        let len_b = take_array(src, rem, || format!("payload length of `{name}`"))?;
        hasher.update(len_b);
        let declared = u64::from_le_bytes(len_b);

        let elements = dims
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
            .ok_or_else(|| bad(format!("dims {dims:?} overflow")))?;
        let expected = match tag {
            0 => elements.checked_mul(4),
            1 => elements.checked_mul(8),
            _ => {
                if rank != 2 {
                    return Err(bad("int8 tensors must be 2-D".into()));
                }
                (dims[0] as u64).checked_mul(4).and_then(|s| s.checked_add(elements))
            }
        }
        .ok_or_else(|| bad(format!("dims {dims:?} overflow")))?;
        if declared != expected {
            return Err(FormatError::LengthMismatch {
                what: format!("payload of `{name}`"),
                declared,
                expected,
            }
            .into());
        }
        let payload = take_vec(src, rem, declared, || format!("payload of tensor `{name}`"))?;
        hasher.update(&payload);

        let data = match tag {
            0 => TensorData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
                    .collect(),
            ),
            1 => TensorData::F64(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                    .collect(),
            ),
            _ => {
                let n = elements as usize;
                let codes = payload[..n].iter().map(|&b| b as i8).collect();
                let scales = payload[n..]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
                    .collect();
                let q = QuantizedTensor::from_parts(dims[0], dims[1], codes, scales)
                    .map_err(|e| bad(e.to_string()))?;
                TensorData::I8(q)
            }
        };
        self.read += 1;
        Ok(Some(Tensor { name, dims, data }))
    }

    /// Reads every remaining record.
    pub fn read_all(mut self) -> Result<Container> {
        let mut tensors = Vec::new();
        while let Some(t) = self.next_tensor()? {
            tensors.push(t);
        }
        Ok(Container {
            header: self.header,
            tensors,
        })
    }
}

fn take_array<const N: usize>(
    src: &mut impl Read,
    remaining: &mut u64,
    what: impl FnOnce() -> String,
) -> Result<[u8; N]> {
    if *remaining < N as u64 {
        return Err(FormatError::Truncated { what: what() }.into());
    }
    let mut buf = [0u8; N];
    read_exact(src, &mut buf, what)?;
    *remaining -= N as u64;
    Ok(buf)
}

fn take_vec(src: &mut impl Read, remaining: &mut u64, len: u64, what: impl FnOnce() -> String) -> Result<Vec<u8>> {
    if len > *remaining {
        return Err(FormatError::Truncated { what: what() }.into());
    }
    let mut buf = vec![0u8; len as usize];
    read_exact(src, &mut buf, what)?;
    *remaining -= len;
    Ok(buf)
}

fn read_exact(src: &mut impl Read, buf: &mut [u8], what: impl FnOnce() -> String) -> Result<()> {
    src.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            FormatError::Truncated { what: what() }.into()
        } else {
            Error::from(e)
        }
    })
}

/// Decodes a container held in memory.
pub fn decode_container(bytes: &[u8]) -> Result<Container> {
    ContainerReader::new(bytes, bytes.len() as u64)?.read_all()
}

/// Opens a file for incremental reading.
pub fn open_container(path: &Path) -> Result<ContainerReader<BufReader<File>>> {
    let file = File::open(path).map_err(io_err(Some(path)))?;
    let len = file.metadata().map_err(io_err(Some(path)))?.len();
    ContainerReader::new(BufReader::new(file), len).map_err(|e| with_path(e, path))
}

pub fn load_container(path: &Path) -> Result<Container> {
    open_container(path)?.read_all().map_err(|e| with_path(e, path))
}

/// Header of a container file, without reading its records.
pub fn read_header(path: &Path) -> Result<Header> {
    Ok(open_container(path)?.header)
}

/// The content hash of an existing container file, verified by a full read.
pub fn content_hash(path: &Path) -> Result<String> {
    let c = load_container(path)?;
    Ok(c.header.content_hash)
}

