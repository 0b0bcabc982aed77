//! The `PLM1` model container.
//!
//! Layout (little-endian throughout):
//!
//! ```text
//! magic "PLM1" | version u32 | n_metadata u64 | n_tensors u64
//! metadata entries: key (u64 len + UTF-8) | type tag u32 | value
//! tensor directory: name (u64 len + UTF-8) | n_dims u32 | dims u64 × n | dtype u32 | offset u64
//! zero padding to alignment
//! payload
//! ```
//!
//! Tensor offsets are relative to the start of the payload and are multiples of
//! the container alignment (32 unless overridden by `general.alignment`).

use std::collections::HashMap;
use std::fmt;
use std::io::{self, Write};
use std::path::Path;

use indexmap::IndexMap;
use thiserror::Error;

use crate::quant::DType;

pub const MAGIC: [u8; 4] = *b"PLM1";
pub const VERSION: u32 = 1;
pub const DEFAULT_ALIGNMENT: usize = 32;
/// Metadata key overriding the default alignment.
pub const ALIGNMENT_KEY: &str = "general.alignment";
pub const MAX_DIMS: usize = 4;
const MAX_NESTING: usize = 8;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("bad magic {0:02x?}, expected \"PLM1\"")]
    BadMagic([u8; 4]),
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated: need {needed} bytes at offset {offset}, file has {len}")]
    Truncated { offset: u64, needed: u64, len: u64 },
    #[error("tensor {name:?} offset {offset} is not a multiple of alignment {alignment}")]
    MisalignedTensor {
        name: String,
        offset: u64,
        alignment: usize,
    },
    #[error("duplicate tensor name {0:?}")]
    DuplicateTensorName(String),
    #[error("unknown value type tag {tag} at offset {offset}")]
    BadTypeTag { tag: u32, offset: u64 },
    #[error("invalid UTF-8 text at offset {offset}")]
    InvalidUtf8 { offset: u64 },
    #[error("invalid alignment {0}; must be a power of two")]
    BadAlignment(u64),
    #[error("invalid tensor {name:?}: {reason}")]
    InvalidTensor { name: String, reason: String },
    #[error("tensors {0:?} and {1:?} overlap")]
    OverlappingTensors(String, String),
    #[error("malformed metadata {key:?}: {reason}")]
    BadMetadata { key: String, reason: String },
    #[error("container invariant violated: {0}")]
    InvariantViolation(String),
    #[error("tensor {0:?} not found")]
    NotFound(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Wire tag of a metadata value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ValueType {
    U8,
    I8,
    U16,
    I16,
    U32,
    I32,
    F32,
    Bool,
    Str,
    Array,
    U64,
    I64,
    F64,
}

impl ValueType {
    const ALL: [ValueType; 13] = [
        ValueType::U8,
        ValueType::I8,
        ValueType::U16,
        ValueType::I16,
        ValueType::U32,
        ValueType::I32,
        ValueType::F32,
        ValueType::Bool,
        ValueType::Str,
        ValueType::Array,
        ValueType::U64,
        ValueType::I64,
        ValueType::F64,
    ];

    pub fn tag(self) -> u32 {
        Self::ALL.iter().position(|&t| t == self).unwrap() as u32
    }

    pub fn from_tag(tag: u32) -> Option<Self> {
        Self::ALL.get(tag as usize).copied()
    }

    /// Smallest encoded size of a value of this type.
    fn min_size(self) -> u64 {
        match self {
            ValueType::U8 | ValueType::I8 | ValueType::Bool => 1,
            ValueType::U16 | ValueType::I16 => 2,
            ValueType::U32 | ValueType::I32 | ValueType::F32 => 4,
            ValueType::U64 | ValueType::I64 | ValueType::F64 | ValueType::Str => 8,
            ValueType::Array => 12,
        }
    }
}

impl fmt::Display for ValueType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ValueType::U8 => "u8",
            ValueType::I8 => "i8",
            ValueType::U16 => "u16",
            ValueType::I16 => "i16",
            ValueType::U32 => "u32",
            ValueType::I32 => "i32",
            ValueType::F32 => "f32",
            ValueType::Bool => "bool",
            ValueType::Str => "str",
            ValueType::Array => "array",
            ValueType::U64 => "u64",
            ValueType::I64 => "i64",
            ValueType::F64 => "f64",
        };
        f.write_str(s)
    }
}

/// A typed metadata value.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    U8(u8),
    I8(i8),
    U16(u16),
    I16(i16),
    U32(u32),
    I32(i32),
    U64(u64),
    I64(i64),
    F32(f32),
    F64(f64),
    Bool(bool),
    Str(String),
    Array(Array),
}

/// Homogeneous array of values. The element type is kept explicitly so empty
/// arrays round-trip.
#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    elem: ValueType,
    items: Vec<Value>,
}

impl Array {
    pub fn new(elem: ValueType, items: Vec<Value>) -> Result<Self, ContainerError> {
        if let Some(bad) = items.iter().find(|v| v.value_type() != elem) {
            return Err(ContainerError::InvariantViolation(format!(
                "array of {elem} contains a {}",
                bad.value_type()
            )));
        }
        Ok(Self { elem, items })
    }

    pub fn elem_type(&self) -> ValueType {
        self.elem
    }

    pub fn items(&self) -> &[Value] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

impl Value {
    pub fn value_type(&self) -> ValueType {
        match self {
            Value::U8(_) => ValueType::U8,
            Value::I8(_) => ValueType::I8,
            Value::U16(_) => ValueType::U16,
            Value::I16(_) => ValueType::I16,
            Value::U32(_) => ValueType::U32,
            Value::I32(_) => ValueType::I32,
            Value::U64(_) => ValueType::U64,
            Value::I64(_) => ValueType::I64,
            Value::F32(_) => ValueType::F32,
            Value::F64(_) => ValueType::F64,
            Value::Bool(_) => ValueType::Bool,
            Value::Str(_) => ValueType::Str,
            Value::Array(_) => ValueType::Array,
        }
    }

    pub fn strings<I, S>(items: I) -> Value
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Value::Array(Array {
            elem: ValueType::Str,
            items: items.into_iter().map(|s| Value::Str(s.into())).collect(),
        })
    }

    pub fn f32s(items: impl IntoIterator<Item = f32>) -> Value {
        Value::Array(Array {
            elem: ValueType::F32,
            items: items.into_iter().map(Value::F32).collect(),
        })
    }

    pub fn u32s(items: impl IntoIterator<Item = u32>) -> Value {
        Value::Array(Array {
            elem: ValueType::U32,
            items: items.into_iter().map(Value::U32).collect(),
        })
    }

    /// Any non-negative integer value, widened.
    pub fn as_u64(&self) -> Option<u64> {
        match *self {
            Value::U8(v) => Some(v as u64),
            Value::U16(v) => Some(v as u64),
            Value::U32(v) => Some(v as u64),
            Value::U64(v) => Some(v),
            Value::I8(v) => u64::try_from(v).ok(),
            Value::I16(v) => u64::try_from(v).ok(),
            Value::I32(v) => u64::try_from(v).ok(),
            Value::I64(v) => u64::try_from(v).ok(),
            _ => None,
        }
    }

    pub fn as_f32(&self) -> Option<f32> {
        match *self {
            Value::F32(v) => Some(v),
            Value::F64(v) => Some(v as f32),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Value::Str(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_array(&self) -> Option<&Array> {
        match self {
            Value::Array(a) => Some(a),
            _ => None,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::U8(v) => write!(f, "{v}"),
            Value::I8(v) => write!(f, "{v}"),
            Value::U16(v) => write!(f, "{v}"),
            Value::I16(v) => write!(f, "{v}"),
            Value::U32(v) => write!(f, "{v}"),
            Value::I32(v) => write!(f, "{v}"),
            Value::U64(v) => write!(f, "{v}"),
            Value::I64(v) => write!(f, "{v}"),
            Value::F32(v) => write!(f, "{v}"),
            Value::F64(v) => write!(f, "{v}"),
            Value::Bool(v) => write!(f, "{v}"),
            Value::Str(s) => write!(f, "{s:?}"),
            Value::Array(a) => {
                const SHOWN: usize = 4;
                write!(f, "[{}; {}]", a.elem, a.len())?;
                if !a.is_empty() {
                    f.write_str(" ")?;
                    for (i, v) in a.items.iter().take(SHOWN).enumerate() {
                        if i > 0 {
                            f.write_str(", ")?;
                        }
                        write!(f, "{v}")?;
                    }
                    if a.len() > SHOWN {
                        f.write_str(", ...")?;
                    }
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorDescriptor {
    pub name: String,
    /// Row-major, innermost dimension last.
    pub dims: Vec<u64>,
    pub dtype: DType,
    /// Byte offset from the start of the payload.
    pub offset: u64,
}

impl TensorDescriptor {
    pub fn n_elements(&self) -> u64 {
        self.dims.iter().product()
    }

    /// Encoded size in bytes. Only meaningful for a validated descriptor.
    pub fn byte_len(&self) -> u64 {
        self.dtype
            .encoded_len(self.n_elements() as usize)
            .unwrap_or(0) as u64
    }

    fn check(&self) -> Result<u64, ContainerError> {
        let bad = |reason: String| ContainerError::InvalidTensor {
            name: self.name.clone(),
            reason,
        };
        if self.dims.is_empty() || self.dims.len() > MAX_DIMS {
            return Err(bad(format!("{} dims, expected 1..={MAX_DIMS}", self.dims.len())));
        }
        if self.dims.contains(&0) {
            return Err(bad("zero-sized dimension".into()));
        }
        let n = self
            .dims
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n <= usize::MAX as u64 / 4)
            .ok_or_else(|| bad("element count overflows".into()))?;
        let inner = *self.dims.last().unwrap();
        let block = self.dtype.block_len() as u64;
        if inner % block != 0 {
            return Err(bad(format!(
                "innermost dim {inner} is not a multiple of the {} block length {block}",
                self.dtype
            )));
        }
        Ok(self.dtype.encoded_len(n as usize).unwrap() as u64)
    }
}

/// A parsed model file: ordered metadata, tensor directory and payload.
#[derive(Debug, Clone)]
pub struct ModelContainer {
    pub version: u32,
    metadata: IndexMap<String, Value>,
    tensors: Vec<TensorDescriptor>,
    alignment: usize,
    payload: Vec<u8>,
    index: HashMap<String, usize>,
}

impl PartialEq for ModelContainer {
    fn eq(&self, other: &Self) -> bool {
        self.version == other.version
            && self.alignment == other.alignment
            && self.metadata.len() == other.metadata.len()
            && self.metadata.iter().eq(other.metadata.iter())
            && self.tensors == other.tensors
            && self.payload == other.payload
    }
}

impl Default for ModelContainer {
    fn default() -> Self {
        Self::new()
    }
}

fn align_up(n: usize, alignment: usize) -> usize {
    n.div_ceil(alignment) * alignment
}

impl ModelContainer {
    pub fn new() -> Self {
        Self {
            version: VERSION,
            metadata: IndexMap::new(),
            tensors: Vec::new(),
            alignment: DEFAULT_ALIGNMENT,
            payload: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Changes the alignment, recording it under [`ALIGNMENT_KEY`].
    /// Only allowed before any tensor has been added.
    pub fn set_alignment(&mut self, alignment: usize) -> Result<(), ContainerError> {
        if !alignment.is_power_of_two() || alignment > u32::MAX as usize {
            return Err(ContainerError::BadAlignment(alignment as u64));
        }
        if !self.tensors.is_empty() {
            return Err(ContainerError::InvariantViolation(
                "alignment must be set before adding tensors".into(),
            ));
        }
        self.alignment = alignment;
        self.metadata
            .insert(ALIGNMENT_KEY.to_string(), Value::U32(alignment as u32));
        Ok(())
    }

    pub fn alignment(&self) -> usize {
        self.alignment
    }

    pub fn metadata(&self) -> &IndexMap<String, Value> {
        &self.metadata
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        self.metadata.get(key)
    }

    /// Inserts or replaces a metadata entry. Replacing keeps the original position.
    pub fn set(&mut self, key: impl Into<String>, value: Value) {
        self.metadata.insert(key.into(), value);
    }

    pub fn tensors(&self) -> &[TensorDescriptor] {
        &self.tensors
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    /// Appends a tensor at the next aligned payload offset.
    pub fn add_tensor(
        &mut self,
        name: impl Into<String>,
        dims: &[u64],
        dtype: DType,
        data: &[u8],
    ) -> Result<&TensorDescriptor, ContainerError> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(ContainerError::DuplicateTensorName(name));
        }
        let offset = align_up(self.payload.len(), self.alignment);
        let desc = TensorDescriptor {
            name,
            dims: dims.to_vec(),
            dtype,
            offset: offset as u64,
        };
        let size = desc.check()?;
        if size != data.len() as u64 {
            return Err(ContainerError::InvalidTensor {
                name: desc.name,
                reason: format!("expected {size} bytes of data, got {}", data.len()),
            });
        }
        self.payload.resize(offset, 0);
        self.payload.extend_from_slice(data);
        self.payload
            .resize(align_up(self.payload.len(), self.alignment), 0);
        self.index.insert(desc.name.clone(), self.tensors.len());
        self.tensors.push(desc);
        Ok(self.tensors.last().unwrap())
    }

    /// Descriptor and encoded bytes of the named tensor.
    pub fn get_tensor(&self, name: &str) -> Result<(&TensorDescriptor, &[u8]), ContainerError> {
        let &i = self
            .index
            .get(name)
            .ok_or_else(|| ContainerError::NotFound(name.to_string()))?;
        let desc = &self.tensors[i];
        let start = desc.offset as usize;
        Ok((desc, &self.payload[start..start + desc.byte_len() as usize]))
    }

    /// Checks every container invariant.
    pub fn validate(&self) -> Result<(), ContainerError> {
        if !self.alignment.is_power_of_two() {
            return Err(ContainerError::BadAlignment(self.alignment as u64));
        }
        match self.metadata.get(ALIGNMENT_KEY) {
            Some(v) if v.as_u64() != Some(self.alignment as u64) => {
                return Err(ContainerError::InvariantViolation(format!(
                    "{ALIGNMENT_KEY} = {v} disagrees with alignment {}",
                    self.alignment
                )))
            }
            None if self.alignment != DEFAULT_ALIGNMENT => {
                return Err(ContainerError::InvariantViolation(format!(
                    "non-default alignment {} requires {ALIGNMENT_KEY}",
                    self.alignment
                )))
            }
            _ => {}
        }
        for v in self.metadata.values() {
            check_homogeneous(v)?;
        }
        validate_tensors(&self.tensors, self.alignment, self.payload.len() as u64)?;
        Ok(())
    }

    /// Reads and parses a container file.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, ContainerError> {
        let bytes = std::fs::read(path)?;
        read_container(&bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ContainerError> {
        let bytes = write_container(self)?;
        std::fs::write(path, bytes)?;
        Ok(())
    }
}

fn check_homogeneous(v: &Value) -> Result<(), ContainerError> {
    if let Value::Array(a) = v {
        for item in &a.items {
            if item.value_type() != a.elem {
                return Err(ContainerError::InvariantViolation(format!(
                    "array of {} contains a {}",
                    a.elem,
                    item.value_type()
                )));
            }
            check_homogeneous(item)?;
        }
    }
    Ok(())
}

fn validate_tensors(
    tensors: &[TensorDescriptor],
    alignment: usize,
    payload_len: u64,
) -> Result<(), ContainerError> {
    let mut seen = HashMap::with_capacity(tensors.len());
    let mut spans = Vec::with_capacity(tensors.len());
    for (i, t) in tensors.iter().enumerate() {
        if seen.insert(t.name.as_str(), i).is_some() {
            return Err(ContainerError::DuplicateTensorName(t.name.clone()));
        }
        let size = t.check()?;
        if t.offset % alignment as u64 != 0 {
            return Err(ContainerError::MisalignedTensor {
                name: t.name.clone(),
                offset: t.offset,
                alignment,
            });
        }
        match t.offset.checked_add(size) {
            Some(end) if end <= payload_len => spans.push((t.offset, end, i)),
            _ => {
                return Err(ContainerError::Truncated {
                    offset: t.offset,
                    needed: size,
                    len: payload_len,
                })
            }
        }
    }
    spans.sort_unstable();
    for w in spans.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(ContainerError::OverlappingTensors(
                tensors[w[0].2].name.clone(),
                tensors[w[1].2].name.clone(),
            ));
        }
    }
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: u64) -> Result<&'a [u8], ContainerError> {
        let remaining = (self.buf.len() - self.pos) as u64;
        if n > remaining {
            return Err(self.truncated(n));
        }
        let s = &self.buf[self.pos..self.pos + n as usize];
        self.pos += n as usize;
        Ok(s)
    }

    fn truncated(&self, needed: u64) -> ContainerError {
        ContainerError::Truncated {
            offset: self.pos as u64,
            needed,
            len: self.buf.len() as u64,
        }
    }

    fn remaining(&self) -> u64 {
        (self.buf.len() - self.pos) as u64
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], ContainerError> {
        Ok(self.take(N as u64)?.try_into().unwrap())
    }

    fn u32(&mut self) -> Result<u32, ContainerError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64, ContainerError> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn string(&mut self) -> Result<String, ContainerError> {
        let len = self.u64()?;
        let offset = self.pos as u64;
        let bytes = self.take(len)?;
        std::str::from_utf8(bytes)
            .map(str::to_owned)
            .map_err(|_| ContainerError::InvalidUtf8 { offset })
    }

    fn value_type(&mut self) -> Result<ValueType, ContainerError> {
        let offset = self.pos as u64;
        let tag = self.u32()?;
        ValueType::from_tag(tag).ok_or(ContainerError::BadTypeTag { tag, offset })
    }

    fn value(&mut self, ty: ValueType, depth: usize) -> Result<Value, ContainerError> {
        Ok(match ty {
            ValueType::U8 => Value::U8(self.array::<1>()?[0]),
            ValueType::I8 => Value::I8(self.array::<1>()?[0] as i8),
            ValueType::U16 => Value::U16(u16::from_le_bytes(self.array()?)),
            ValueType::I16 => Value::I16(i16::from_le_bytes(self.array()?)),
            ValueType::U32 => Value::U32(self.u32()?),
            ValueType::I32 => Value::I32(i32::from_le_bytes(self.array()?)),
            ValueType::U64 => Value::U64(self.u64()?),
            ValueType::I64 => Value::I64(i64::from_le_bytes(self.array()?)),
            ValueType::F32 => Value::F32(f32::from_le_bytes(self.array()?)),
            ValueType::F64 => Value::F64(f64::from_le_bytes(self.array()?)),
            ValueType::Bool => {
                let offset = self.pos as u64;
                match self.array::<1>()?[0] {
                    0 => Value::Bool(false),
                    1 => Value::Bool(true),
                    b => {
                        return Err(ContainerError::BadMetadata {
                            key: String::new(),
                            reason: format!("bool byte {b} at offset {offset}"),
                        })
                    }
                }
            }
            ValueType::Str => Value::Str(self.string()?),
            ValueType::Array => {
                if depth >= MAX_NESTING {
                    return Err(ContainerError::BadMetadata {
                        key: String::new(),
                        reason: format!("arrays nested deeper than {MAX_NESTING}"),
                    });
                }
                let elem = self.value_type()?;
                let count = self.u64()?;
                match count.checked_mul(elem.min_size()) {
                    Some(min) if min <= self.remaining() => {}
                    _ => return Err(self.truncated(count.saturating_mul(elem.min_size()))),
                }
                let mut items = Vec::with_capacity(count as usize);
                for _ in 0..count {
                    items.push(self.value(elem, depth + 1)?);
                }
                Value::Array(Array { elem, items })
            }
        })
    }
}

/// Parses a complete container image.
pub fn read_container(bytes: &[u8]) -> Result<ModelContainer, ContainerError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = r.array()?;
    if magic != MAGIC {
        return Err(ContainerError::BadMagic(magic));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(ContainerError::UnsupportedVersion(version));
    }
    let n_metadata = r.u64()?;
    let n_tensors = r.u64()?;

    // every entry needs at least a key length and a type tag
    if n_metadata.saturating_mul(12) > r.remaining() {
        return Err(r.truncated(n_metadata.saturating_mul(12)));
    }
    let mut metadata = IndexMap::with_capacity(n_metadata as usize);
    for _ in 0..n_metadata {
        let key = r.string()?;
        let ty = r.value_type()?;
        let value = r.value(ty, 0).map_err(|e| match e {
            ContainerError::BadMetadata { reason, .. } => ContainerError::BadMetadata {
                key: key.clone(),
                reason,
            },
            e => e,
        })?;
        if metadata.insert(key.clone(), value).is_some() {
            return Err(ContainerError::BadMetadata {
                key,
                reason: "duplicate key".into(),
            });
        }
    }

    let alignment = match metadata.get(ALIGNMENT_KEY) {
        None => DEFAULT_ALIGNMENT,
        Some(v) => match v.as_u64() {
            Some(a) if a.is_power_of_two() && a <= u32::MAX as u64 => a as usize,
            Some(a) => return Err(ContainerError::BadAlignment(a)),
            None => {
                return Err(ContainerError::BadMetadata {
                    key: ALIGNMENT_KEY.into(),
                    reason: "not an integer".into(),
                })
            }
        },
    };

    // name length + n_dims + dims[1] + dtype + offset
    const MIN_DESCRIPTOR: u64 = 8 + 4 + 8 + 4 + 8;
    if n_tensors.saturating_mul(MIN_DESCRIPTOR) > r.remaining() {
        return Err(r.truncated(n_tensors.saturating_mul(MIN_DESCRIPTOR)));
    }
    let mut tensors = Vec::with_capacity(n_tensors as usize);
    for _ in 0..n_tensors {
        let name = r.string()?;
        let n_dims = r.u32()?;
        if n_dims == 0 || n_dims as usize > MAX_DIMS {
            return Err(ContainerError::InvalidTensor {
                name,
                reason: format!("{n_dims} dims, expected 1..={MAX_DIMS}"),
            });
        }
        let dims = (0..n_dims).map(|_| r.u64()).collect::<Result<Vec<_>, _>>()?;
        let tag = r.u32()?;
        let dtype = DType::from_tag(tag).ok_or_else(|| ContainerError::InvalidTensor {
            name: name.clone(),
            reason: format!("unknown dtype tag {tag}"),
        })?;
        let offset = r.u64()?;
        tensors.push(TensorDescriptor {
            name,
            dims,
            dtype,
            offset,
        });
    }

    let payload_start = align_up(r.pos, alignment);
    if payload_start > bytes.len() {
        return Err(ContainerError::Truncated {
            offset: r.pos as u64,
            needed: (payload_start - r.pos) as u64,
            len: bytes.len() as u64,
        });
    }
    // writers pad the payload to the alignment, so a ragged tail was cut off
    let tail = (bytes.len() - payload_start) % alignment;
    if tail != 0 {
        return Err(ContainerError::Truncated {
            offset: bytes.len() as u64,
            needed: (alignment - tail) as u64,
            len: bytes.len() as u64,
        });
    }
    let payload = bytes[payload_start..].to_vec();
    validate_tensors(&tensors, alignment, payload.len() as u64)?;

    let index = tensors
        .iter()
        .enumerate()
        .map(|(i, t)| (t.name.clone(), i))
        .collect();
    Ok(ModelContainer {
        version,
        metadata,
        tensors,
        alignment,
        payload,
        index,
    })
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u64).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn write_value(out: &mut Vec<u8>, v: &Value) {
    match v {
        Value::U8(x) => out.push(*x),
        Value::I8(x) => out.push(*x as u8),
        Value::U16(x) => out.extend_from_slice(&x.to_le_bytes()),
        Value::I16(x) => out.extend_from_slice(&x.to_le_bytes()),
        Value::U32(x) => out.extend_from_slice(&x.to_le_bytes()),
        Value::I32(x) => out.extend_from_slice(&x.to_le_bytes()),
        Value::U64(x) => out.extend_from_slice(&x.to_le_bytes()),
        Value::I64(x) => out.extend_from_slice(&x.to_le_bytes()),
        Value::F32(x) => out.extend_from_slice(&x.to_le_bytes()),
        Value::F64(x) => out.extend_from_slice(&x.to_le_bytes()),
        Value::Bool(x) => out.push(*x as u8),
        Value::Str(s) => write_str(out, s),
        Value::Array(a) => {
            out.extend_from_slice(&a.elem.tag().to_le_bytes());
            out.extend_from_slice(&(a.items.len() as u64).to_le_bytes());
            for item in &a.items {
                write_value(out, item);
            }
        }
    }
}

/// Serializes a container. Bytes between tensors and trailing padding are
/// written as zeros.
pub fn write_container(container: &ModelContainer) -> Result<Vec<u8>, ContainerError> {
    container.validate().map_err(|e| match e {
        ContainerError::InvariantViolation(_) => e,
        e => ContainerError::InvariantViolation(e.to_string()),
    })?;
    let alignment = container.alignment;
    let mut out = Vec::with_capacity(64 + container.payload.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&container.version.to_le_bytes());
    out.extend_from_slice(&(container.metadata.len() as u64).to_le_bytes());
    out.extend_from_slice(&(container.tensors.len() as u64).to_le_bytes());
    for (key, value) in &container.metadata {
        write_str(&mut out, key);
        out.extend_from_slice(&value.value_type().tag().to_le_bytes());
        write_value(&mut out, value);
    }
    for t in &container.tensors {
        write_str(&mut out, &t.name);
        out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
        for d in &t.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&t.dtype.tag().to_le_bytes());
        out.extend_from_slice(&t.offset.to_le_bytes());
    }
    out.resize(align_up(out.len(), alignment), 0);

    let base = out.len();
    out.resize(base + align_up(container.payload.len(), alignment), 0);
    for t in &container.tensors {
        let start = t.offset as usize;
        let end = start + t.byte_len() as usize;
        out[base + start..base + end].copy_from_slice(&container.payload[start..end]);
    }
    Ok(out)
}

/// Streams [`write_container`] output into `w`.
pub fn write_container_to(container: &ModelContainer, mut w: impl Write) -> Result<(), ContainerError> {
    let bytes = write_container(container)?;
    w.write_all(&bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::quantize;

    fn f32_bytes(x: &[f32]) -> Vec<u8> {
        x.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    #[test]
    fn minimal_container() {
        let mut c = ModelContainer::new();
        c.set("general.name", Value::Str("tiny".into()));
        let bytes = write_container(&c).unwrap();
        assert_eq!(&bytes[..4], b"PLM1");
        assert_eq!(bytes.len() % DEFAULT_ALIGNMENT, 0);
        let back = read_container(&bytes).unwrap();
        assert!(back.tensors().is_empty());
        assert_eq!(back.get("general.name").unwrap().as_str(), Some("tiny"));
        assert_eq!(back, c);
    }

    #[test]
    fn empty_container_is_header_only() {
        let bytes = write_container(&ModelContainer::new()).unwrap();
        // 4 magic + 4 version + 8 + 8 counts, padded to 32
        assert_eq!(bytes.len(), 32);
    }

    #[test]
    fn single_f32_tensor_round_trips() {
        let mut c = ModelContainer::new();
        c.add_tensor("w", &[4], DType::F32, &f32_bytes(&[1.0, 2.0, 3.0, 4.0]))
            .unwrap();
        let back = read_container(&write_container(&c).unwrap()).unwrap();
        let (desc, data) = back.get_tensor("w").unwrap();
        assert_eq!(
            desc,
            &TensorDescriptor {
                name: "w".into(),
                dims: vec![4],
                dtype: DType::F32,
                offset: 0
            }
        );
        assert_eq!(data, f32_bytes(&[1.0, 2.0, 3.0, 4.0]).as_slice());
    }

    #[test]
    fn bq5s_payload_size() {
        let x = vec![0.5f32; 512];
        let mut c = ModelContainer::new();
        c.add_tensor("q", &[2, 256], DType::Bq5s, &quantize(&x, DType::Bq5s).unwrap())
            .unwrap();
        let (desc, data) = c.get_tensor("q").unwrap();
        // 512 * 5.5 / 8
        assert_eq!(desc.byte_len(), 352);
        assert_eq!(data.len(), 352);
    }

    #[test]
    fn not_found() {
        let c = ModelContainer::new();
        assert!(matches!(c.get_tensor("nope"), Err(ContainerError::NotFound(n)) if n == "nope"));
    }

    #[test]
    fn tensors_are_aligned_and_padding_zero() {
        let mut c = ModelContainer::new();
        c.add_tensor("a", &[3], DType::F32, &f32_bytes(&[1.0; 3])).unwrap();
        c.add_tensor("b", &[5], DType::F32, &f32_bytes(&[2.0; 5])).unwrap();
        assert_eq!(c.tensors()[1].offset, 32);
        assert!(c.payload()[12..32].iter().all(|&b| b == 0));
        let bytes = write_container(&c).unwrap();
        assert_eq!(bytes.len() % 32, 0);
    }

    #[test]
    fn custom_alignment_round_trips() {
        let mut c = ModelContainer::new();
        c.set_alignment(64).unwrap();
        c.add_tensor("a", &[3], DType::F32, &f32_bytes(&[1.0; 3])).unwrap();
        c.add_tensor("b", &[1], DType::F32, &f32_bytes(&[2.0])).unwrap();
        assert_eq!(c.tensors()[1].offset, 64);
        let back = read_container(&write_container(&c).unwrap()).unwrap();
        assert_eq!(back.alignment(), 64);
        assert_eq!(back, c);
        assert!(matches!(c.set_alignment(16), Err(ContainerError::InvariantViolation(_))));
        assert!(matches!(
            ModelContainer::new().set_alignment(24),
            Err(ContainerError::BadAlignment(24))
        ));
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let mut bytes = write_container(&ModelContainer::new()).unwrap();
        bytes[4] = 2;
        assert!(matches!(read_container(&bytes), Err(ContainerError::UnsupportedVersion(2))));
        bytes[0] = b'G';
        assert!(matches!(read_container(&bytes), Err(ContainerError::BadMagic(_))));
        assert!(matches!(read_container(b"PL"), Err(ContainerError::Truncated { .. })));
    }

    #[test]
    fn add_tensor_validation() {
        let mut c = ModelContainer::new();
        c.add_tensor("a", &[1], DType::F32, &[0; 4]).unwrap();
        assert!(matches!(
            c.add_tensor("a", &[1], DType::F32, &[0; 4]),
            Err(ContainerError::DuplicateTensorName(_))
        ));
        assert!(matches!(
            c.add_tensor("b", &[2, 16], DType::Bq8, &[0; 34]),
            Err(ContainerError::InvalidTensor { .. })
        ));
        assert!(matches!(
            c.add_tensor("c", &[1, 1, 1, 1, 1], DType::F32, &[0; 4]),
            Err(ContainerError::InvalidTensor { .. })
        ));
        assert!(matches!(
            c.add_tensor("d", &[2], DType::F32, &[0; 4]),
            Err(ContainerError::InvalidTensor { .. })
        ));
    }

    #[test]
    fn heterogeneous_array_rejected() {
        assert!(Array::new(ValueType::U32, vec![Value::U32(1), Value::F32(1.0)]).is_err());
        let ok = Array::new(ValueType::U32, vec![Value::U32(1)]).unwrap();
        assert_eq!(ok.len(), 1);
    }

    #[test]
    fn nested_arrays_and_all_scalar_types() {
        let mut c = ModelContainer::new();
        let inner = Value::u32s([1, 2, 3]);
        c.set(
            "x.nested",
            Value::Array(Array::new(ValueType::Array, vec![inner.clone(), Value::u32s([])]).unwrap()),
        );
        c.set("x.u8", Value::U8(7));
        c.set("x.i8", Value::I8(-7));
        c.set("x.u16", Value::U16(700));
        c.set("x.i16", Value::I16(-700));
        c.set("x.i32", Value::I32(-70000));
        c.set("x.u64", Value::U64(u64::MAX));
        c.set("x.i64", Value::I64(i64::MIN));
        c.set("x.f64", Value::F64(0.1));
        c.set("x.bool", Value::Bool(true));
        c.set("x.empty", Value::strings(Vec::<String>::new()));
        let back = read_container(&write_container(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        let keys: Vec<_> = back.metadata().keys().cloned().collect();
        let orig: Vec<_> = c.metadata().keys().cloned().collect();
        assert_eq!(keys, orig);
    }

    #[test]
    fn metadata_order_is_significant_for_equality() {
        let mut a = ModelContainer::new();
        a.set("a", Value::U8(1));
        a.set("b", Value::U8(2));
        let mut b = ModelContainer::new();
        b.set("b", Value::U8(2));
        b.set("a", Value::U8(1));
        assert_ne!(a, b);
    }

    #[test]
    fn huge_counts_are_truncation_not_allocation() {
        let mut bytes = write_container(&ModelContainer::new()).unwrap();
        bytes[8..16].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(read_container(&bytes), Err(ContainerError::Truncated { .. })));
        let mut bytes = write_container(&ModelContainer::new()).unwrap();
        bytes[16..24].copy_from_slice(&(1u64 << 40).to_le_bytes());
        assert!(matches!(read_container(&bytes), Err(ContainerError::Truncated { .. })));
    }

    #[test]
    fn tensor_past_payload_is_truncated() {
        let mut c = ModelContainer::new();
        c.add_tensor("a", &[8], DType::F32, &[0; 32]).unwrap();
        let bytes = write_container(&c).unwrap();
        let cut = &bytes[..bytes.len() - 4];
        assert!(matches!(read_container(cut), Err(ContainerError::Truncated { .. })));
    }

    #[test]
    fn misaligned_and_overlapping_offsets() {
        let mut c = ModelContainer::new();
        c.add_tensor("a", &[8], DType::F32, &[0; 32]).unwrap();
        c.add_tensor("b", &[8], DType::F32, &[0; 32]).unwrap();
        let bytes = write_container(&c).unwrap();
        // offset of "b" is the last 8 bytes of the directory, which ends before the padding
        let dir_end = 24 + (8 + 1 + 4 + 8 + 4 + 8) * 2;
        let mut m = bytes.clone();
        m[dir_end - 8..dir_end].copy_from_slice(&4u64.to_le_bytes());
        assert!(matches!(read_container(&m), Err(ContainerError::MisalignedTensor { .. })));
        let mut o = bytes;
        o[dir_end - 8..dir_end].copy_from_slice(&0u64.to_le_bytes());
        assert!(matches!(read_container(&o), Err(ContainerError::OverlappingTensors(..))));
    }
}
