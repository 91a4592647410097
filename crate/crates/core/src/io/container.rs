//! Tensor container: a fixed little-endian header, raw tensor payloads, and a
//! trailing JSON index.
//!
//! ```text
//! offset  size  field
//! 0       8     magic "ATTNLAB\0"
//! 8       4     format version (u32)
//! 12      4     entry count (u32)
//! 16      8     index byte offset (u64)
//! 24      8     index byte length (u64)
//! 32      ...   payloads, each starting on a 16-byte boundary
//! ...           JSON index
//! ```
//!
//! The index is `{"entries": [{name, dtype, shape, offset, nbytes}], "metadata": {...}}`
//! with offsets counted from the start of the file.

use std::fs::File;
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 8] = *b"ATTNLAB\0";
pub const VERSION: u32 = 1;
const HEADER_LEN: u64 = 32;
const ALIGN: u64 = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContainerEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ContainerIndex {
    pub entries: Vec<ContainerEntry>,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

fn dtype_name(dtype: DType) -> Result<&'static str> {
    Ok(match dtype {
        DType::F32 => "f32",
        DType::F16 => "f16",
        DType::U8 => "u8",
        DType::U32 => "u32",
        DType::I64 => "i64",
        other => return Err(Error::Container(format!("unsupported dtype {other:?}"))),
    })
}

fn parse_dtype(name: &str) -> Result<DType> {
    Ok(match name {
        "f32" => DType::F32,
        "f16" => DType::F16,
        "u8" => DType::U8,
        "u32" => DType::U32,
        "i64" => DType::I64,
        other => return Err(Error::Container(format!("unknown dtype `{other}`"))),
    })
}

fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        DType::F16 => flat.to_vec1::<half::f16>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        DType::U8 => flat.to_vec1::<u8>()?,
        DType::U32 => flat.to_vec1::<u32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        DType::I64 => flat.to_vec1::<i64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        other => return Err(Error::Container(format!("unsupported dtype {other:?}"))),
    })
}

fn tensor_from_bytes(bytes: &[u8], dtype: DType, shape: &[usize], device: &Device) -> Result<Tensor> {
    let t = match dtype {
        DType::F32 => {
            let v: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(v, shape, device)?
        }
        DType::F16 => {
            let v: Vec<half::f16> = bytes
                .chunks_exact(2)
                .map(|c| half::f16::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Tensor::from_vec(v, shape, device)?
        }
        DType::U8 => Tensor::from_vec(bytes.to_vec(), shape, device)?,
        DType::U32 => {
            let v: Vec<u32> = bytes.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(v, shape, device)?
        }
        DType::I64 => {
            let v: Vec<i64> = bytes.chunks_exact(8).map(|c| i64::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(v, shape, device)?
        }
        other => return Err(Error::Container(format!("unsupported dtype {other:?}"))),
    };
    Ok(t)
}

/// Streams tensors into a container. The file appears under its final name
/// only after [`ContainerWriter::finish`].
pub struct ContainerWriter {
    out: BufWriter<File>,
    tmp: PathBuf,
    path: PathBuf,
    pos: u64,
    entries: Vec<ContainerEntry>,
}

impl ContainerWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let tmp = path.with_extension("partial");
        let mut out = BufWriter::new(File::create(&tmp)?);
        out.write_all(&[0u8; HEADER_LEN as usize])?;
        Ok(Self {
            out,
            tmp,
            path: path.to_path_buf(),
            pos: HEADER_LEN,
            entries: Vec::new(),
        })
    }

    pub fn add(&mut self, name: &str, tensor: &Tensor) -> Result<()> {
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::Container(format!("duplicate entry `{name}`")));
        }
        let pad = (ALIGN - self.pos % ALIGN) % ALIGN;
        self.out.write_all(&vec![0u8; pad as usize])?;
        self.pos += pad;
        let bytes = tensor_bytes(tensor)?;
        self.out.write_all(&bytes)?;
        self.entries.push(ContainerEntry {
            name: name.to_string(),
            dtype: dtype_name(tensor.dtype())?.to_string(),
            shape: tensor.dims().to_vec(),
            offset: self.pos,
            nbytes: bytes.len() as u64,
        });
        self.pos += bytes.len() as u64;
        Ok(())
    }

    pub fn finish(mut self, metadata: serde_json::Value) -> Result<ContainerIndex> {
        let index = ContainerIndex {
            entries: std::mem::take(&mut self.entries),
            metadata,
        };
        let json = serde_json::to_vec(&index)?;
        self.out.write_all(&json)?;
        let mut file = self.out.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        file.seek(SeekFrom::Start(0))?;
        let mut header = Vec::with_capacity(HEADER_LEN as usize);
        header.extend_from_slice(&MAGIC);
        header.extend_from_slice(&VERSION.to_le_bytes());
        header.extend_from_slice(&(index.entries.len() as u32).to_le_bytes());
        header.extend_from_slice(&self.pos.to_le_bytes());
        header.extend_from_slice(&(json.len() as u64).to_le_bytes());
        file.write_all(&header)?;
        file.sync_all()?;
        drop(file);
        std::fs::rename(&self.tmp, &self.path)?;
        Ok(index)
    }
}

/// A container opened for reading.
#[derive(Debug)]
pub struct Container {
    path: PathBuf,
    pub index: ContainerIndex,
}

impl Container {
    pub fn open(path: &Path) -> Result<Self> {
        let mut f = File::open(path)?;
        let mut header = [0u8; HEADER_LEN as usize];
        f.read_exact(&mut header)
            .map_err(|_| Error::Container("file shorter than header".into()))?;
        if header[..8] != MAGIC {
            return Err(Error::Container("bad magic".into()));
        }
        let version = u32::from_le_bytes(header[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Container(format!("unsupported version {version}")));
        }
        let count = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
        let offset = u64::from_le_bytes(header[16..24].try_into().unwrap());
        let len = u64::from_le_bytes(header[24..32].try_into().unwrap());
        f.seek(SeekFrom::Start(offset))?;
        let mut json = vec![0u8; len as usize];
        f.read_exact(&mut json)
            .map_err(|_| Error::Container("truncated index".into()))?;
        let index: ContainerIndex = serde_json::from_slice(&json)?;
        if index.entries.len() != count {
            return Err(Error::Container(format!(
                "header lists {count} entries, index has {}",
                index.entries.len()
            )));
        }
        Ok(Self {
            path: path.to_path_buf(),
            index,
        })
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.index.entries.iter().map(|e| e.name.as_str())
    }

    pub fn get(&self, name: &str, device: &Device) -> Result<Tensor> {
        let entry = self
            .index
            .entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Container(format!("no entry `{name}`")))?;
        let mut f = File::open(&self.path)?;
        f.seek(SeekFrom::Start(entry.offset))?;
        let mut bytes = vec![0u8; entry.nbytes as usize];
        f.read_exact(&mut bytes)?;
        let dtype = parse_dtype(&entry.dtype)?;
        let expected = entry.shape.iter().product::<usize>() * dtype.size_in_bytes();
        if expected != bytes.len() {
            return Err(Error::Container(format!("entry `{name}` has inconsistent size")));
        }
        tensor_from_bytes(&bytes, dtype, &entry.shape, device)
    }
}
