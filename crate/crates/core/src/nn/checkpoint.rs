//! Versioned binary tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   b"DCPPDTC\0"
//! version      u32       currently 1
//! header_len   u64       byte length of the JSON header
//! header       JSON      {"version":1,"kind":..,"meta":..,"tensors":[{name,dtype,shape,offset,nbytes}]}
//! payload      bytes     tensors back to back; offsets are relative to the payload start
//! ```
//!
//! Tensor payloads are IEEE-754 little-endian, `dtype` is `"f32"` or `"f64"`.
//! Reading never executes anything from the file; it is plain data.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"DCPPDTC\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: [usize; 2],
    pub offset: usize,
    pub nbytes: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug)]
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Lookup(format!("container has no tensor named {name}")))
    }

    pub fn into_store(self) -> ParamStore {
        let mut store = ParamStore::new();
        for (name, t) in self.tensors {
            store.add(name, t);
        }
        store
    }
}

pub fn encode(kind: &str, meta: &serde_json::Value, tensors: &[(&str, &Tensor)], dtype: DType) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut payload = Vec::new();
    for (name, t) in tensors {
        let offset = payload.len();
        match dtype {
            DType::F32 => t.data.iter().for_each(|v| payload.extend_from_slice(&(*v as f32).to_le_bytes())),
            DType::F64 => t.data.iter().for_each(|v| payload.extend_from_slice(&v.to_le_bytes())),
        }
        entries.push(TensorEntry { name: name.to_string(), dtype, shape: [t.rows, t.cols], offset, nbytes: payload.len() - offset });
    }
    let header = Header { version: VERSION, kind: kind.to_string(), meta: meta.clone(), tensors: entries };
    let hbytes = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + hbytes.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(hbytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&hbytes);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Container> {
    let bad = |m: &str| Error::Format(format!("tensor container: {m}"));
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let hend = 20usize.checked_add(hlen).filter(|e| *e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[20..hend])?;
    let payload = &bytes[hend..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        let [rows, cols] = e.shape;
        let w = e.dtype.width();
        if e.nbytes != rows * cols * w || e.offset + e.nbytes > payload.len() {
            return Err(bad(&format!("tensor {} has inconsistent extent", e.name)));
        }
        let raw = &payload[e.offset..e.offset + e.nbytes];
        let data: Vec<f64> = match e.dtype {
            DType::F32 => raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
            DType::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
        };
        tensors.push((e.name, Tensor::from_vec(rows, cols, data)));
    }
    Ok(Container { kind: header.kind, meta: header.meta, tensors })
}

pub fn write(path: &Path, kind: &str, meta: &serde_json::Value, tensors: &[(&str, &Tensor)], dtype: DType) -> Result<()> {
    let bytes = encode(kind, meta, tensors, dtype)?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Container> {
    let bytes = fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    decode(&bytes)
}

/// Writes every parameter of `store` in id order.
pub fn write_store(path: &Path, kind: &str, meta: &serde_json::Value, store: &ParamStore, dtype: DType) -> Result<()> {
    let tensors: Vec<(&str, &Tensor)> = store.ids().map(|id| (store.name(id), store.get(id))).collect();
    write(path, kind, meta, &tensors, dtype)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f64_round_trip_is_exact_and_f32_rounds() {
        let t = Tensor::from_vec(2, 2, vec![0.1, -2.5, 1e-30, 3.0]);
        let bytes = encode("test", &serde_json::json!({"a": 1}), &[("t", &t)], DType::F64).unwrap();
        let c = decode(&bytes).unwrap();
        assert_eq!(c.kind, "test");
        assert_eq!(c.tensor("t").unwrap(), &t);

        let bytes = encode("test", &serde_json::Value::Null, &[("t", &t)], DType::F32).unwrap();
        let back = decode(&bytes).unwrap();
        let r = back.tensor("t").unwrap();
        assert_eq!(r.data[1], -2.5);
        assert_eq!(r.data[0], 0.1f32 as f64);
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode(b"not a container at all").is_err());
        let t = Tensor::zeros(1, 3);
        let mut bytes = encode("x", &serde_json::Value::Null, &[("t", &t)], DType::F32).unwrap();
        bytes.truncate(bytes.len() - 2);
        assert!(decode(&bytes).is_err());
    }
}
