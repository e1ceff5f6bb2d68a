//! Versioned binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    b"GRN1"
//! version  u32 (currently 1)
//! meta     u32 length + UTF-8 `key=value` lines (config hash, notes)
//! count    u32 parameters
//! manifest per parameter: path (u32 len + UTF-8), dtype u8,
//!          ndim u32, extents u32 each
//! payload  raw little-endian scalars, manifest order
//! crc32    u32 over every preceding byte
//! ```
//!
//! Round-trips are bit-exact: the payload stores the in-memory bit pattern.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::{Dtype, Elem, ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"GRN1";
pub const VERSION: u32 = 1;

/// CRC-32 (IEEE 802.3, reflected, polynomial 0xEDB88320).
pub fn crc32(bytes: &[u8]) -> u32 {
    let mut table = [0u32; 256];
    for (i, entry) in table.iter_mut().enumerate() {
        let mut c = i as u32;
        for _ in 0..8 {
            c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
        }
        *entry = c;
    }
    let mut crc = 0xFFFF_FFFFu32;
    for &b in bytes {
        crc = table[((crc ^ b as u32) & 0xFF) as usize] ^ (crc >> 8);
    }
    crc ^ 0xFFFF_FFFF
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_str(out: &mut Vec<u8>, s: &str) {
    push_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.path, "truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::format(self.path, "non-UTF-8 string"))
    }
}

/// Serialize a parameter store with metadata.
pub fn encode<E: Elem>(params: &ParamStore<E>, meta: &BTreeMap<String, String>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    push_u32(&mut out, VERSION);
    let meta_text: String =
        meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect::<Vec<_>>().concat();
    push_str(&mut out, &meta_text);
    push_u32(&mut out, params.len() as u32);
    for (name, tensor) in params.iter() {
        push_str(&mut out, name);
        out.push(E::DTYPE.tag());
        push_u32(&mut out, tensor.shape().len() as u32);
        for &extent in tensor.shape() {
            push_u32(&mut out, extent as u32);
        }
    }
    for (_, tensor) in params.iter() {
        for &v in tensor.data() {
            v.write_le(&mut out);
        }
    }
    let crc = crc32(&out);
    push_u32(&mut out, crc);
    out
}

/// Parse a checkpoint; the stored dtype must match `E`.
pub fn decode<E: Elem>(bytes: &[u8], path: &str) -> Result<(ParamStore<E>, BTreeMap<String, String>)> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(Error::format(path, "missing GRN1 magic"));
    }
    let body = &bytes[..bytes.len() - 4];
    let stored_crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let actual = crc32(body);
    if stored_crc != actual {
        return Err(Error::format(path, format!("CRC mismatch: stored {stored_crc:#010x}, computed {actual:#010x}")));
    }
    let mut r = Reader { bytes: body, pos: 4, path };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let meta_text = r.string()?;
    let mut meta = BTreeMap::new();
    for line in meta_text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            meta.insert(k.to_string(), v.to_string());
        }
    }
    let count = r.u32()? as usize;
    let mut manifest = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.string()?;
        let dtype = Dtype::from_tag(r.u8()?)
            .ok_or_else(|| Error::format(path, "unknown dtype tag"))?;
        if dtype != E::DTYPE {
            return Err(Error::format(
                path,
                format!("dtype mismatch for {name}: stored {dtype:?}, requested {:?}", E::DTYPE),
            ));
        }
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        manifest.push((name, shape));
    }
    let mut store = ParamStore::new();
    let elem_size = E::DTYPE.size();
    for (name, shape) in manifest {
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * elem_size)?;
        let data: Vec<E> = raw.chunks_exact(elem_size).map(E::read_le).collect();
        store.insert(name, Tensor::new(shape, data))?;
    }
    if r.pos != body.len() {
        return Err(Error::format(path, "trailing bytes after payload"));
    }
    Ok((store, meta))
}

pub fn save<E: Elem>(
    path: impl AsRef<Path>,
    params: &ParamStore<E>,
    meta: &BTreeMap<String, String>,
) -> Result<()> {
    fs::write(path.as_ref(), encode(params, meta))?;
    Ok(())
}

pub fn load<E: Elem>(path: impl AsRef<Path>) -> Result<(ParamStore<E>, BTreeMap<String, String>)> {
    let bytes = fs::read(path.as_ref())?;
    decode(&bytes, &path.as_ref().display().to_string())
}
