//! Deterministic persistence: binary checkpoints of named tensors with a
//! trailing CRC32, weight-delta extraction between checkpoints, and a flat
//! `key = value` run-config text format.
//!
//! Checkpoint layout: magic `MLRA`, version u32 LE, tensor count u32 LE,
//! then per tensor: name length u16 LE + UTF-8 name, dtype tag u8
//! (0 = single, 1 = double), rank u8, dims u32 LE each, row-major payload
//! LE; the file ends with a CRC32 of all preceding bytes.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numlin::{DenseMatrix, Precision};

const MAGIC: &[u8; 4] = b"MLRA";
pub const FORMAT_VERSION: u32 = 1;

/// Reserved tensor name carrying checkpoint metadata.
const META_NAME: &str = "__meta";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CheckpointMeta {
    pub config_digest: u64,
    pub seed: u64,
    pub step: u64,
}

/// Named-tensor container with deterministic binary serialization.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub version: u32,
    pub meta: CheckpointMeta,
    tensors: BTreeMap<String, DenseMatrix>,
}

impl Checkpoint {
    pub fn new(meta: CheckpointMeta) -> Self {
        Checkpoint {
            version: FORMAT_VERSION,
            meta,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, tensor: DenseMatrix) -> Result<()> {
        if name == META_NAME {
            return Err(Error::Format(format!("tensor name {META_NAME} is reserved")));
        }
        if self.tensors.contains_key(name) {
            return Err(Error::Format(format!("duplicate tensor name {name}")));
        }
        self.tensors.insert(name.to_string(), tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&DenseMatrix> {
        self.tensors.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&str, &DenseMatrix)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// The exact on-disk byte form.
    pub fn encode_bytes(&self) -> Vec<u8> {
        self.encode()
    }

    fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&self.version.to_le_bytes());
        let count = self.tensors.len() as u32 + 1; // +1 for metadata record
        buf.extend_from_slice(&count.to_le_bytes());

        // metadata as a reserved rank-1 double record of 3 u64 bit patterns
        write_record_dtype_header(&mut buf, META_NAME, 1, &[3]);
        for word in [self.meta.config_digest, self.meta.seed, self.meta.step] {
            buf.extend_from_slice(&word.to_le_bytes());
        }

        for (name, tensor) in &self.tensors {
            let dtype = match tensor.precision() {
                Precision::Single => 0u8,
                Precision::Double => 1u8,
            };
            write_record_dtype_header(
                &mut buf,
                name,
                dtype,
                &[tensor.rows() as u32, tensor.cols() as u32],
            );
            match tensor.precision() {
                Precision::Single => {
                    for &x in tensor.data() {
                        buf.extend_from_slice(&(x as f32).to_le_bytes());
                    }
                }
                Precision::Double => {
                    for &x in tensor.data() {
                        buf.extend_from_slice(&x.to_le_bytes());
                    }
                }
            }
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        buf
    }
}

fn write_record_dtype_header(buf: &mut Vec<u8>, name: &str, dtype: u8, dims: &[u32]) {
    let name_bytes = name.as_bytes();
    buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
    buf.extend_from_slice(name_bytes);
    buf.push(dtype);
    buf.push(dims.len() as u8);
    for &d in dims {
        buf.extend_from_slice(&d.to_le_bytes());
    }
}

/// Atomic write: temp file in the target directory, then rename.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = ckpt.encode();
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    decode_checkpoint(&bytes)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("truncated checkpoint file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + 4 + 4 + 4 {
        return Err(Error::Format("checkpoint file too short".into()));
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored_crc = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    if crc32fast::hash(body) != stored_crc {
        return Err(Error::Format("CRC mismatch".into()));
    }
    let mut c = Cursor { bytes: body, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = c.u32()?;
    let mut ckpt = Checkpoint::new(CheckpointMeta::default());
    let mut seen_meta = false;
    for _ in 0..count {
        let name_len = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| Error::Format("tensor name not UTF-8".into()))?
            .to_string();
        let dtype = c.u8()?;
        let rank = c.u8()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(c.u32()? as usize);
        }
        if name == META_NAME {
            if seen_meta || rank != 1 || dims[0] != 3 || dtype != 1 {
                return Err(Error::Format("malformed metadata record".into()));
            }
            ckpt.meta = CheckpointMeta {
                config_digest: c.u64()?,
                seed: c.u64()?,
                step: c.u64()?,
            };
            seen_meta = true;
            continue;
        }
        if rank != 2 {
            return Err(Error::Format(format!("tensor {name}: rank {rank} unsupported")));
        }
        let (rows, cols) = (dims[0], dims[1]);
        let numel = rows * cols;
        let mut data = Vec::with_capacity(numel);
        match dtype {
            0 => {
                for _ in 0..numel {
                    data.push(f32::from_le_bytes(c.take(4)?.try_into().unwrap()) as f64);
                }
            }
            1 => {
                for _ in 0..numel {
                    data.push(f64::from_le_bytes(c.take(8)?.try_into().unwrap()));
                }
            }
            t => return Err(Error::Format(format!("tensor {name}: unknown dtype {t}"))),
        }
        let mut tensor = DenseMatrix::from_vec(rows, cols, data)
            .map_err(|e| Error::Format(format!("tensor {name}: {e}")))?;
        if dtype == 0 {
            tensor = tensor.with_precision(Precision::Single);
        }
        ckpt.insert(&name, tensor)?;
    }
    if !seen_meta {
        return Err(Error::Format("missing metadata record".into()));
    }
    if c.pos != body.len() {
        return Err(Error::Format("trailing bytes after last tensor".into()));
    }
    Ok(ckpt)
}

/// ΔW for one site: tuned minus base.
pub fn delta_from_checkpoints(
    base: &Checkpoint,
    tuned: &Checkpoint,
    site: &str,
) -> Result<DenseMatrix> {
    let b = base
        .get(site)
        .ok_or_else(|| Error::Argument(format!("site {site} missing from base checkpoint")))?;
    let t = tuned
        .get(site)
        .ok_or_else(|| Error::Argument(format!("site {site} missing from tuned checkpoint")))?;
    if b.rows() != t.rows() || b.cols() != t.cols() {
        return Err(Error::Argument(format!(
            "site {site}: shape mismatch {}x{} vs {}x{}",
            b.rows(),
            b.cols(),
            t.rows(),
            t.cols()
        )));
    }
    t.sub(b)
}

/// Parse a flat `key = value` config text. `#` starts a comment.
pub fn parse_config_text(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Format(format!(
                "config line {}: expected `key = value`, got {raw:?}",
                lineno + 1
            )));
        };
        out.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(out)
}

pub fn format_config_text(entries: &BTreeMap<String, String>) -> String {
    let mut s = String::new();
    for (k, v) in entries {
        s.push_str(&format!("{k} = {v}\n"));
    }
    s
}
