//! Single-file checkpoint archive: a text manifest followed by raw
//! little-endian `f32` tensors.
//!
//! ```text
//! "MDCK" | u32 version | u64 manifest bytes | manifest (UTF-8) | tensor data
//! ```
//!
//! Manifest lines are `kind=<kind>`, `config.<key>=<value>` and
//! `tensor=<name> f32 <rows>x<cols> <byte offset> <byte length>`, offsets
//! counted from the start of the tensor data.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::binio::{read_f32s, read_header, write_f32s, write_header};
use crate::error::{Error, Result};
use crate::params::{Matrix, ParamStore};

const MAGIC: &[u8; 4] = b"MDCK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: u64,
    pub len: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: BTreeMap<String, String>,
    pub tensors: Vec<(String, Matrix)>,
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

impl Checkpoint {
    pub fn from_store(kind: &str, config: BTreeMap<String, String>, store: &ParamStore) -> Self {
        let tensors = store.iter().map(|(_, n, m)| (n.to_string(), m.clone())).collect();
        Self { kind: kind.to_string(), config, tensors }
    }

    pub fn entries(&self) -> Vec<TensorEntry> {
        let mut offset = 0u64;
        self.tensors
            .iter()
            .map(|(name, m)| {
                let len = (m.len() * 4) as u64;
                let e = TensorEntry { name: name.clone(), rows: m.nrows(), cols: m.ncols(), offset, len };
                offset += len;
                e
            })
            .collect()
    }

    pub fn manifest(&self) -> String {
        let mut s = format!("kind={}\n", self.kind);
        for (k, v) in &self.config {
            s.push_str(&format!("config.{k}={v}\n"));
        }
        for e in self.entries() {
            s.push_str(&format!("tensor={} f32 {}x{} {} {}\n", e.name, e.rows, e.cols, e.offset, e.len));
        }
        s
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        write_header(w, MAGIC, VERSION)?;
        let manifest = self.manifest();
        w.write_all(&(manifest.len() as u64).to_le_bytes())?;
        w.write_all(manifest.as_bytes())?;
        for (_, m) in &self.tensors {
            let values: Vec<f64> = m.iter().copied().collect();
            write_f32s(w, &values)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    /// Reads just the manifest, without loading tensor data.
    pub fn read_manifest(path: &Path) -> Result<String> {
        let mut f = fs::File::open(path)?;
        read_manifest_text(&mut f)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let text = read_manifest_text(r)?;
        let (kind, config, entries) = parse_manifest(&text)?;
        let mut tensors = Vec::with_capacity(entries.len());
        let mut expected = 0u64;
        for e in entries {
            if e.offset != expected || e.len != (e.rows * e.cols * 4) as u64 {
                return Err(format_err(format!("tensor {} has inconsistent offset or length", e.name)));
            }
            expected += e.len;
            let values = read_f32s(r, e.rows * e.cols)?;
            let m = Matrix::from_shape_vec((e.rows, e.cols), values).map_err(|err| format_err(err.to_string()))?;
            tensors.push((e.name, m));
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(format_err(format!("{} trailing bytes after tensor data", rest.len())));
        }
        Ok(Self { kind, config, tensors })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(format_err(format!("checkpoint kind is {}, expected {kind}", self.kind)));
        }
        Ok(())
    }

    /// Copies tensors by name into `store`; names and shapes must match
    /// exactly.
    pub fn install(&self, store: &mut ParamStore) -> Result<()> {
        if self.tensors.len() != store.len() {
            return Err(format_err(format!(
                "checkpoint has {} tensors, model expects {}",
                self.tensors.len(),
                store.len()
            )));
        }
        for (name, m) in &self.tensors {
            let id = store.id(name).ok_or_else(|| format_err(format!("unknown tensor {name}")))?;
            let dst = store.get_mut(id);
            if dst.dim() != m.dim() {
                return Err(format_err(format!("tensor {name}: shape {:?} vs {:?}", m.dim(), dst.dim())));
            }
            dst.assign(m);
        }
        Ok(())
    }
}

fn read_manifest_text(r: &mut impl Read) -> Result<String> {
    read_header(r, MAGIC, VERSION)?;
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len);
    if len > (1 << 30) {
        return Err(format_err("manifest length is implausible"));
    }
    let mut buf = vec![0u8; len as usize];
    r.read_exact(&mut buf).map_err(|e| format_err(format!("truncated manifest: {e}")))?;
    String::from_utf8(buf).map_err(|_| format_err("manifest is not UTF-8"))
}

type Manifest = (String, BTreeMap<String, String>, Vec<TensorEntry>);

fn parse_manifest(text: &str) -> Result<Manifest> {
    let mut kind = None;
    let mut config = BTreeMap::new();
    let mut entries = Vec::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (key, value) = line.split_once('=').ok_or_else(|| format_err(format!("bad manifest line: {line}")))?;
        if key == "kind" {
            kind = Some(value.to_string());
        } else if let Some(k) = key.strip_prefix("config.") {
            config.insert(k.to_string(), value.to_string());
        } else if key == "tensor" {
            entries.push(parse_tensor(value).ok_or_else(|| format_err(format!("bad tensor line: {line}")))?);
        } else {
            return Err(format_err(format!("unknown manifest key {key}")));
        }
    }
    let kind = kind.ok_or_else(|| format_err("manifest has no kind"))?;
    Ok((kind, config, entries))
}

fn parse_tensor(value: &str) -> Option<TensorEntry> {
    let mut it = value.split_whitespace();
    let name = it.next()?.to_string();
    if it.next()? != "f32" {
        return None;
    }
    let (r, c) = it.next()?.split_once('x')?;
    let entry = TensorEntry {
        name,
        rows: r.parse().ok()?,
        cols: c.parse().ok()?,
        offset: it.next()?.parse().ok()?,
        len: it.next()?.parse().ok()?,
    };
    it.next().is_none().then_some(entry)
}
