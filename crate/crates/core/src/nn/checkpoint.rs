//! Checkpoint container.
//!
//! Layout, bit-exact:
//! - ASCII magic `SVCKPT1\n`
//! - one UTF-8 JSON metadata line terminated by `\n`:
//!   `{"format_version":"1","kind":"<kind>","config":{...},"extras":{...},
//!     "sections":[{"name":"student","arrays":[{"name":"conv1.w",
//!     "shape":[16,1,3,3],"dtype":"f64le"},...]},...]}`
//! - the arrays' data concatenated in listed order, each value as a
//!   little-endian IEEE-754 binary64.
//!
//! `config` echoes whatever configuration produced the parameters; `extras`
//! carries scalars such as the EMA momentum and the step counter. The writer
//! is canonical (struct field order, sorted extras keys, shortest float
//! repr), so save → load → save is byte-identical.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::params::{Array, ParameterSet};

const MAGIC: &[u8; 8] = b"SVCKPT1\n";
const MAX_META_LINE: usize = 1024 * 1024;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArrayMeta {
    name: String,
    shape: Vec<usize>,
    dtype: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SectionMeta {
    name: String,
    arrays: Vec<ArrayMeta>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    format_version: String,
    kind: String,
    config: serde_json::Value,
    extras: BTreeMap<String, serde_json::Value>,
    sections: Vec<SectionMeta>,
}

/// A named bundle of parameter sets plus its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// What this checkpoint holds, e.g. "student_teacher" or "classifier".
    pub kind: String,
    /// Echo of the configuration that produced the parameters.
    pub config: serde_json::Value,
    /// Scalar extras such as momentum and step.
    pub extras: BTreeMap<String, serde_json::Value>,
    pub sections: Vec<(String, ParameterSet)>,
}

impl Checkpoint {
    pub fn section(&self, name: &str) -> Result<&ParameterSet> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, p)| p)
            .ok_or_else(|| Error::Format(format!("checkpoint has no section {name:?}")))
    }

    pub fn extra_f64(&self, key: &str) -> Result<f64> {
        self.extras
            .get(key)
            .and_then(|v| v.as_f64())
            .ok_or_else(|| Error::Format(format!("checkpoint extras missing {key:?}")))
    }

    pub fn extra_u64(&self, key: &str) -> Result<u64> {
        self.extras
            .get(key)
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Format(format!("checkpoint extras missing {key:?}")))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    save_checkpoint_to(ckpt, &mut w).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn save_checkpoint_to(ckpt: &Checkpoint, w: &mut impl Write) -> Result<()> {
    let meta = CheckpointMeta {
        format_version: "1".into(),
        kind: ckpt.kind.clone(),
        config: ckpt.config.clone(),
        extras: ckpt.extras.clone(),
        sections: ckpt
            .sections
            .iter()
            .map(|(name, params)| SectionMeta {
                name: name.clone(),
                arrays: params
                    .iter()
                    .map(|(n, a)| ArrayMeta {
                        name: n.to_string(),
                        shape: a.shape.clone(),
                        dtype: "f64le".into(),
                    })
                    .collect(),
            })
            .collect(),
    };
    let meta_line =
        serde_json::to_string(&meta).map_err(|e| Error::Format(format!("metadata: {e}")))?;
    let io = |e| Error::Io { path: "<writer>".into(), source: e };
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(meta_line.as_bytes()).map_err(io)?;
    w.write_all(b"\n").map_err(io)?;
    let mut buf = Vec::new();
    for (_, params) in &ckpt.sections {
        for (_, array) in params.iter() {
            for &v in &array.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    w.write_all(&buf).map_err(io)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    load_checkpoint_from(&mut r).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn load_checkpoint_from(r: &mut impl Read) -> Result<Checkpoint> {
    let io = |e| Error::Io { path: "<reader>".into(), source: e };
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let mut meta_bytes = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        r.read_exact(&mut byte).map_err(|_| Error::Format("metadata line not terminated".into()))?;
        if byte[0] == b'\n' {
            break;
        }
        meta_bytes.push(byte[0]);
        if meta_bytes.len() > MAX_META_LINE {
            return Err(Error::Format("metadata line exceeds 1 MiB".into()));
        }
    }
    let meta: CheckpointMeta = serde_json::from_slice(&meta_bytes)
        .map_err(|e| Error::Format(format!("malformed metadata: {e}")))?;
    if meta.format_version != "1" {
        return Err(Error::Format(format!("unsupported format version {:?}", meta.format_version)));
    }
    let mut sections = Vec::with_capacity(meta.sections.len());
    for section in &meta.sections {
        let mut params = ParameterSet::new();
        for array_meta in &section.arrays {
            if array_meta.dtype != "f64le" {
                return Err(Error::Format(format!("unsupported dtype {:?}", array_meta.dtype)));
            }
            let count: usize = array_meta.shape.iter().product();
            let mut payload = vec![0u8; count * 8];
            r.read_exact(&mut payload)
                .map_err(|_| Error::Format(format!("truncated payload at {:?}", array_meta.name)))?;
            let data: Vec<f64> = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
                .collect();
            params.insert(array_meta.name.clone(), Array::new(array_meta.shape.clone(), data)?)?;
        }
        sections.push((section.name.clone(), params));
    }
    let mut probe = [0u8; 1];
    match r.read(&mut probe) {
        Ok(0) => {}
        Ok(_) => return Err(Error::Format("payload longer than metadata implies".into())),
        Err(e) => return Err(io(e)),
    }
    Ok(Checkpoint { kind: meta.kind, config: meta.config, extras: meta.extras, sections })
}
