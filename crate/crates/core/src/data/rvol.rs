//! RVOL raw volume format.
//!
//! Layout, bit-exact:
//! - ASCII magic `RVOL1\n`
//! - one UTF-8 JSON header line terminated by `\n`:
//!   `{"shape":[Z,Y,X],"spacing":[sz,sy,sx],"dtype":"f32le","patient_id":"..."}`
//! - `Z*Y*X` little-endian 32-bit floats, Z-major (Z slowest).
//!
//! The writer is canonical (fixed key order, shortest float repr), so
//! write → load → write reproduces files byte-for-byte.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::VolumeGrid;

const MAGIC: &[u8; 6] = b"RVOL1\n";
const MAX_HEADER_LINE: usize = 64 * 1024;

#[derive(Debug, Serialize, Deserialize)]
struct RvolHeader {
    shape: [usize; 3],
    spacing: [f32; 3],
    dtype: String,
    patient_id: String,
}

pub fn write_volume(v: &VolumeGrid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_volume_to(v, &mut w).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_volume_to(v: &VolumeGrid, w: &mut impl Write) -> Result<()> {
    let header = RvolHeader {
        shape: v.shape(),
        spacing: v.spacing(),
        dtype: "f32le".into(),
        patient_id: v.patient_id.clone(),
    };
    let header_line = serde_json::to_string(&header)
        .map_err(|e| Error::Format(format!("header serialization: {e}")))?;
    let io = |e| Error::Io { path: "<writer>".into(), source: e };
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(header_line.as_bytes()).map_err(io)?;
    w.write_all(b"\n").map_err(io)?;
    let mut buf = Vec::with_capacity(v.voxels().len() * 4);
    for &val in v.voxels() {
        buf.extend_from_slice(&val.to_le_bytes());
    }
    w.write_all(&buf).map_err(io)
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<VolumeGrid> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    load_volume_from(&mut r).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn load_volume_from(r: &mut impl Read) -> Result<VolumeGrid> {
    let io = |e| Error::Io { path: "<reader>".into(), source: e };
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}, expected RVOL1", magic)));
    }
    let mut header_bytes = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        r.read_exact(&mut byte).map_err(|_| Error::Format("header line not terminated".into()))?;
        if byte[0] == b'\n' {
            break;
        }
        header_bytes.push(byte[0]);
        if header_bytes.len() > MAX_HEADER_LINE {
            return Err(Error::Format("header line exceeds 64 KiB".into()));
        }
    }
    let header: RvolHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Format(format!("malformed header: {e}")))?;
    if header.dtype != "f32le" {
        return Err(Error::Format(format!("unsupported dtype {:?}", header.dtype)));
    }
    if header.shape.iter().any(|&d| d == 0) {
        return Err(Error::Format(format!("header shape {:?} has a zero axis", header.shape)));
    }
    let count = header.shape[0]
        .checked_mul(header.shape[1])
        .and_then(|v| v.checked_mul(header.shape[2]))
        .ok_or_else(|| Error::Format("shape product overflows".into()))?;
    let mut payload = vec![0u8; count * 4];
    r.read_exact(&mut payload).map_err(|_| Error::Format("truncated payload".into()))?;
    let mut probe = [0u8; 1];
    match r.read(&mut probe) {
        Ok(0) => {}
        Ok(_) => return Err(Error::Format("payload longer than header shape implies".into())),
        Err(e) => return Err(io(e)),
    }
    let mut voxels = Vec::with_capacity(count);
    for chunk in payload.chunks_exact(4) {
        voxels.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
    }
    if let Some(idx) = voxels.iter().position(|v| !v.is_finite()) {
        return Err(Error::Format(format!("non-finite voxel at linear index {idx}")));
    }
    VolumeGrid::new(header.shape, header.spacing, header.patient_id, voxels)
        .map_err(|e| Error::Format(e.to_string()))
}
