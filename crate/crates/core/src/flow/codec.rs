//! 8-bit flow storage: each displacement plane is linearly rescaled to
//! [0, 255] with its min/max recorded, quartering the raw f32 footprint
//! while keeping decode error within half a quantization step.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::flow::field::DisplacementField;
use crate::fsio;
use crate::tensor::{read_f32, read_u16, read_u32};

/// One displacement field quantized to bytes with per-plane ranges.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedField {
    pub width: usize,
    pub height: usize,
    pub min_x: f32,
    pub max_x: f32,
    pub min_y: f32,
    pub max_y: f32,
    pub qx: Vec<u8>,
    pub qy: Vec<u8>,
}

fn encode_plane(values: &[f32]) -> (f32, f32, Vec<u8>) {
    let mut min = f32::INFINITY;
    let mut max = f32::NEG_INFINITY;
    for &v in values {
        min = min.min(v);
        max = max.max(v);
    }
    if min == max {
        return (min, max, vec![0u8; values.len()]);
    }
    let scale = 255.0 / (max - min);
    let bytes = values
        .iter()
        // round half away from zero; the argument is nonnegative
        .map(|&v| (((v - min) * scale) + 0.5).floor().clamp(0.0, 255.0) as u8)
        .collect();
    (min, max, bytes)
}

fn decode_plane(min: f32, max: f32, bytes: &[u8]) -> Vec<f32> {
    bytes
        .iter()
        .map(|&b| match b {
            // exact endpoints by construction
            0 => min,
            255 => max,
            _ => min + (b as f32 / 255.0) * (max - min),
        })
        .collect()
}

/// Quantize both planes. Constant planes encode min == max with zero bytes.
pub fn encode_field(field: &DisplacementField) -> Result<QuantizedField> {
    // tensors are finite by construction; guard anyway for fields built
    // through unchecked internal paths
    if !field.dx().data().iter().chain(field.dy().data()).all(|v| v.is_finite()) {
        return Err(Error::Data("non-finite displacement value".into()));
    }
    let (min_x, max_x, qx) = encode_plane(field.dx().data());
    let (min_y, max_y, qy) = encode_plane(field.dy().data());
    Ok(QuantizedField {
        width: field.width(),
        height: field.height(),
        min_x,
        max_x,
        min_y,
        max_y,
        qx,
        qy,
    })
}

/// Reconstruct the field: v = min + b * (max - min) / 255 per element.
pub fn decode_field(q: &QuantizedField) -> Result<DisplacementField> {
    let plane = q.width * q.height;
    if q.qx.len() != plane || q.qy.len() != plane {
        return Err(Error::Format(format!(
            "quantized planes hold {}/{} bytes for a {}x{} field",
            q.qx.len(),
            q.qy.len(),
            q.width,
            q.height
        )));
    }
    if !(q.min_x <= q.max_x && q.min_y <= q.max_y) {
        return Err(Error::Format("quantized range has min > max".into()));
    }
    DisplacementField::from_planes(
        q.width,
        q.height,
        decode_plane(q.min_x, q.max_x, &q.qx),
        decode_plane(q.min_y, q.max_y, &q.qy),
    )
}

const ARCHIVE_MAGIC: &[u8; 4] = b"FLZ1";
const ARCHIVE_VERSION: u16 = 1;

/// On-disk container for one video's T-1 quantized fields.
pub struct FlowArchive;

/// Serialize fields to the archive layout (little-endian):
/// "FLZ1" | u16 version | u32 T | u32 w | u32 h | (T-1) records of
/// 4 x f32 ranges + qx bytes + qy bytes, row-major.
pub fn archive_encode(fields: &[DisplacementField]) -> Result<Vec<u8>> {
    if fields.is_empty() {
        return Err(Error::Argument("archive needs at least one field".into()));
    }
    let (w, h) = (fields[0].width(), fields[0].height());
    for f in fields {
        if f.width() != w || f.height() != h {
            return Err(Error::Shape("archive fields must share one size".into()));
        }
    }
    let mut out = Vec::with_capacity(18 + fields.len() * (16 + 2 * w * h));
    out.extend_from_slice(ARCHIVE_MAGIC);
    out.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
    out.extend_from_slice(&((fields.len() + 1) as u32).to_le_bytes()); // frame count T
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    for field in fields {
        let q = encode_field(field)?;
        for v in [q.min_x, q.max_x, q.min_y, q.max_y] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&q.qx);
        out.extend_from_slice(&q.qy);
    }
    Ok(out)
}

pub fn archive_read_bytes(bytes: &[u8]) -> Result<Vec<DisplacementField>> {
    let mut r = bytes;
    let mut magic = [0u8; 4];
    std::io::Read::read_exact(&mut r, &mut magic)
        .map_err(|_| Error::Format("truncated archive".into()))?;
    if &magic != ARCHIVE_MAGIC {
        return Err(Error::Format("bad archive magic".into()));
    }
    let version = read_u16(&mut r)?;
    if version != ARCHIVE_VERSION {
        return Err(Error::Format(format!("unsupported archive version {version}")));
    }
    let frames = read_u32(&mut r)? as usize;
    let w = read_u32(&mut r)? as usize;
    let h = read_u32(&mut r)? as usize;
    if frames < 2 || w == 0 || h == 0 {
        return Err(Error::Format("implausible archive header".into()));
    }
    let plane = w * h;
    let mut fields = Vec::with_capacity(frames - 1);
    for _ in 0..frames - 1 {
        let min_x = read_f32(&mut r)?;
        let max_x = read_f32(&mut r)?;
        let min_y = read_f32(&mut r)?;
        let max_y = read_f32(&mut r)?;
        let mut qx = vec![0u8; plane];
        std::io::Read::read_exact(&mut r, &mut qx)
            .map_err(|_| Error::Format("truncated archive record".into()))?;
        let mut qy = vec![0u8; plane];
        std::io::Read::read_exact(&mut r, &mut qy)
            .map_err(|_| Error::Format("truncated archive record".into()))?;
        fields.push(decode_field(&QuantizedField {
            width: w,
            height: h,
            min_x,
            max_x,
            min_y,
            max_y,
            qx,
            qy,
        })?);
    }
    Ok(fields)
}

pub fn archive_write(fields: &[DisplacementField], path: &Path) -> Result<()> {
    fsio::atomic_write(path, &archive_encode(fields)?)
}

pub fn archive_read(path: &Path) -> Result<Vec<DisplacementField>> {
    let mut bytes = Vec::new();
    std::io::Read::read_to_end(&mut std::fs::File::open(path)?, &mut bytes)?;
    archive_read_bytes(&bytes)
}

impl FlowArchive {
    /// Bytes per archived field vs raw f32 storage, ignoring the file header.
    pub fn record_bytes(w: usize, h: usize) -> usize {
        16 + 2 * w * h
    }

    pub fn raw_bytes(w: usize, h: usize) -> usize {
        8 * w * h
    }
}
