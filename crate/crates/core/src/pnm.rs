//! Minimal binary PNM (P5 graymap / P6 pixmap) reading and writing.
//!
//! Frames and rendered reports use these formats so every artifact is
//! byte-deterministic without an image dependency. Maxval is fixed at 255.

use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fsio;
use crate::tensor::Tensor;

pub fn encode_pgm(width: usize, height: usize, gray: &[u8]) -> Vec<u8> {
    assert_eq!(gray.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    out
}

pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    assert_eq!(rgb.len(), width * height * 3);
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

pub fn write_pgm(path: &Path, width: usize, height: usize, gray: &[u8]) -> Result<()> {
    fsio::atomic_write(path, &encode_pgm(width, height, gray))
}

pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    fsio::atomic_write(path, &encode_ppm(width, height, rgb))
}

struct Header {
    channels: usize,
    width: usize,
    height: usize,
}

fn parse_header(bytes: &[u8]) -> Result<(Header, usize)> {
    let mut pos = 0;
    let magic = bytes.get(0..2).ok_or_else(|| Error::Format("truncated pnm".into()))?;
    let channels = match magic {
        b"P5" => 1,
        b"P6" => 3,
        _ => return Err(Error::Format("not a binary P5/P6 file".into())),
    };
    pos += 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // skip whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(Error::Format("truncated pnm header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if pos == start {
            return Err(Error::Format("bad pnm header field".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| Error::Format("bad pnm header value".into()))?;
    }
    // single whitespace byte separates the header from the raster
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(Error::Format("missing pnm raster separator".into()));
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::Format(format!("unsupported pnm maxval {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(Error::Format("zero pnm dimensions".into()));
    }
    Ok((
        Header {
            channels,
            width,
            height,
        },
        pos,
    ))
}

fn decode(bytes: &[u8]) -> Result<(Header, Vec<u8>)> {
    let (hdr, offset) = parse_header(bytes)?;
    let need = hdr.channels * hdr.width * hdr.height;
    let raster = bytes
        .get(offset..offset + need)
        .ok_or_else(|| Error::Format("truncated pnm raster".into()))?;
    Ok((hdr, raster.to_vec()))
}

/// Read a P5 or P6 file into a (channels, h, w) tensor with values in [0, 1].
pub fn read_frame(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let (hdr, raster) = decode(&bytes)?;
    let mut data = vec![0.0f32; hdr.channels * hdr.height * hdr.width];
    let plane = hdr.height * hdr.width;
    for (i, px) in raster.chunks_exact(hdr.channels).enumerate() {
        for (c, &b) in px.iter().enumerate() {
            data[c * plane + i] = b as f32 / 255.0;
        }
    }
    Ok(Tensor::from_vec_unchecked(
        vec![hdr.channels, hdr.height, hdr.width],
        data,
    ))
}

/// Quantize a (c, h, w) tensor in [0, 1] into interleaved bytes.
pub fn frame_to_bytes(frame: &Tensor) -> Result<(usize, usize, usize, Vec<u8>)> {
    let shape = frame.shape();
    if shape.len() != 3 || (shape[0] != 1 && shape[0] != 3) {
        return Err(Error::Shape(format!(
            "expected (1|3, h, w) frame, got {shape:?}"
        )));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let plane = h * w;
    let data = frame.data();
    let mut bytes = vec![0u8; c * plane];
    for i in 0..plane {
        for ch in 0..c {
            let v = (data[ch * plane + i].clamp(0.0, 1.0) * 255.0 + 0.5).floor();
            bytes[i * c + ch] = v as u8;
        }
    }
    Ok((c, h, w, bytes))
}

/// Write a (1|3, h, w) tensor in [0, 1] as P5/P6.
pub fn write_frame(path: &Path, frame: &Tensor) -> Result<()> {
    let (c, h, w, bytes) = frame_to_bytes(frame)?;
    if c == 1 {
        write_pgm(path, w, h, &bytes)
    } else {
        write_ppm(path, w, h, &bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.ppm");
        let frame = Tensor::from_vec(
            &[3, 2, 2],
            vec![
                0.0, 1.0, 0.5, 0.25, // r
                0.1, 0.2, 0.3, 0.4, // g
                1.0, 0.0, 0.9, 0.6, // b
            ],
        )
        .unwrap();
        write_frame(&path, &frame).unwrap();
        let back = read_frame(&path).unwrap();
        assert_eq!(back.shape(), &[3, 2, 2]);
        for (a, b) in frame.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn pgm_header_with_comment() {
        let mut bytes = b"P5\n# a comment\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 255]);
        let (hdr, raster) = decode(&bytes).unwrap();
        assert_eq!((hdr.width, hdr.height, hdr.channels), (2, 1, 1));
        assert_eq!(raster, vec![0, 255]);
    }

    #[test]
    fn truncated_raster_is_format_error() {
        let bytes = b"P6\n2 2\n255\n\x00\x01".to_vec();
        assert!(matches!(decode(&bytes), Err(Error::Format(_))));
    }
}
