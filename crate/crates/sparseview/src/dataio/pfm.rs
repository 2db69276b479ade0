//! Portable float map (PFM) depth files.
//!
//! Header: `Pf\n<width> <height>\n<scale>\n` followed by `width * height`
//! 32-bit floats. A negative scale marks little-endian data, positive marks
//! big-endian; the magnitude is ignored on read. Rows are stored bottom to
//! top per the format's convention. Holes are stored as `+inf`.

use std::path::Path;

use crate::raster::DepthMap;
use crate::{Error, Result};

pub fn write_pfm(path: &Path, depth: &DepthMap) -> Result<()> {
    let (w, h) = (depth.width(), depth.height());
    let mut buf = Vec::with_capacity(32 + w * h * 4);
    buf.extend_from_slice(format!("Pf\n{w} {h}\n-1.0\n").as_bytes());
    for y in (0..h).rev() {
        for x in 0..w {
            buf.extend_from_slice(&depth.raw(x, y).to_le_bytes());
        }
    }
    std::fs::write(path, &buf).map_err(|e| Error::io(path, e))
}

pub fn read_pfm(path: &Path) -> Result<DepthMap> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pfm(&bytes).map_err(|(offset, msg)| {
        Error::Data(format!("{}: byte {offset}: {msg}", path.display()))
    })
}

fn parse_pfm(bytes: &[u8]) -> std::result::Result<DepthMap, (usize, String)> {
    let mut offset = 0usize;

    let mut token = |bytes: &[u8]| -> std::result::Result<(usize, String), (usize, String)> {
        while offset < bytes.len() && bytes[offset].is_ascii_whitespace() {
            offset += 1;
        }
        let start = offset;
        while offset < bytes.len() && !bytes[offset].is_ascii_whitespace() {
            offset += 1;
        }
        if start == offset {
            return Err((start, "unexpected end of header".into()));
        }
        let s = std::str::from_utf8(&bytes[start..offset])
            .map_err(|_| (start, "header is not ascii".into()))?;
        // Consume exactly one whitespace byte after the token.
        if offset < bytes.len() {
            offset += 1;
        }
        Ok((start, s.to_string()))
    };

    let (at, magic) = token(bytes)?;
    if magic != "Pf" {
        return Err((at, format!("bad magic '{magic}' (grayscale 'Pf' expected)")));
    }
    let (at_w, w) = token(bytes)?;
    let w: usize = w.parse().map_err(|_| (at_w, format!("bad width '{w}'")))?;
    let (at_h, h) = token(bytes)?;
    let h: usize = h.parse().map_err(|_| (at_h, format!("bad height '{h}'")))?;
    let (at_s, scale) = token(bytes)?;
    let scale: f64 = scale
        .parse()
        .map_err(|_| (at_s, format!("bad scale '{scale}'")))?;
    if scale == 0.0 {
        return Err((at_s, "scale must be nonzero".into()));
    }
    let little_endian = scale < 0.0;

    let need = w * h * 4;
    if bytes.len() - offset < need {
        return Err((
            offset,
            format!("{} data bytes present, {need} required", bytes.len() - offset),
        ));
    }
    let mut depth = DepthMap::invalid(w, h);
    let data = &bytes[offset..offset + need];
    for (i, chunk) in data.chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little_endian {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        };
        // Bottom-to-top storage order.
        let x = i % w;
        let y = h - 1 - i / w;
        depth.set(x, y, v);
    }
    Ok(depth)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.pfm");
        let mut depth = DepthMap::invalid(5, 3);
        let mut v = 0.1f32;
        for y in 0..3 {
            for x in 0..5 {
                depth.set(x, y, v);
                v = v * 1.7 + 0.013;
            }
        }
        depth.set(2, 1, f32::INFINITY);
        write_pfm(&path, &depth).unwrap();
        let loaded = read_pfm(&path).unwrap();
        assert_eq!(loaded.width(), 5);
        for (a, b) in loaded.data().iter().zip(depth.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert!(loaded.get(2, 1).is_none(), "+inf reads back as a hole");
    }

    #[test]
    fn positive_scale_means_big_endian() {
        // Golden 1x1 big-endian file holding 2.0f32.
        let mut bytes = b"Pf\n1 1\n1.0\n".to_vec();
        bytes.extend_from_slice(&2.0f32.to_be_bytes());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("be.pfm");
        std::fs::write(&path, &bytes).unwrap();
        let depth = read_pfm(&path).unwrap();
        assert_eq!(depth.get(0, 0), Some(2.0));
    }

    #[test]
    fn malformed_header_reports_byte_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pfm");
        std::fs::write(&path, b"Pf\nfive 3\n-1.0\n").unwrap();
        let err = read_pfm(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("byte 3"), "{msg}");
        assert!(msg.contains("width"), "{msg}");
    }

    #[test]
    fn truncated_data_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.pfm");
        std::fs::write(&path, b"Pf\n2 2\n-1.0\n\x00\x00").unwrap();
        let err = read_pfm(&path).unwrap_err();
        assert!(err.to_string().contains("16 required"), "{err}");
    }
}
