//! PFM (portable float map) reader/writer.
//!
//! Header: `PF` (3-channel) or `Pf` (1-channel), then `width height`, then a
//! scale whose sign encodes endianness (negative = little-endian, which is
//! what we write). Pixel rows are stored bottom-to-top. Values round-trip
//! bit-exactly.

use super::ImageBuf;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PfmError {
    #[error("pfm {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("pfm {path}: {msg}")]
    Malformed { path: String, msg: String },
}

fn io_err(path: &Path, source: std::io::Error) -> PfmError {
    PfmError::Io { path: path.display().to_string(), source }
}

fn bad(path: &Path, msg: impl Into<String>) -> PfmError {
    PfmError::Malformed { path: path.display().to_string(), msg: msg.into() }
}

pub fn write_pfm(path: &Path, img: &ImageBuf) -> Result<(), PfmError> {
    assert!(
        img.channels == 1 || img.channels == 3,
        "pfm supports 1 or 3 channels, got {}",
        img.channels
    );
    let mut buf = Vec::with_capacity(img.data.len() * 4 + 64);
    let tag = if img.channels == 3 { "PF" } else { "Pf" };
    write!(buf, "{tag}\n{} {}\n-1.0\n", img.width, img.height).unwrap();
    let row_len = (img.width * img.channels) as usize;
    for y in (0..img.height as usize).rev() {
        let row = &img.data[y * row_len..(y + 1) * row_len];
        for v in row {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    crate::io::atomic_write(path, &buf).map_err(|e| io_err(path, e))
}

pub fn read_pfm(path: &Path) -> Result<ImageBuf, PfmError> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    // Header tokens are whitespace-separated; scan them off the front.
    let mut pos = 0usize;
    let mut token = |what: &str| -> Result<String, PfmError> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad(path, format!("missing {what}")));
        }
        // Consume exactly one whitespace after the token (PFM allows any
        // single whitespace separator).
        if pos < bytes.len() {
            pos += 1;
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos - 1]).to_string())
    };
    let tag = token("format tag")?;
    let channels = match tag.as_str() {
        "PF" => 3u32,
        "Pf" => 1u32,
        other => return Err(bad(path, format!("unknown tag '{other}'"))),
    };
    let width: u32 = token("width")?.parse().map_err(|e| bad(path, format!("bad width: {e}")))?;
    let height: u32 = token("height")?.parse().map_err(|e| bad(path, format!("bad height: {e}")))?;
    let scale: f64 = token("scale")?.parse().map_err(|e| bad(path, format!("bad scale: {e}")))?;
    if width == 0 || height == 0 || width > 65536 || height > 65536 {
        return Err(bad(path, format!("unreasonable dimensions {width}x{height}")));
    }
    let little = scale < 0.0;
    let n = (width * height * channels) as usize;
    if bytes.len() < pos + n * 4 {
        return Err(bad(
            path,
            format!("data truncated: need {} bytes, have {}", n * 4, bytes.len() - pos),
        ));
    }
    let mut data = vec![0f32; n];
    let row_len = (width * channels) as usize;
    for src_row in 0..height as usize {
        let dst_row = height as usize - 1 - src_row; // bottom-to-top storage
        for i in 0..row_len {
            let o = pos + (src_row * row_len + i) * 4;
            let raw: [u8; 4] = bytes[o..o + 4].try_into().unwrap();
            data[dst_row * row_len + i] = if little {
                f32::from_le_bytes(raw)
            } else {
                f32::from_be_bytes(raw)
            };
        }
    }
    Ok(ImageBuf { width, height, channels, data })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let img = ImageBuf {
            width: 3,
            height: 2,
            channels: 3,
            data: (0..18)
                .map(|i| if i % 5 == 0 { -(i as f32) * 0.37 } else { i as f32 * 1e-3 })
                .collect(),
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.pfm");
        write_pfm(&p, &img).unwrap();
        let back = read_pfm(&p).unwrap();
        assert_eq!(back.width, 3);
        assert_eq!(back.height, 2);
        assert_eq!(back.channels, 3);
        for (a, b) in img.data.iter().zip(&back.data) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn single_channel_round_trip() {
        let img = ImageBuf {
            width: 4,
            height: 3,
            channels: 1,
            data: (0..12).map(|i| (i as f32).sqrt()).collect(),
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.pfm");
        write_pfm(&p, &img).unwrap();
        let back = read_pfm(&p).unwrap();
        assert_eq!(back.channels, 1);
        assert_eq!(img.data, back.data);
    }

    #[test]
    fn reads_foreign_big_endian_file() {
        // A 1×2 grayscale PFM with positive scale (big-endian), written by
        // hand the way a C tool would emit it: bottom row first.
        let mut bytes = b"Pf\n1 2\n1.0\n".to_vec();
        bytes.extend_from_slice(&2.5f32.to_be_bytes()); // bottom pixel
        bytes.extend_from_slice(&(-7.0f32).to_be_bytes()); // top pixel
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("foreign.pfm");
        std::fs::write(&p, &bytes).unwrap();
        let img = read_pfm(&p).unwrap();
        assert_eq!(img.data, vec![-7.0, 2.5]); // top-down in memory
    }

    #[test]
    fn truncated_data_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("trunc.pfm");
        std::fs::write(&p, b"PF\n4 4\n-1.0\nonly-a-few-bytes").unwrap();
        let err = read_pfm(&p).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn garbage_header_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.pfm");
        std::fs::write(&p, b"P6\n1 1\n255\n\x00\x00\x00").unwrap();
        let err = read_pfm(&p).unwrap_err();
        assert!(err.to_string().contains("unknown tag"), "{err}");
    }
}
