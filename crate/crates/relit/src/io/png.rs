//! PNG image I/O.
//!
//! Color/mask images are 8-bit PNGs holding *linear* values: writing maps
//! `v → round(255·clamp(v,0,1))` with no gamma, reading maps back `v/255`.
//! Real photographs can opt into sRGB decoding on load. Label maps are
//! 8-bit grayscale PNGs whose pixel values are the class indices themselves.

use super::ImageBuf;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PngError {
    #[error("png {path}: {source}")]
    Codec {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("png {path}: {msg}")]
    Unsupported { path: String, msg: String },
}

fn codec(path: &Path, source: image::ImageError) -> PngError {
    PngError::Codec { path: path.display().to_string(), source }
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn srgb_to_linear(v: f32) -> f32 {
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

/// Encode to memory, then write-and-rename so readers never see a torn file.
fn save_atomic(
    path: &Path,
    write: impl FnOnce(&mut std::io::Cursor<Vec<u8>>) -> image::ImageResult<()>,
) -> Result<(), PngError> {
    let mut cur = std::io::Cursor::new(Vec::new());
    write(&mut cur).map_err(|e| codec(path, e))?;
    super::atomic_write(path, cur.get_ref())
        .map_err(|e| codec(path, image::ImageError::IoError(e)))
}

/// Write a 1-channel (gray) or 3-channel (RGB) float image as 8-bit PNG.
pub fn write_png(path: &Path, img: &ImageBuf) -> Result<(), PngError> {
    let bytes: Vec<u8> = img.data.iter().map(|v| quantize(*v)).collect();
    let fmt = image::ImageFormat::Png;
    match img.channels {
        1 => save_atomic(path, |w| {
            image::GrayImage::from_raw(img.width, img.height, bytes)
                .expect("buffer size matches dims")
                .write_to(w, fmt)
        }),
        3 => save_atomic(path, |w| {
            image::RgbImage::from_raw(img.width, img.height, bytes)
                .expect("buffer size matches dims")
                .write_to(w, fmt)
        }),
        c => Err(PngError::Unsupported {
            path: path.display().to_string(),
            msg: format!("{c}-channel PNG not supported"),
        }),
    }
}

/// Read a PNG into floats in `[0,1]`; `srgb` additionally linearizes.
pub fn read_png(path: &Path, srgb: bool) -> Result<ImageBuf, PngError> {
    let img = image::open(path).map_err(|e| codec(path, e))?;
    let (width, height, channels, raw): (u32, u32, u32, Vec<u8>) = match img {
        image::DynamicImage::ImageLuma8(g) => (g.width(), g.height(), 1, g.into_raw()),
        other => {
            let rgb = other.to_rgb8();
            (rgb.width(), rgb.height(), 3, rgb.into_raw())
        }
    };
    let mut data: Vec<f32> = raw.iter().map(|b| *b as f32 / 255.0).collect();
    if srgb {
        for v in data.iter_mut() {
            *v = srgb_to_linear(*v);
        }
    }
    Ok(ImageBuf { width, height, channels, data })
}

/// Write class indices as a grayscale PNG (index = pixel value).
pub fn write_label_png(path: &Path, width: u32, height: u32, labels: &[u8]) -> Result<(), PngError> {
    save_atomic(path, |w| {
        image::GrayImage::from_raw(width, height, labels.to_vec())
            .expect("buffer size matches dims")
            .write_to(w, image::ImageFormat::Png)
    })
}

pub fn read_label_png(path: &Path) -> Result<(u32, u32, Vec<u8>), PngError> {
    let img = image::open(path).map_err(|e| codec(path, e))?;
    let g = img.to_luma8();
    Ok((g.width(), g.height(), g.into_raw()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_error_is_at_most_half_a_step() {
        let img = ImageBuf {
            width: 16,
            height: 4,
            channels: 3,
            data: (0..192).map(|i| i as f32 / 191.0).collect(),
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.png");
        write_png(&p, &img).unwrap();
        let back = read_png(&p, false).unwrap();
        assert_eq!((back.width, back.height, back.channels), (16, 4, 3));
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-7, "{a} vs {b}");
        }
    }

    #[test]
    fn out_of_range_values_clamp_on_write() {
        let img = ImageBuf { width: 2, height: 1, channels: 1, data: vec![-0.5, 1.5] };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("clamp.png");
        write_png(&p, &img).unwrap();
        let back = read_png(&p, false).unwrap();
        assert_eq!(back.data, vec![0.0, 1.0]);
    }

    #[test]
    fn labels_survive_round_trip_exactly() {
        let labels: Vec<u8> = vec![0, 1, 2, 3, 255, 7];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sem.png");
        write_label_png(&p, 3, 2, &labels).unwrap();
        let (w, h, back) = read_label_png(&p).unwrap();
        assert_eq!((w, h), (3, 2));
        assert_eq!(labels, back);
    }

    #[test]
    fn srgb_decode_applies_the_standard_curve() {
        let img = ImageBuf { width: 1, height: 1, channels: 1, data: vec![0.5] };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("srgb.png");
        write_png(&p, &img).unwrap();
        let lin = read_png(&p, true).unwrap();
        // sRGB 0.5 (128/255) linearizes to ≈ 0.2158.
        assert!((lin.data[0] - 0.2158).abs() < 2e-3, "{}", lin.data[0]);
    }
}
