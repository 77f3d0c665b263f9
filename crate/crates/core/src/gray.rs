//! Single-channel float images and their on-disk formats.
//!
//! Pixels live in `[0, 1]` once normalized. Storage is binary PGM (P5),
//! 8-bit or 16-bit; grayscale PNG is accepted on read.

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad image file {path}: {reason}")]
    Format { path: String, reason: String },
    #[error("empty image")]
    Empty,
    #[error("pixel buffer length {got} does not match {width}x{height}")]
    BadDimensions {
        width: usize,
        height: usize,
        got: usize,
    },
}

/// A single-channel image: row-major `f32` pixels plus its dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 || pixels.is_empty() {
            return Err(ImageError::Empty);
        }
        if pixels.len() != width * height {
            return Err(ImageError::BadDimensions {
                width,
                height,
                got: pixels.len(),
            });
        }
        Ok(GrayImage {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Result<Self, ImageError> {
        GrayImage::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.pixels[y * self.width + x] = v;
    }

    pub fn min_max(&self) -> (f32, f32) {
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for &p in &self.pixels {
            lo = lo.min(p);
            hi = hi.max(p);
        }
        (lo, hi)
    }

    pub fn in_unit_range(&self) -> bool {
        self.pixels.iter().all(|&p| (0.0..=1.0).contains(&p))
    }
}

fn io_err(path: &Path, source: std::io::Error) -> ImageError {
    ImageError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn format_err(path: &Path, reason: impl Into<String>) -> ImageError {
    ImageError::Format {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

/// Write as binary 8-bit PGM. Values are clamped to `[0,1]` and quantized.
pub fn write_pgm8(img: &GrayImage, path: &Path) -> Result<(), ImageError> {
    let mut buf = Vec::with_capacity(32 + img.pixels.len());
    write!(buf, "P5\n{} {}\n255\n", img.width, img.height).expect("vec write");
    for &p in &img.pixels {
        buf.push((p.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    fs::write(path, buf).map_err(|e| io_err(path, e))
}

/// Write as binary 16-bit PGM (big-endian samples, per the PNM convention).
pub fn write_pgm16(img: &GrayImage, path: &Path) -> Result<(), ImageError> {
    let mut buf = Vec::with_capacity(32 + 2 * img.pixels.len());
    write!(buf, "P5\n{} {}\n65535\n", img.width, img.height).expect("vec write");
    for &p in &img.pixels {
        let v = (p.clamp(0.0, 1.0) * 65535.0).round() as u16;
        buf.extend_from_slice(&v.to_be_bytes());
    }
    fs::write(path, buf).map_err(|e| io_err(path, e))
}

/// Read a binary PGM (P5), 8-bit or 16-bit, scaling to `[0,1]`.
pub fn read_pgm(path: &Path) -> Result<GrayImage, ImageError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    if bytes.len() < 2 || &bytes[0..2] != b"P5" {
        return Err(format_err(path, "missing P5 magic"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3]; // width, height, maxval
    for field in fields.iter_mut() {
        // skip whitespace and '#' comment lines between header tokens
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(format_err(path, "truncated header"));
        }
        let token = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = token
            .parse()
            .map_err(|_| format_err(path, "bad header integer"))?;
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(format_err(path, "missing raster separator"));
    }
    pos += 1;
    let (width, height, maxval) = (fields[0], fields[1], fields[2]);
    if width == 0 || height == 0 {
        return Err(format_err(path, "zero dimension"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(format_err(path, format!("unsupported maxval {maxval}")));
    }
    let n = width * height;
    let raster = &bytes[pos..];
    let scale = 1.0f32 / maxval as f32;
    let pixels: Vec<f32> = if maxval < 256 {
        if raster.len() < n {
            return Err(format_err(path, "truncated raster"));
        }
        raster[..n].iter().map(|&b| f32::from(b) * scale).collect()
    } else {
        if raster.len() < 2 * n {
            return Err(format_err(path, "truncated raster"));
        }
        raster[..2 * n]
            .chunks_exact(2)
            .map(|c| f32::from(u16::from_be_bytes([c[0], c[1]])) * scale)
            .collect()
    };
    GrayImage::new(width, height, pixels)
}

/// Read an image by extension: `.pgm` natively, anything else (PNG) via the
/// `image` crate, converted to grayscale and scaled to `[0,1]`.
pub fn read_image(path: &Path) -> Result<GrayImage, ImageError> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase();
    if ext == "pgm" {
        return read_pgm(path);
    }
    let dyn_img = image::open(path).map_err(|e| format_err(path, e.to_string()))?;
    let luma = dyn_img.to_luma16();
    let (w, h) = (luma.width() as usize, luma.height() as usize);
    let pixels = luma
        .into_raw()
        .into_iter()
        .map(|v| f32::from(v) / 65535.0)
        .collect();
    GrayImage::new(w, h, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmpdir() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn pgm8_roundtrip_is_exact_on_quantized_values() {
        let img = GrayImage::new(3, 2, vec![0.0, 1.0, 0.5, 0.25, 0.75, 1.0]).unwrap();
        let dir = tmpdir();
        let p = dir.path().join("a.pgm");
        write_pgm8(&img, &p).unwrap();
        let back = read_pgm(&p).unwrap();
        assert_eq!(back.width(), 3);
        assert_eq!(back.height(), 2);
        for (a, b) in img.pixels().iter().zip(back.pixels()) {
            assert!((a - b).abs() < 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn pgm16_roundtrip_preserves_precision() {
        let vals: Vec<f32> = (0..64).map(|i| i as f32 / 63.0).collect();
        let img = GrayImage::new(8, 8, vals).unwrap();
        let dir = tmpdir();
        let p = dir.path().join("b.pgm");
        write_pgm16(&img, &p).unwrap();
        let back = read_pgm(&p).unwrap();
        for (a, b) in img.pixels().iter().zip(back.pixels()) {
            assert!((a - b).abs() < 1.0 / 65535.0);
        }
    }

    #[test]
    fn pgm_write_is_deterministic() {
        let img = GrayImage::new(4, 4, (0..16).map(|i| i as f32 / 15.0).collect()).unwrap();
        let dir = tmpdir();
        let p1 = dir.path().join("c1.pgm");
        let p2 = dir.path().join("c2.pgm");
        write_pgm8(&img, &p1).unwrap();
        write_pgm8(&img, &p2).unwrap();
        assert_eq!(fs::read(p1).unwrap(), fs::read(p2).unwrap());
    }

    #[test]
    fn read_pgm_rejects_garbage() {
        let dir = tmpdir();
        let p = dir.path().join("bad.pgm");
        fs::write(&p, b"P6\n2 2\n255\nxxxx").unwrap();
        assert!(read_pgm(&p).is_err());
        fs::write(&p, b"P5\n2 2\n255\nxx").unwrap();
        assert!(matches!(read_pgm(&p), Err(ImageError::Format { .. })));
    }

    #[test]
    fn png_read_matches_pgm_content() {
        let dir = tmpdir();
        let p = dir.path().join("g.png");
        let mut img = image::GrayImage::new(4, 3);
        for (i, px) in img.pixels_mut().enumerate() {
            px.0 = [(i * 20) as u8];
        }
        img.save(&p).unwrap();
        let back = read_image(&p).unwrap();
        assert_eq!((back.width(), back.height()), (4, 3));
        // 8-bit PNG widens to 16-bit by *257, so v/255 is preserved exactly
        assert!((back.get(1, 0) - 20.0 / 255.0).abs() < 1e-6);
    }

    #[test]
    fn empty_image_rejected() {
        assert!(matches!(
            GrayImage::new(0, 4, vec![]),
            Err(ImageError::Empty)
        ));
    }
}
