//! Binary PGM (P5) reading/writing and binary PPM (P6) writing, 8-bit only.

use std::fs;
use std::path::Path;

use crate::error::{Error, ImageError, Result};
use crate::tensor::Tensor;

/// Map a `[0, 1]` intensity to a byte, rounding half away from zero.
pub fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_whitespace_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn token(&mut self) -> &[u8] {
        self.skip_whitespace_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        &self.bytes[start..self.pos]
    }

    fn number(&mut self, what: &str) -> std::result::Result<u32, ImageError> {
        let tok = self.token();
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse::<u32>().ok())
            .ok_or_else(|| ImageError::Header(format!("bad {what} field {:?}", String::from_utf8_lossy(tok))))
    }
}

/// Decoded 8-bit grayscale image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

pub fn decode_pgm(bytes: &[u8]) -> std::result::Result<GrayImage, ImageError> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.token();
    if magic != b"P5" {
        return Err(ImageError::UnsupportedFormat(String::from_utf8_lossy(magic).into_owned()));
    }
    let width = cur.number("width")? as usize;
    let height = cur.number("height")? as usize;
    let maxval = cur.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(ImageError::Header(format!("empty image {width}x{height}")));
    }
    if maxval != 255 {
        return Err(ImageError::UnsupportedMaxval(maxval));
    }
    // Exactly one whitespace byte separates the header from the raster.
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(ImageError::Header("missing separator before pixel data".into())),
    }
    let expected = width * height;
    let payload = &bytes[cur.pos..];
    if payload.len() < expected {
        return Err(ImageError::Truncated { expected, found: payload.len() });
    }
    Ok(GrayImage { width, height, pixels: payload[..expected].to_vec() })
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

impl GrayImage {
    /// `[1, H, W]` tensor with pixel = byte / 255.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.pixels.iter().map(|&b| b as f64 / 255.0).collect();
        Tensor::new(&[1, self.height, self.width], data).expect("non-empty image")
    }

    /// Accepts `[H, W]` or `[1, H, W]` with values in `[0, 1]` (clamped).
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (height, width) = match t.shape() {
            &[h, w] | &[1, h, w] => (h, w),
            s => return Err(Error::Shape(format!("expected [H, W] or [1, H, W] image, got {s:?}"))),
        };
        Ok(Self { width, height, pixels: t.data().iter().map(|&v| to_byte(v)).collect() })
    }
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_pgm(&bytes)?)
}

pub fn write_pgm(img: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pgm(img)).map_err(|e| Error::io(path, e))
}

/// Load a P5 image as a `[1, H, W]` tensor in `[0, 1]`.
pub fn load_pgm(path: impl AsRef<Path>) -> Result<Tensor> {
    Ok(read_pgm(path)?.to_tensor())
}

/// Save a `[H, W]` or `[1, H, W]` tensor as P5, quantising to 8 bits.
pub fn save_pgm(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    write_pgm(&GrayImage::from_tensor(t)?, path)
}

/// Interleaved 8-bit RGB image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = 3 * (row * self.width + col);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn write_ppm(img: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path, e))
}
