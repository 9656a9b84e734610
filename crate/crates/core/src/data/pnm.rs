//! Binary Netpbm images: P6 (RGB) and P5 (grayscale), maxval 255.

use std::fs;
use std::path::Path;

use crate::error::{CftError, Result};

/// 8-bit image with interleaved channels, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image8 {
    pub width: usize,
    pub height: usize,
    /// 1 (gray) or 3 (RGB).
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl Image8 {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Image8 {
            width,
            height,
            channels,
            pixels: vec![0; width * height * channels],
        }
    }

    pub fn from_pixels(width: usize, height: usize, channels: usize, pixels: Vec<u8>) -> Result<Self> {
        if !matches!(channels, 1 | 3) {
            return Err(CftError::format("image", format!("{channels} channels")));
        }
        if pixels.len() != width * height * channels {
            return Err(CftError::format(
                "image",
                format!("{} bytes for {width}x{height}x{channels}", pixels.len()),
            ));
        }
        Ok(Image8 {
            width,
            height,
            channels,
            pixels,
        })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: u8) {
        self.pixels[(y * self.width + x) * self.channels + c] = v;
    }

    fn magic(&self) -> &'static str {
        if self.channels == 3 {
            "P6"
        } else {
            "P5"
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("{}\n{} {}\n255\n", self.magic(), self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let magic = next_token(bytes, &mut pos)?;
        let channels = match magic {
            b"P6" => 3,
            b"P5" => 1,
            other => {
                return Err(CftError::format(
                    "pnm header",
                    format!("unsupported magic {:?}", String::from_utf8_lossy(other)),
                ))
            }
        };
        let width = parse_usize(next_token(bytes, &mut pos)?)?;
        let height = parse_usize(next_token(bytes, &mut pos)?)?;
        let maxval = parse_usize(next_token(bytes, &mut pos)?)?;
        if maxval != 255 {
            return Err(CftError::format("pnm header", format!("maxval {maxval}, expected 255")));
        }
        if width == 0 || height == 0 {
            return Err(CftError::format("pnm header", "zero extent"));
        }
        // exactly one whitespace byte separates the header from the raster
        match bytes.get(pos) {
            Some(b) if b.is_ascii_whitespace() => pos += 1,
            _ => return Err(CftError::format("pnm header", "missing raster separator")),
        }
        let need = width * height * channels;
        let raster = &bytes[pos..];
        if raster.len() < need {
            return Err(CftError::format(
                "pnm raster",
                format!("truncated: {} of {need} bytes", raster.len()),
            ));
        }
        if raster.len() > need {
            return Err(CftError::format(
                "pnm raster",
                format!("{} trailing bytes", raster.len() - need),
            ));
        }
        Image8::from_pixels(width, height, channels, raster.to_vec())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|e| CftError::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| CftError::io(path, e))?;
        Image8::decode(&bytes)
    }
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(CftError::format("pnm header", "unexpected end of header"));
    }
    Ok(&bytes[start..*pos])
}

fn parse_usize(tok: &[u8]) -> Result<usize> {
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| {
            CftError::format(
                "pnm header",
                format!("expected a number, got {:?}", String::from_utf8_lossy(tok)),
            )
        })
}
