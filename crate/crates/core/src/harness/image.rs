//! Binary greyscale PGM (P5) dumps.

use std::fs;
use std::path::Path;

use crate::error::{EdtError, Result};

/// `[-1, 1] → [0, 255]`, clamping out-of-range values.
pub fn to_byte(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

pub fn from_byte(b: u8) -> f64 {
    b as f64 / 127.5 - 1.0
}

/// Row-major `width × height` greyscale image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Gray {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Gray {
    /// Tiles `[C, H, W]` channel planes left to right.
    pub fn from_channels(data: &[f64], channels: usize, h: usize, w: usize) -> Result<Self> {
        if data.len() != channels * h * w {
            return Err(EdtError::Argument(format!(
                "{} values for {channels}x{h}x{w}",
                data.len()
            )));
        }
        let width = channels * w;
        let mut pixels = vec![0u8; width * h];
        for c in 0..channels {
            for y in 0..h {
                for x in 0..w {
                    pixels[y * width + c * w + x] = to_byte(data[(c * h + y) * w + x]);
                }
            }
        }
        Ok(Self { width, height: h, pixels })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| EdtError::Argument(format!("malformed PGM: {m}"));
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header"))?);
        }
        if fields[0] != "P5" || fields[3] != "255" {
            return Err(bad("expected P5 with maxval 255"));
        }
        let width: usize = fields[1].parse().map_err(|_| bad("width"))?;
        let height: usize = fields[2].parse().map_err(|_| bad("height"))?;
        let pixels = bytes.get(pos + 1..).ok_or_else(|| bad("no raster"))?;
        if pixels.len() != width * height {
            return Err(bad("raster size"));
        }
        Ok(Self {
            width,
            height,
            pixels: pixels.to_vec(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| EdtError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path).map_err(|e| EdtError::io(path, e))?)
    }
}
