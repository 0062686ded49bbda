//! Binary PPM (P6) / PGM (P5) image I/O.
//!
//! Pixel bytes are written verbatim, so write-then-read is bit-exact. Model
//! space maps u8 value v to 2 * v / 255 - 1.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// 8-bit interleaved image; `channels` is 3 (PPM) or 1 (PGM).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageU8 {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl ImageU8 {
    pub fn new(width: usize, height: usize, channels: usize, fill: u8) -> Self {
        ImageU8 {
            width,
            height,
            channels,
            data: vec![fill; width * height * channels],
        }
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, x: usize, y: usize, c: usize, v: u8) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Channel-major f32 planes in [-1, 1] (CHW layout, the model's input).
    pub fn to_chw_f32(&self) -> Vec<f32> {
        let (w, h, c) = (self.width, self.height, self.channels);
        let mut out = vec![0.0f32; w * h * c];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out[(ch * h + y) * w + x] = u8_to_unit(self.get(x, y, ch));
                }
            }
        }
        out
    }

    /// Inverse of [`to_chw_f32`]; values are clamped to [-1, 1] first.
    pub fn from_chw_f32(data: &[f32], channels: usize, height: usize, width: usize) -> Self {
        let mut img = ImageU8::new(width, height, channels, 0);
        for y in 0..height {
            for x in 0..width {
                for ch in 0..channels {
                    img.set(x, y, ch, unit_to_u8(data[(ch * height + y) * width + x]));
                }
            }
        }
        img
    }
}

pub fn u8_to_unit(v: u8) -> f32 {
    2.0 * v as f32 / 255.0 - 1.0
}

pub fn unit_to_u8(v: f32) -> u8 {
    let v = v.clamp(-1.0, 1.0);
    ((v + 1.0) * 255.0 / 2.0).round() as u8
}

pub fn write_image(path: &Path, img: &ImageU8) -> Result<()> {
    let magic = match img.channels {
        3 => "P6",
        1 => "P5",
        other => {
            return Err(Error::Config(format!("cannot serialize {other}-channel image")));
        }
    };
    let mut buf = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    buf.extend_from_slice(&img.data);
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_image(path: &Path) -> Result<ImageU8> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    parse_image(&bytes).map_err(|msg| Error::Config(format!("{}: {msg}", path.display())))
}

fn parse_image(bytes: &[u8]) -> std::result::Result<ImageU8, String> {
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> std::result::Result<String, String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token(bytes)?;
    let channels = match magic.as_str() {
        "P6" => 3,
        "P5" => 1,
        other => return Err(format!("unsupported magic '{other}'")),
    };
    let width: usize = token(bytes)?.parse().map_err(|_| "bad width".to_string())?;
    let height: usize = token(bytes)?.parse().map_err(|_| "bad height".to_string())?;
    let maxval: usize = token(bytes)?.parse().map_err(|_| "bad maxval".to_string())?;
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    // exactly one whitespace byte separates the header from pixel data
    pos += 1;
    let need = width * height * channels;
    if bytes.len() < pos + need {
        return Err(format!(
            "pixel data truncated: have {}, need {need}",
            bytes.len().saturating_sub(pos)
        ));
    }
    Ok(ImageU8 {
        width,
        height,
        channels,
        data: bytes[pos..pos + need].to_vec(),
    })
}
