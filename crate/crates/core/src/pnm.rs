//! Binary portable pixmap (P6) and graymap (P5) files, 8-bit only.

use std::path::Path;

use crate::error::{Error, Result};

/// Raw 8-bit raster: `channels` is 3 for P6 and 1 for P5, samples interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub samples: Vec<u8>,
}

impl Raster {
    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 3 { "P6" } else { "P5" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.samples);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            // whitespace and comments
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Format("truncated PNM header".into()));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| Error::Format("bad PNM header".into()))?);
        }
        // exactly one whitespace byte separates the header from the samples
        pos += 1;
        let channels = match fields[0] {
            "P6" => 3,
            "P5" => 1,
            other => return Err(Error::Format(format!("unsupported PNM magic {other:?}"))),
        };
        let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PNM number {s:?}")));
        let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
        if maxval != 255 {
            return Err(Error::Format(format!("only 8-bit PNM supported, maxval {maxval}")));
        }
        let need = width * height * channels;
        let samples = bytes.get(pos..pos + need).ok_or_else(|| Error::Format("truncated PNM data".into()))?;
        Ok(Self {
            width,
            height,
            channels,
            samples: samples.to_vec(),
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::path(path, e))?;
        Self::decode(&bytes)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::path(path, e))
    }
}

/// Maps `[0,1]` to `0..=255` with rounding; values outside are clamped.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
