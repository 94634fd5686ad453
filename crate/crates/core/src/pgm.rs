//! Binary (P5) PGM images, 8-bit only.

use std::io::{self, Read, Write};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PgmError {
    #[error("not a binary PGM (P5) file")]
    BadMagic,
    #[error("malformed PGM header: {0}")]
    BadHeader(String),
    #[error("only 8-bit PGM is supported (maxval {0})")]
    Unsupported(u32),
    #[error("pixel data truncated: expected {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        GrayImage { width, height, pixels: vec![0; width * height] }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    /// Values in `[0, 1]`.
    pub fn to_unit(&self) -> Vec<f32> {
        self.pixels.iter().map(|p| f32::from(*p) / 255.0).collect()
    }

    /// Rounds and clamps values in `[0, 1]` to 8 bits.
    pub fn from_unit(width: usize, height: usize, values: &[f32]) -> Self {
        assert_eq!(values.len(), width * height);
        let pixels = values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        GrayImage { width, height, pixels }
    }

    /// Min-max normalizes arbitrary values; `None` pixels are black.
    pub fn normalized(width: usize, height: usize, values: &[Option<f32>]) -> Self {
        let known = values.iter().flatten().filter(|v| v.is_finite());
        let (lo, hi) = known.fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
        let span = if hi > lo { hi - lo } else { 1.0 };
        let unit: Vec<f32> = values.iter().map(|v| v.map_or(0.0, |v| (v - lo) / span)).collect();
        Self::from_unit(width, height, &unit)
    }

    /// Nearest-neighbour resize.
    pub fn resized(&self, width: usize, height: usize) -> Self {
        let mut out = GrayImage::new(width, height);
        for y in 0..height {
            for x in 0..width {
                out.pixels[y * width + x] = self.get(x * self.width / width, y * self.height / height);
            }
        }
        out
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn write_to(&self, mut w: impl Write) -> io::Result<()> {
        w.write_all(&self.encode())
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, PgmError> {
        if !bytes.starts_with(b"P5") {
            return Err(PgmError::BadMagic);
        }
        let mut pos = 2;
        let mut fields = [0u32; 3];
        for field in &mut fields {
            loop {
                while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                if bytes.get(pos) == Some(&b'#') {
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
            let text = std::str::from_utf8(&bytes[start..pos]).unwrap_or_default();
            *field = text.parse().map_err(|_| PgmError::BadHeader(format!("expected a number at byte {start}")))?;
        }
        if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
            return Err(PgmError::BadHeader("missing separator before pixel data".into()));
        }
        pos += 1;
        let [width, height, maxval] = fields;
        if maxval == 0 || maxval > 255 {
            return Err(PgmError::Unsupported(maxval));
        }
        let (width, height) = (width as usize, height as usize);
        let expected = width * height;
        let data = &bytes[pos..];
        if data.len() < expected {
            return Err(PgmError::Truncated { expected, got: data.len() });
        }
        let pixels = data[..expected]
            .iter()
            .map(|p| if maxval == 255 { *p } else { ((u32::from(*p) * 255 + maxval / 2) / maxval) as u8 })
            .collect();
        Ok(GrayImage { width, height, pixels })
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, PgmError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::decode(&bytes)
    }
}
