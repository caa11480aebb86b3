use crate::error::{Error, Result};
use std::io::Write;
use std::path::Path;

/// RGB image with interleaved channels and values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut img = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                img.set(x, y, f(x, y));
            }
        }
        img
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, px: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&px);
    }

    /// Copy of the square region starting at `(x0, y0)` with side `size`, channels flattened `(y, x, c)`.
    pub fn patch(&self, x0: usize, y0: usize, size: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(size * size * 3);
        for y in y0..y0 + size {
            let start = (y * self.width + x0) * 3;
            out.extend_from_slice(&self.data[start..start + size * 3]);
        }
        out
    }

    pub fn mean(&self) -> [f64; 3] {
        let mut acc = [0.0; 3];
        for px in self.data.chunks_exact(3) {
            for c in 0..3 {
                acc[c] += px[c];
            }
        }
        let n = (self.width * self.height) as f64;
        acc.map(|v| v / n)
    }

    /// Binary portable pixmap (P6, maxval 255).
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(
            self.data
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
        out
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_ppm())?;
        Ok(())
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let mut fields = Vec::with_capacity(4);
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Corrupt("truncated PPM header".into()));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        if fields[0] != "P6" {
            return Err(Error::Corrupt(format!("not a P6 file (magic `{}`)", fields[0])));
        }
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Corrupt(format!("bad PPM header field `{s}`")))
        };
        let (w, h, max) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
        if max == 0 || max > 255 {
            return Err(Error::Corrupt(format!("unsupported maxval {max}")));
        }
        pos += 1;
        let need = w * h * 3;
        if bytes.len() < pos + need {
            return Err(Error::Corrupt("truncated PPM pixel data".into()));
        }
        let data = bytes[pos..pos + need]
            .iter()
            .map(|&b| b as f64 / max as f64)
            .collect();
        Ok(Self {
            width: w,
            height: h,
            data,
        })
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        Self::from_ppm(&std::fs::read(path)?)
    }
}

/// A labeled image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub image: Image,
    pub label: usize,
    pub source: String,
}
