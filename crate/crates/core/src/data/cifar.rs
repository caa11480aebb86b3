//! CIFAR-10 binary batches: 3073-byte records of one label byte followed by
//! 1024 red, 1024 green and 1024 blue bytes, each plane row-major 32×32.

use super::image::{Image, ImageRecord};
use crate::error::{Error, Result};
use std::path::Path;

pub const SIDE: usize = 32;
pub const PLANE: usize = SIDE * SIDE;
pub const RECORD_LEN: usize = 1 + 3 * PLANE;

pub fn load_cifar(path: &Path) -> Result<Vec<ImageRecord>> {
    let bytes = std::fs::read(path)?;
    parse_cifar(&bytes, &path.display().to_string())
}

pub fn parse_cifar(bytes: &[u8], source: &str) -> Result<Vec<ImageRecord>> {
    if bytes.is_empty() || bytes.len() % RECORD_LEN != 0 {
        return Err(Error::Corrupt(format!(
            "{source}: length {} is not a positive multiple of {RECORD_LEN}",
            bytes.len()
        )));
    }
    bytes
        .chunks_exact(RECORD_LEN)
        .enumerate()
        .map(|(n, rec)| {
            let label = rec[0] as usize;
            if label > 9 {
                return Err(Error::Corrupt(format!(
                    "{source}: record {n} has label {label} > 9"
                )));
            }
            let planes = &rec[1..];
            let image = Image::from_fn(SIDE, SIDE, |x, y| {
                let i = y * SIDE + x;
                [
                    planes[i] as f64 / 255.0,
                    planes[PLANE + i] as f64 / 255.0,
                    planes[2 * PLANE + i] as f64 / 255.0,
                ]
            });
            Ok(ImageRecord {
                image,
                label,
                source: format!("{source}#{n}"),
            })
        })
        .collect()
}

/// Encodes records in the same layout; pixels are quantized to bytes.
pub fn encode_cifar(records: &[ImageRecord]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(records.len() * RECORD_LEN);
    for r in records {
        if r.image.width != SIDE || r.image.height != SIDE || r.label > 9 {
            return Err(Error::invalid("record", "CIFAR records are 32x32 with label <= 9"));
        }
        out.push(r.label as u8);
        for c in 0..3 {
            for y in 0..SIDE {
                for x in 0..SIDE {
                    out.push((r.image.get(x, y)[c].clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
    }
    Ok(out)
}
