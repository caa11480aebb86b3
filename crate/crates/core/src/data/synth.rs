//! Procedural class-conditional images used as a desk-scale dataset.
//!
//! Class `c` of `C` renders a sinusoidal grating whose orientation, spatial
//! frequency and tint depend on `c`, plus per-image jitter, a soft blob and
//! pixel noise.

use super::image::{Image, ImageRecord};
use crate::error::{Error, Result};
use crate::rng::stream;
use rand::Rng;
use std::f64::consts::PI;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthManifest {
    pub seed: u64,
    pub classes: usize,
    pub n_per_class: usize,
    pub image_size: usize,
}

impl SynthManifest {
    pub fn to_text(&self) -> String {
        format!(
            "# aps synthetic dataset\nseed={}\nclasses={}\nn_per_class={}\nimage_size={}\n",
            self.seed, self.classes, self.n_per_class, self.image_size
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut fields = std::collections::BTreeMap::new();
        for line in text.lines().map(str::trim) {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Corrupt(format!("manifest line `{line}`")))?;
            let v: u64 = v
                .trim()
                .parse()
                .map_err(|_| Error::Corrupt(format!("manifest value `{v}`")))?;
            if fields.insert(k.trim().to_string(), v).is_some() {
                return Err(Error::Corrupt(format!("duplicate manifest key `{k}`")));
            }
        }
        let mut take = |k: &str| {
            fields
                .remove(k)
                .ok_or_else(|| Error::Corrupt(format!("manifest missing `{k}`")))
        };
        let m = Self {
            seed: take("seed")?,
            classes: take("classes")? as usize,
            n_per_class: take("n_per_class")? as usize,
            image_size: take("image_size")? as usize,
        };
        if let Some(k) = fields.keys().next() {
            return Err(Error::Corrupt(format!("unknown manifest key `{k}`")));
        }
        Ok(m)
    }

    pub fn generate(&self) -> Result<Vec<ImageRecord>> {
        synth_dataset(self.n_per_class, self.classes, self.image_size, self.seed)
    }
}

/// `n_per_class · classes` images, interleaved by class, deterministic per seed.
pub fn synth_dataset(
    n_per_class: usize,
    classes: usize,
    image_size: usize,
    seed: u64,
) -> Result<Vec<ImageRecord>> {
    if n_per_class == 0 {
        return Err(Error::invalid("n_per_class", "must be at least 1"));
    }
    if classes == 0 {
        return Err(Error::invalid("classes", "must be at least 1"));
    }
    if image_size < 4 {
        return Err(Error::invalid("image_size", "must be at least 4"));
    }
    let mut out = Vec::with_capacity(n_per_class * classes);
    for i in 0..n_per_class {
        for c in 0..classes {
            let id = (i * classes + c) as u64;
            let mut rng = stream(seed, id);
            out.push(ImageRecord {
                image: render(c, classes, image_size, &mut rng),
                label: c,
                source: format!("synth:{seed}:{id}"),
            });
        }
    }
    Ok(out)
}

fn render<R: Rng>(class: usize, classes: usize, size: usize, rng: &mut R) -> Image {
    let frac = class as f64 / classes as f64;
    let theta = PI * frac + rng.gen_range(-0.15..0.15);
    let freq = (2.0 + (class % 3) as f64 * 1.5) * rng.gen_range(0.9..1.1);
    let phase = rng.gen_range(0.0..2.0 * PI);
    let hue = (frac + rng.gen_range(-0.04..0.04)).rem_euclid(1.0);
    let tint = hue_to_rgb(hue);
    let bg = rng.gen_range(0.1..0.3);
    let (bx, by) = (rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8));
    let br = rng.gen_range(0.1..0.25);
    let (ct, st) = (theta.cos(), theta.sin());
    let s = size as f64;
    Image::from_fn(size, size, |x, y| {
        let (u, v) = ((x as f64 + 0.5) / s, (y as f64 + 0.5) / s);
        let wave = 0.5 * (1.0 + (2.0 * PI * freq * (u * ct + v * st) + phase).sin());
        let d2 = (u - bx).powi(2) + (v - by).powi(2);
        let blob = 0.3 * (-d2 / (2.0 * br * br)).exp();
        let mut px = [0.0; 3];
        for c in 0..3 {
            let noise = rng.gen_range(-0.05..0.05);
            px[c] = (bg + 0.6 * wave * tint[c] + blob + noise).clamp(0.0, 1.0);
        }
        px
    })
}

fn hue_to_rgb(h: f64) -> [f64; 3] {
    let f = |n: f64| {
        let k = (n + h * 6.0).rem_euclid(6.0);
        1.0 - k.min(4.0 - k).clamp(0.0, 1.0)
    };
    [f(5.0), f(3.0), f(1.0)]
}
