//! View augmentation: random resized crop, horizontal flip, color jitter,
//! grayscale, and the optional blur/solarization used by the ImageNet presets.
//!
//! [`augment`] returns the crop geometry alongside the pixels so that patch
//! overlap can be computed in original-image coordinates.

use super::image::Image;
use crate::error::{Error, Result};
use crate::geometry::{CropBox, Rect};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentParams {
    /// Crop area as a fraction of the image area.
    pub area: (f64, f64),
    pub aspect: (f64, f64),
    pub flip_p: f64,
    pub jitter_p: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub grayscale_p: f64,
    pub blur_p: f64,
    pub blur_sigma: (f64, f64),
    pub solarize_p: f64,
    pub view_size: usize,
}

impl AugmentParams {
    pub fn cifar(view_size: usize) -> Self {
        Self {
            area: (0.15, 1.0),
            aspect: (3.0 / 4.0, 4.0 / 3.0),
            flip_p: 0.5,
            jitter_p: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.1,
            grayscale_p: 0.2,
            blur_p: 0.0,
            blur_sigma: (0.1, 2.0),
            solarize_p: 0.0,
            view_size,
        }
    }

    fn imagenet(view_size: usize, blur_p: f64, solarize_p: f64) -> Self {
        Self {
            area: (0.08, 1.0),
            saturation: 0.2,
            blur_p,
            solarize_p,
            ..Self::cifar(view_size)
        }
    }

    /// Crop and resize only: no flip, color, blur or solarization.
    pub fn geometric_only(view_size: usize, area: (f64, f64)) -> Self {
        Self {
            area,
            flip_p: 0.0,
            jitter_p: 0.0,
            grayscale_p: 0.0,
            blur_p: 0.0,
            solarize_p: 0.0,
            ..Self::cifar(view_size)
        }
    }

    /// Full image, no randomness at all.
    pub fn identity(view_size: usize) -> Self {
        Self {
            aspect: (1.0, 1.0),
            ..Self::geometric_only(view_size, (1.0, 1.0))
        }
    }

    pub fn validate(&self) -> Result<()> {
        let range = |arg: &'static str, (lo, hi): (f64, f64), min: f64| {
            if lo.is_finite() && hi.is_finite() && lo > min && lo <= hi {
                Ok(())
            } else {
                Err(Error::invalid(arg, format!("bad range [{lo}, {hi}]")))
            }
        };
        range("area", self.area, 0.0)?;
        if self.area.1 > 1.0 {
            return Err(Error::invalid("area", "upper bound exceeds 1"));
        }
        range("aspect", self.aspect, 0.0)?;
        range("blur_sigma", self.blur_sigma, 0.0)?;
        for (name, p) in [
            ("flip_p", self.flip_p),
            ("jitter_p", self.jitter_p),
            ("grayscale_p", self.grayscale_p),
            ("blur_p", self.blur_p),
            ("solarize_p", self.solarize_p),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(name, format!("probability {p} not in [0, 1]")));
            }
        }
        for (name, v) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(name, format!("{v} not in [0, 1]")));
            }
        }
        if !(0.0..=0.5).contains(&self.hue) {
            return Err(Error::invalid("hue", format!("{} not in [0, 0.5]", self.hue)));
        }
        if self.view_size == 0 {
            return Err(Error::invalid("view_size", "must be positive"));
        }
        Ok(())
    }
}

/// The two augmentations of a positive pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentPair {
    pub first: AugmentParams,
    pub second: AugmentParams,
}

impl AugmentPair {
    pub fn cifar(view_size: usize) -> Self {
        let p = AugmentParams::cifar(view_size);
        Self { first: p, second: p }
    }

    /// Blur is always applied to the first view and rarely to the second;
    /// solarization only appears in the second.
    pub fn imagenet(view_size: usize) -> Self {
        Self {
            first: AugmentParams::imagenet(view_size, 1.0, 0.0),
            second: AugmentParams::imagenet(view_size, 0.1, 0.2),
        }
    }

    pub fn symmetric(params: AugmentParams) -> Self {
        Self {
            first: params,
            second: params,
        }
    }
}

/// Random-resized-crop rectangle: area fraction uniform in `area`, aspect
/// ratio log-uniform in `aspect`, position uniform. After ten rejected draws
/// falls back to the largest centered crop with clamped aspect ratio.
pub fn random_crop_rect<R: Rng + ?Sized>(
    rng: &mut R,
    width: f64,
    height: f64,
    area: (f64, f64),
    aspect: (f64, f64),
) -> Result<Rect> {
    let total = width * height;
    let (log_lo, log_hi) = (aspect.0.ln(), aspect.1.ln());
    for _ in 0..10 {
        let target = total * uniform(rng, area.0, area.1);
        let ratio = uniform(rng, log_lo, log_hi).exp();
        let w = (target * ratio).sqrt();
        let h = (target / ratio).sqrt();
        if w > 0.0 && h > 0.0 && w <= width && h <= height {
            let x = uniform(rng, 0.0, width - w);
            let y = uniform(rng, 0.0, height - h);
            return Rect::new(x, y, x + w, y + h);
        }
    }
    let in_ratio = width / height;
    let (w, h) = if in_ratio < aspect.0 {
        (width, width / aspect.0)
    } else if in_ratio > aspect.1 {
        (height * aspect.1, height)
    } else {
        (width, height)
    };
    let x = (width - w) / 2.0;
    let y = (height - h) / 2.0;
    Rect::new(x, y, x + w, y + h)
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Applies one augmentation and returns the view plus its crop box.
pub fn augment<R: Rng + ?Sized>(
    image: &Image,
    params: &AugmentParams,
    rng: &mut R,
) -> Result<(Image, CropBox)> {
    params.validate()?;
    let (w, h) = (image.width as f64, image.height as f64);
    let mut rect = None;
    for _ in 0..32 {
        let r = random_crop_rect(rng, w, h, params.area, params.aspect)?;
        if r.width() >= 1.0 && r.height() >= 1.0 {
            rect = Some(r);
            break;
        }
    }
    let rect = match rect {
        Some(r) => r,
        None => Rect::new(0.0, 0.0, w, h)?,
    };
    let flip = params.flip_p > 0.0 && rng.gen_bool(params.flip_p);
    let crop = CropBox::new(rect, flip, params.view_size, (w, h))?;
    let mut view = resample(image, &crop);

    if params.jitter_p > 0.0 && rng.gen_bool(params.jitter_p) {
        let b = uniform(rng, (1.0 - params.brightness).max(0.0), 1.0 + params.brightness);
        let c = uniform(rng, (1.0 - params.contrast).max(0.0), 1.0 + params.contrast);
        let s = uniform(rng, (1.0 - params.saturation).max(0.0), 1.0 + params.saturation);
        let hshift = uniform(rng, -params.hue, params.hue);
        adjust_brightness(&mut view, b);
        adjust_contrast(&mut view, c);
        adjust_saturation(&mut view, s);
        adjust_hue(&mut view, hshift);
    }
    if params.grayscale_p > 0.0 && rng.gen_bool(params.grayscale_p) {
        to_grayscale(&mut view);
    }
    if params.blur_p > 0.0 && rng.gen_bool(params.blur_p) {
        let sigma = uniform(rng, params.blur_sigma.0, params.blur_sigma.1);
        view = gaussian_blur(&view, sigma);
    }
    if params.solarize_p > 0.0 && rng.gen_bool(params.solarize_p) {
        solarize(&mut view, 0.5);
    }
    Ok((view, crop))
}

/// Bilinear resampling of the crop into a `view_size`² view.
///
/// View pixel centers are mapped through the crop box, so a full-image crop
/// at the native resolution reproduces the source exactly (mirrored if flipped).
pub fn resample(image: &Image, crop: &CropBox) -> Image {
    let n = crop.view_size;
    let max_x = (image.width - 1) as f64;
    let max_y = (image.height - 1) as f64;
    Image::from_fn(n, n, |u, v| {
        let (x, y) = crop.view_to_image(u as f64 + 0.5, v as f64 + 0.5);
        let xs = (x - 0.5).clamp(0.0, max_x);
        let ys = (y - 0.5).clamp(0.0, max_y);
        let (x0, y0) = (xs.floor() as usize, ys.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(image.width - 1), (y0 + 1).min(image.height - 1));
        let (fx, fy) = (xs - x0 as f64, ys - y0 as f64);
        let (a, b, c, d) = (image.get(x0, y0), image.get(x1, y0), image.get(x0, y1), image.get(x1, y1));
        let mut px = [0.0; 3];
        for k in 0..3 {
            let top = if fx == 0.0 { a[k] } else { a[k] * (1.0 - fx) + b[k] * fx };
            let bot = if fx == 0.0 { c[k] } else { c[k] * (1.0 - fx) + d[k] * fx };
            px[k] = if fy == 0.0 { top } else { top * (1.0 - fy) + bot * fy };
        }
        px
    })
}

fn luma(px: [f64; 3]) -> f64 {
    0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]
}

fn map_pixels(img: &mut Image, mut f: impl FnMut([f64; 3]) -> [f64; 3]) {
    for px in img.data.chunks_exact_mut(3) {
        let out = f([px[0], px[1], px[2]]);
        px.copy_from_slice(&out.map(|v| v.clamp(0.0, 1.0)));
    }
}

pub fn adjust_brightness(img: &mut Image, factor: f64) {
    map_pixels(img, |p| p.map(|v| v * factor));
}

pub fn adjust_contrast(img: &mut Image, factor: f64) {
    let n = (img.width * img.height) as f64;
    let mean = img.data.chunks_exact(3).map(|p| luma([p[0], p[1], p[2]])).sum::<f64>() / n;
    map_pixels(img, |p| p.map(|v| factor * v + (1.0 - factor) * mean));
}

pub fn adjust_saturation(img: &mut Image, factor: f64) {
    map_pixels(img, |p| {
        let g = luma(p);
        p.map(|v| factor * v + (1.0 - factor) * g)
    });
}

/// Rotates hue by `shift` (in turns) through HSV space.
pub fn adjust_hue(img: &mut Image, shift: f64) {
    map_pixels(img, |p| {
        let (h, s, v) = rgb_to_hsv(p);
        hsv_to_rgb((h + shift).rem_euclid(1.0), s, v)
    });
}

pub fn to_grayscale(img: &mut Image) {
    map_pixels(img, |p| {
        let g = luma(p);
        [g, g, g]
    });
}

pub fn solarize(img: &mut Image, threshold: f64) {
    map_pixels(img, |p| p.map(|v| if v >= threshold { 1.0 - v } else { v }));
}

/// Separable Gaussian blur with a `ceil(3σ)` radius and clamped borders.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let pass = |src: &Image, horizontal: bool| {
        Image::from_fn(src.width, src.height, |x, y| {
            let mut acc = [0.0; 3];
            for (k, w) in kernel.iter().enumerate() {
                let off = k as isize - radius;
                let (sx, sy) = if horizontal {
                    ((x as isize + off).clamp(0, src.width as isize - 1) as usize, y)
                } else {
                    (x, (y as isize + off).clamp(0, src.height as isize - 1) as usize)
                };
                let p = src.get(sx, sy);
                for c in 0..3 {
                    acc[c] += w * p[c];
                }
            }
            acc
        })
    };
    pass(&pass(img, true), false)
}

fn rgb_to_hsv([r, g, b]: [f64; 3]) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let f = |n: f64| {
        let k = (n + h * 6.0).rem_euclid(6.0);
        v - v * s * k.min(4.0 - k).clamp(0.0, 1.0)
    };
    [f(5.0), f(3.0), f(1.0)]
}
