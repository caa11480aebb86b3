use crate::analyze::load;
use anyhow::{Context, Result};
use aps_core::data::{augment, synth_dataset, AugmentParams, Image};
use aps_core::geometry::PatchGrid;
use aps_core::rng::stream;
use aps_core::sampler::{sample_pair, SamplerConfig};
use aps_core::Error;
use clap::Args;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::PathBuf;

#[derive(Args, Debug)]
pub struct DemoArgs {
    #[command(flatten)]
    pub common: crate::Common,
    /// Source image (binary PPM); a synthetic image is used otherwise.
    #[arg(long)]
    pub image: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DemoConfig {
    pub seed: u64,
    /// Side of the synthetic source image.
    pub image_size: usize,
    pub view_size: usize,
    pub patch_size: usize,
    pub s1: f64,
    pub s2: f64,
    pub gamma: f64,
    /// `geometric` (random resized crop and flip) or `identity` (both views are the full image).
    pub crops: String,
    /// Nearest-neighbour upscaling of the written images.
    pub scale: usize,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            image_size: 96,
            view_size: 64,
            patch_size: 8,
            s1: 0.25,
            s2: 0.25,
            gamma: 3.0,
            crops: "geometric".into(),
            scale: 4,
        }
    }
}

impl DemoConfig {
    fn params(&self) -> aps_core::Result<AugmentParams> {
        match self.crops.as_str() {
            "geometric" => Ok(AugmentParams::geometric_only(self.view_size, (0.15, 1.0))),
            "identity" => Ok(AugmentParams::identity(self.view_size)),
            other => Err(Error::invalid("crops", format!("unknown crop mode `{other}`"))),
        }
    }

    fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            s1: self.s1,
            s2: self.s2,
            gamma: self.gamma,
            n_views: 1,
        }
    }

    pub fn validate(&self) -> aps_core::Result<()> {
        self.params()?.validate()?;
        self.sampler().validate()?;
        if self.patch_size == 0 || self.view_size % self.patch_size != 0 {
            return Err(Error::invalid("patch_size", "must divide view_size"));
        }
        if self.scale == 0 || self.image_size == 0 {
            return Err(Error::invalid("scale/image_size", "must be positive"));
        }
        Ok(())
    }
}

fn upscale(img: &Image, k: usize) -> Image {
    Image::from_fn(img.width * k, img.height * k, |x, y| img.get(x / k, y / k))
}

fn patch_map(grid: &PatchGrid, value: impl Fn(usize) -> f64) -> Image {
    let p = grid.patch_size;
    let side = grid.crop.view_size;
    Image::from_fn(side, side, |x, y| {
        let v = value((y / p) * grid.n_cols + x / p);
        [v, v, v]
    })
}

pub fn run(args: &DemoArgs) -> Result<()> {
    let c = &args.common;
    let mut cfg: DemoConfig = load(c.config.as_deref())?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    if c.dry_run {
        print!("{}", toml::to_string(&cfg)?);
        return Ok(());
    }
    let source = match &args.image {
        Some(p) => Image::read_ppm(p).with_context(|| format!("reading {}", p.display()))?,
        None => synth_dataset(1, 1, cfg.image_size, cfg.seed)?.remove(0).image,
    };
    let params = cfg.params()?;
    let mut rng = stream(cfg.seed, 0);
    let (v1, c1) = augment(&source, &params, &mut rng)?;
    let (v2, c2) = augment(&source, &params, &mut rng)?;
    let g1 = PatchGrid::new(c1, cfg.patch_size)?;
    let g2 = PatchGrid::new(c2, cfg.patch_size)?;
    let pair = sample_pair(&g1, &g2, &cfg.sampler(), &mut rng)?;
    let m1 = pair.view1.mask();
    let m2 = pair.view2.mask();
    let r = &pair.profile.ratios;

    let on = |b: bool| if b { 1.0 } else { 0.0 };
    let images = [
        ("crop1.ppm", v1),
        ("crop2.ppm", v2),
        ("view1_mask.ppm", patch_map(&g1, |i| on(m1[i]))),
        ("view2_overlap.ppm", patch_map(&g2, |i| r[i])),
        ("view2_mask.ppm", patch_map(&g2, |i| on(m2[i]))),
    ];
    std::fs::create_dir_all(&c.out)?;
    for (name, img) in &images {
        upscale(img, cfg.scale).write_ppm(&c.out.join(name))?;
    }
    let mut csv = String::from("patch,row,col,r_overlap,view2_selected\n");
    for i in 0..g2.len() {
        let (row, col) = g2.position(i);
        let _ = writeln!(csv, "{i},{row},{col},{:.8},{}", r[i], m2[i] as u8);
    }
    std::fs::write(c.out.join("view2_patches.csv"), csv)?;

    let mean = |sel: bool| {
        let v: Vec<f64> = (0..r.len()).filter(|&i| m2[i] == sel).map(|i| r[i]).collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    };
    println!(
        "view1 {} patches, view2 {} patches; mean overlap ratio selected {:.4}, unselected {:.4}",
        pair.view1.len(),
        pair.view2.len(),
        mean(true),
        mean(false)
    );
    Ok(())
}
