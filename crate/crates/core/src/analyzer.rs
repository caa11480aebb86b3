//! Closed-form asymmetry expectations and their Monte Carlo counterparts.
//!
//! The overlap of a positive pair is the fraction of the second crop covered
//! by both views: `Σ_{i ∈ view2} r_i / N`, where `r_i` is the overlap ratio of
//! grid-2 patch `i` against the sampled view-1 patches and `N` the grid size.
//! For identical crops this is the fraction of patches sampled by both views,
//! whose expectation is `s1 · s2`.

use crate::data::augment::random_crop_rect;
use crate::error::{Error, Result};
use crate::geometry::{CropBox, PatchGrid};
use crate::rng::stream;
use crate::sampler::{
    overlap_profile, sample_selective, sample_sparse, selective_weights, SamplerConfig,
};
use rand::Rng;
use rayon::prelude::*;
use std::fmt::{self, Write as _};

pub fn expected_overlap_naive(s1: f64, s2: f64) -> f64 {
    s1 * s2
}

pub fn expected_overlap_selective(s1: f64, s2: f64, gamma: f64) -> f64 {
    s1 * s2 / (gamma + 2.0)
}

/// Normalized selective sampling density `(γ + 1) · s1 · (1 − r)^γ`.
pub fn selective_density(r: f64, gamma: f64, s1: f64) -> f64 {
    (gamma + 1.0) * s1 * (1.0 - r).powf(gamma)
}

/// Integral of the selective density over `r ∈ [0, 1]`; equals `s1`.
pub fn pdf_normalization(gamma: f64, s1: f64) -> f64 {
    integrate(|r| selective_density(r, gamma, s1), 0.0, 1.0, 1e-12)
}

/// `∫ s2 · p_sel(r) · r dr` over `[0, 1]`, i.e. the selective expectation
/// under a continuous, uniformly distributed overlap ratio.
pub fn expected_overlap_quadrature(s1: f64, s2: f64, gamma: f64) -> f64 {
    integrate(
        |r| s2 * selective_density(r, gamma, s1) * r,
        0.0,
        1.0,
        1e-12,
    )
}

/// Adaptive Simpson quadrature to absolute tolerance `tol`.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(fa: f64, fm: f64, fb: f64, a: f64, b: f64) -> f64 {
        (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    }
    #[allow(clippy::too_many_arguments)]
    fn recurse<F: Fn(f64) -> f64>(
        f: &F,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = simpson(fa, flm, fm, a, m);
        let right = simpson(fm, frm, fb, m, b);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        recurse(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
            + recurse(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
    let fa = f(a);
    let fb = f(b);
    let fm = f(0.5 * (a + b));
    let whole = simpson(fa, fm, fb, a, b);
    recurse(&f, a, b, fa, fm, fb, whole, tol, 48)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Naive,
    Selective,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Naive => "naive",
            Strategy::Selective => "selective",
        })
    }
}

/// How the two crops of a simulated positive pair relate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CropModel {
    /// Both views tile the same full-image crop.
    Identical,
    /// Independent random-resized crops (area in [0.15, 1], aspect log-uniform in [3/4, 4/3]) with random flips.
    Random,
}

impl fmt::Display for CropModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CropModel::Identical => "identical",
            CropModel::Random => "random",
        })
    }
}

impl std::str::FromStr for CropModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identical" => Ok(CropModel::Identical),
            "random" => Ok(CropModel::Random),
            other => Err(Error::invalid("crop_model", format!("unknown crop model `{other}`"))),
        }
    }
}

const CROP_AREA: (f64, f64) = (0.15, 1.0);
const CROP_ASPECT: (f64, f64) = (3.0 / 4.0, 4.0 / 3.0);
const CHUNK: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct AsymmetryReport {
    pub strategy: Strategy,
    pub crop_model: CropModel,
    pub analytic: f64,
    pub estimate: f64,
    pub std_error: f64,
    pub trials: usize,
    pub s1: f64,
    pub s2: f64,
    pub gamma: f64,
    pub grid: usize,
}

impl AsymmetryReport {
    pub fn analytic_non_overlap(&self) -> f64 {
        1.0 - self.analytic
    }

    pub fn estimate_non_overlap(&self) -> f64 {
        1.0 - self.estimate
    }

    pub const CSV_HEADER: &'static str = "strategy,crop_model,s1,s2,gamma,grid,trials,analytic,estimate,std_error,analytic_non_overlap,estimate_non_overlap";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{:.8},{:.8},{:.8},{:.8},{:.8}",
            self.strategy,
            self.crop_model,
            self.s1,
            self.s2,
            self.gamma,
            self.grid,
            self.trials,
            self.analytic,
            self.estimate,
            self.std_error,
            self.analytic_non_overlap(),
            self.estimate_non_overlap()
        )
    }
}

/// Both strategies evaluated on the same crops and view-1 samples.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedReport {
    pub naive: AsymmetryReport,
    pub selective: AsymmetryReport,
    /// Mean and standard error of the per-trial difference `selective − naive`.
    pub diff_mean: f64,
    pub diff_std_error: f64,
}

impl PairedReport {
    /// Ratio of the selective to the naive estimate.
    pub fn ratio(&self) -> f64 {
        self.selective.estimate / self.naive.estimate
    }
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    // f64 sums start from -0.0; keep an all-zero mean positive in reports
    let mean = values.iter().sum::<f64>() / n + 0.0;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn draw_crop<R: Rng + ?Sized>(rng: &mut R, model: CropModel, grid: usize) -> Result<PatchGrid> {
    let crop = match model {
        CropModel::Identical => CropBox::full(1.0, 1.0, grid)?,
        CropModel::Random => {
            let rect = random_crop_rect(rng, 1.0, 1.0, CROP_AREA, CROP_ASPECT)?;
            let flip = rng.gen_bool(0.5);
            CropBox::new(rect, flip, grid, (1.0, 1.0))?
        }
    };
    PatchGrid::new(crop, 1)
}

/// One simulated positive pair: `(naive overlap, selective overlap)`.
fn simulate_pair<R: Rng + ?Sized>(
    config: &SamplerConfig,
    model: CropModel,
    grid: usize,
    rng: &mut R,
) -> Result<(f64, f64)> {
    let g1 = draw_crop(rng, model, grid)?;
    let g2 = match model {
        CropModel::Identical => g1,
        CropModel::Random => draw_crop(rng, model, grid)?,
    };
    let view1 = sample_sparse(&g1, config.s1, rng)?;
    let profile = overlap_profile(&view1, &g2)?;
    let n = g2.len() as f64;
    let overlap = |idx: &[usize]| idx.iter().map(|&i| profile.ratios[i]).sum::<f64>() / n;

    let naive = sample_sparse(&g2, config.s2, rng)?;
    let weights = selective_weights(&profile, config.gamma);
    let selective = sample_selective(&g2, &weights, config.s2, rng)?;
    Ok((overlap(naive.indices()), overlap(selective.indices())))
}

/// Paired Monte Carlo estimate of the overlap expectation for both strategies.
///
/// Trials are split into fixed-size chunks, each with its own random stream
/// derived from `seed`, so the result is independent of thread count.
pub fn monte_carlo_paired(
    config: &SamplerConfig,
    crop_model: CropModel,
    grid: usize,
    trials: usize,
    seed: u64,
) -> Result<PairedReport> {
    config.validate()?;
    if trials < 2 {
        return Err(Error::invalid("trials", "at least 2 trials required"));
    }
    if grid == 0 {
        return Err(Error::invalid("grid", "grid must be positive"));
    }
    let chunks = trials.div_ceil(CHUNK);
    let per_chunk: Vec<Vec<(f64, f64)>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = stream(seed, c as u64);
            let len = CHUNK.min(trials - c * CHUNK);
            (0..len)
                .map(|_| simulate_pair(config, crop_model, grid, &mut rng))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let pairs: Vec<(f64, f64)> = per_chunk.into_iter().flatten().collect();
    let naive: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let selective: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let diff: Vec<f64> = pairs.iter().map(|p| p.1 - p.0).collect();
    let (nm, nse) = mean_and_se(&naive);
    let (sm, sse) = mean_and_se(&selective);
    let (dm, dse) = mean_and_se(&diff);
    let report = |strategy, analytic, estimate, std_error| AsymmetryReport {
        strategy,
        crop_model,
        analytic,
        estimate,
        std_error,
        trials,
        s1: config.s1,
        s2: config.s2,
        gamma: config.gamma,
        grid,
    };
    Ok(PairedReport {
        naive: report(
            Strategy::Naive,
            expected_overlap_naive(config.s1, config.s2),
            nm,
            nse,
        ),
        selective: report(
            Strategy::Selective,
            expected_overlap_selective(config.s1, config.s2, config.gamma),
            sm,
            sse,
        ),
        diff_mean: dm,
        diff_std_error: dse,
    })
}

/// Monte Carlo estimate for a single strategy.
pub fn monte_carlo_overlap(
    strategy: Strategy,
    config: &SamplerConfig,
    crop_model: CropModel,
    grid: usize,
    trials: usize,
    seed: u64,
) -> Result<AsymmetryReport> {
    if trials < 1000 {
        return Err(Error::invalid("trials", format!("{trials} < 1000")));
    }
    let paired = monte_carlo_paired(config, crop_model, grid, trials, seed)?;
    Ok(match strategy {
        Strategy::Naive => paired.naive,
        Strategy::Selective => paired.selective,
    })
}

/// Samples of the selective density for plotting: `gamma,r,p_sel` rows.
pub fn density_curve_csv(gammas: &[f64], s1: f64, points: usize) -> String {
    let mut out = String::from("gamma,r,p_sel\n");
    let steps = points.max(2) - 1;
    for &g in gammas {
        for k in 0..=steps {
            let r = k as f64 / steps as f64;
            let _ = writeln!(out, "{},{:.6},{:.8}", g, r, selective_density(r, g, s1));
        }
    }
    out
}

/// Plain-text comparison table.
pub fn format_table(reports: &[AsymmetryReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<10} {:<9} {:>5} {:>5} {:>5} {:>5} {:>8} {:>10} {:>10} {:>10}",
        "strategy", "crops", "s1", "s2", "gamma", "grid", "trials", "analytic", "estimate", "std_err"
    );
    for r in reports {
        let _ = writeln!(
            out,
            "{:<10} {:<9} {:>5} {:>5} {:>5} {:>5} {:>8} {:>10.6} {:>10.6} {:>10.6}",
            r.strategy.to_string(),
            r.crop_model.to_string(),
            r.s1,
            r.s2,
            r.gamma,
            r.grid,
            r.trials,
            r.analytic,
            r.estimate,
            r.std_error
        );
    }
    out
}
