use crate::Common;
use anyhow::{Context, Result};
use aps_core::analyzer::{density_curve_csv, format_table, monte_carlo_paired, AsymmetryReport, CropModel};
use aps_core::sampler::SamplerConfig;
use aps_core::Error;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalyzeConfig {
    pub seed: u64,
    pub trials: usize,
    /// Patches per side of the simulated grids.
    pub grid: usize,
    /// Any of `identical` (both views tile the whole image) and `random`.
    pub crop_models: Vec<String>,
    /// Sampling ratios, used for both views.
    pub s: Vec<f64>,
    pub gammas: Vec<f64>,
    /// Points per density curve.
    pub density_points: usize,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            trials: 20_000,
            grid: 32,
            crop_models: vec!["identical".into(), "random".into()],
            s: vec![0.25],
            gammas: vec![0.0, 3.0],
            density_points: 101,
        }
    }
}

impl AnalyzeConfig {
    pub fn validate(&self) -> aps_core::Result<()> {
        if self.trials < 2 {
            return Err(Error::invalid("trials", format!("{} < 2", self.trials)));
        }
        if self.grid == 0 {
            return Err(Error::invalid("grid", "must be positive"));
        }
        if self.s.is_empty() || self.gammas.is_empty() {
            return Err(Error::invalid("s/gammas", "need at least one value each"));
        }
        if self.density_points < 2 {
            return Err(Error::invalid("density_points", "need at least 2"));
        }
        if self.crop_models.is_empty() {
            return Err(Error::invalid("crop_models", "need at least one"));
        }
        for m in &self.crop_models {
            m.parse::<CropModel>()?;
        }
        for &s in &self.s {
            for &gamma in &self.gammas {
                sampler(s, gamma).validate()?;
            }
        }
        Ok(())
    }
}

fn sampler(s: f64, gamma: f64) -> SamplerConfig {
    SamplerConfig {
        s1: s,
        s2: s,
        gamma,
        n_views: 1,
    }
}

pub fn load<T: for<'de> Deserialize<'de> + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())).into())
        }
    }
}

/// Comparison table rows (naive then selective per crop model, `s` and `γ`)
/// and the density CSV.
pub fn analyze(cfg: &AnalyzeConfig) -> Result<(Vec<AsymmetryReport>, String)> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for m in &cfg.crop_models {
        let model: CropModel = m.parse()?;
        for &s in &cfg.s {
            for &gamma in &cfg.gammas {
                log::info!("monte carlo {model} s={s} gamma={gamma} trials={}", cfg.trials);
                let p = monte_carlo_paired(&sampler(s, gamma), model, cfg.grid, cfg.trials, cfg.seed)?;
                rows.push(p.naive);
                rows.push(p.selective);
            }
        }
    }
    let mut density = String::from("s1,gamma,r,p_sel\n");
    for &s in &cfg.s {
        for line in density_curve_csv(&cfg.gammas, s, cfg.density_points).lines().skip(1) {
            let _ = writeln!(density, "{s},{line}");
        }
    }
    Ok((rows, density))
}

pub fn run(args: &Common) -> Result<()> {
    let mut cfg: AnalyzeConfig = load(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    if args.dry_run {
        print!("{}", toml::to_string(&cfg)?);
        let runs = cfg.crop_models.len() * cfg.s.len() * cfg.gammas.len();
        println!("# {runs} Monte Carlo runs of {} trials", cfg.trials);
        return Ok(());
    }
    let (rows, density) = analyze(&cfg)?;
    std::fs::create_dir_all(&args.out)?;
    let mut table = format!("{}\n", AsymmetryReport::CSV_HEADER);
    for r in &rows {
        table.push_str(&r.csv_row());
        table.push('\n');
    }
    std::fs::write(args.out.join("asymmetry.csv"), table)?;
    std::fs::write(args.out.join("density.csv"), density)?;
    print!("{}", format_table(&rows));
    Ok(())
}
