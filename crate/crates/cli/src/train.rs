use anyhow::{bail, Result};
use aps_core::train::{ProbeReport, TrainConfig, Trainer};
use clap::Args;
use std::path::{Path, PathBuf};

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: crate::Common,
    /// Built-in config used when no --config is given.
    #[arg(long, default_value = "smoke")]
    pub preset: String,
    /// Stop after this many total steps instead of the full schedule.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Continue from a checkpoint (its embedded config is used).
    #[arg(long, conflicts_with = "config")]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ProbeArgs {
    /// Checkpoint written by `aps train`.
    pub checkpoint: PathBuf,
    /// Directory for probe.csv; printed only when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Neighbour count; defaults to the checkpoint's config.
    #[arg(long)]
    pub k: Option<usize>,
}

const PROBE_HEADER: &str = "step,k,accuracy,shuffled_accuracy";

fn probe_row(step: u64, r: &ProbeReport) -> String {
    format!("{step},{}\n", r.csv_row())
}

fn write_probe(dir: &Path, step: u64, r: &ProbeReport) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("probe.csv"), format!("{PROBE_HEADER}\n{}", probe_row(step, r)))?;
    Ok(())
}

pub fn run_train(args: &TrainArgs) -> Result<()> {
    let c = &args.common;
    let mut trainer = match &args.resume {
        Some(path) => {
            if c.seed.is_some() {
                bail!(aps_core::Error::Config("--seed cannot change a resumed run".into()));
            }
            Trainer::resume(path)?
        }
        None => {
            let mut cfg = match &c.config {
                Some(p) => TrainConfig::load(p)?,
                None => TrainConfig::preset(&args.preset)?,
            };
            if let Some(seed) = c.seed {
                cfg.seed = seed;
            }
            Trainer::new(cfg)?
        }
    };
    let end = args.steps.unwrap_or(u64::MAX).min(trainer.total_steps());
    if c.dry_run {
        print!("{}", trainer.config.to_toml());
        println!(
            "# plan: {} training images, {} held out, {} steps per epoch, {} warmup steps, {} total steps, running {} -> {}, checkpoint every {} steps",
            trainer.train_set.len(),
            trainer.holdout.len(),
            trainer.steps_per_epoch(),
            trainer.warmup_steps(),
            trainer.total_steps(),
            trainer.state.step,
            end,
            trainer.config.checkpoint.every_steps
        );
        return Ok(());
    }
    std::fs::create_dir_all(&c.out)?;
    std::fs::write(c.out.join("config.toml"), trainer.config.to_toml())?;
    trainer.dump_dir = Some(c.out.clone());
    trainer.run(Some(end), Some(&c.out))?;
    if let Some(last) = trainer.state.log.last() {
        println!("step {} loss {:.6}", last.step, last.loss);
    }
    if trainer.holdout.is_empty() {
        log::warn!("no held-out images; skipping the probe");
        return Ok(());
    }
    let report = trainer.probe()?;
    write_probe(&c.out, trainer.state.step, &report)?;
    println!(
        "probe k={} accuracy {:.4} shuffled-label baseline {:.4}",
        report.k, report.accuracy, report.shuffled_accuracy
    );
    Ok(())
}

pub fn run_probe(args: &ProbeArgs) -> Result<()> {
    let mut trainer = Trainer::resume(&args.checkpoint)?;
    if let Some(k) = args.k {
        trainer.config.probe.k = k;
    }
    let report = trainer.probe()?;
    let step = trainer.state.step;
    match &args.out {
        Some(dir) => write_probe(dir, step, &report)?,
        None => print!("{PROBE_HEADER}\n{}", probe_row(step, &report)),
    }
    Ok(())
}
