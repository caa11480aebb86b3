//! End-to-end training: augmentation, asymmetric sampling, forward, loss,
//! backward, optional clipping, AdamW and the optional momentum encoder.

pub mod config;
pub mod probe;

pub use config::{AugmentPreset, DataKind, TrainConfig};
pub use probe::{knn_probe, probe_with_baseline, represent, ProbeReport};

use crate::data::{augment, load_cifar, synth_dataset, AugmentPair, ImageRecord};
use crate::error::{Error, Result};
use crate::geometry::PatchGrid;
use crate::model::checkpoint::{Checkpoint, Tensor};
use crate::model::{extract_patches, flatten, load_flat, BackboneConfig, Model, PatchPixels, ViewForward};
use crate::objective::{contrastive_loss, multiview_loss_pairs, EmbeddingBatch};
use crate::optim::{cosine_lr, l2_norm, momentum_encoder_update, AdamW, EmaSchedule, GroupedClip};
use crate::rng::{stream, ChaCha8Rng, RngState};
use crate::sampler::{sample_multi_view, sample_pair, sample_selective_multi_view, SamplerConfig};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

const MODEL_INIT_STREAM: u64 = 1;
const TRAIN_STREAM: u64 = 2;
const PROBE_STREAM: u64 = 3;

/// One row of the metric log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    /// Norm of the full gradient before clipping.
    pub grad_norm: f64,
    pub clip_triggered: bool,
}

impl MetricRecord {
    pub const CSV_HEADER: &'static str = "step,lr,loss,grad_norm,clip_triggered";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.step, self.lr, self.loss, self.grad_norm, self.clip_triggered as u8
        )
    }
}

/// Everything that changes during training.
#[derive(Debug, Clone)]
pub struct TrainState {
    /// Number of completed steps.
    pub step: u64,
    pub model: Model,
    pub target: Option<Model>,
    pub optimizer: AdamW,
    pub clip: Option<GroupedClip>,
    pub rng: ChaCha8Rng,
    /// Sample order of the current epoch and the position in it.
    pub order: Vec<usize>,
    pub cursor: usize,
    pub log: Vec<MetricRecord>,
}

/// Per-sample views for one step: `views[v][i]` is view `v` of sample `i`.
/// Views `0..k` come from the first crop, `k..2k` from the second.
pub fn prepare_views(
    records: &[&ImageRecord],
    pair: &AugmentPair,
    sampler: &SamplerConfig,
    backbone: &BackboneConfig,
    step_seed: u64,
) -> Result<Vec<Vec<PatchPixels>>> {
    let k = sampler.n_views;
    let per_sample: Vec<Vec<PatchPixels>> = records
        .par_iter()
        .enumerate()
        .map(|(i, rec)| {
            let mut rng = stream(step_seed, i as u64);
            let (v1, c1) = augment(&rec.image, &pair.first, &mut rng)?;
            let (v2, c2) = augment(&rec.image, &pair.second, &mut rng)?;
            let g1 = PatchGrid::new(c1, backbone.patch_size)?;
            let g2 = PatchGrid::new(c2, backbone.patch_size)?;
            let (first, second) = if k == 1 {
                let p = sample_pair(&g1, &g2, sampler, &mut rng)?;
                (vec![p.view1], vec![p.view2])
            } else {
                let a = sample_multi_view(&g1, sampler.s1, k, &mut rng)?;
                let b = sample_selective_multi_view(&a, &g2, sampler.s2, sampler.gamma, &mut rng)?;
                (a, b)
            };
            let mut out = Vec::with_capacity(2 * k);
            for set in &first {
                out.push(extract_patches(&v1, set.indices(), backbone)?);
            }
            for set in &second {
                out.push(extract_patches(&v2, set.indices(), backbone)?);
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let mut views: Vec<Vec<PatchPixels>> = (0..2 * k).map(|_| Vec::with_capacity(records.len())).collect();
    for sample in per_sample {
        for (v, p) in sample.into_iter().enumerate() {
            views[v].push(p);
        }
    }
    Ok(views)
}

/// Ordered cross-crop pairs `(j, k)` meaning `D(q_j, sg z_k)`.
pub fn cross_crop_pairs(k: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::with_capacity(2 * k * k);
    for a in 0..k {
        for b in k..2 * k {
            pairs.push((a, b));
            pairs.push((b, a));
        }
    }
    pairs
}

/// Loss, parameter gradient and forward records for one step's views.
///
/// One view per crop gives `τ[D(q1, sg z2) + D(q2, sg z1)]`. With more views
/// the loss is twice the mean of `τ D(q_j, sg z_k)` over ordered cross-crop
/// pairs, which reduces to the two-view loss when each crop has one view.
/// Targets come from `target` when a momentum encoder is in use.
pub fn loss_and_grad(
    model: &Model,
    target: Option<&Model>,
    views: &[Vec<PatchPixels>],
    tau: f64,
) -> Result<(f64, Model, Vec<ViewForward>)> {
    if views.len() < 2 || views.len() % 2 != 0 {
        return Err(Error::invalid("views", format!("need an even number >= 2, got {}", views.len())));
    }
    let fwds: Vec<ViewForward> = views.iter().map(|v| model.forward_view(v)).collect::<Result<_>>()?;
    let targets: Vec<Array2<f64>> = match target {
        Some(t) => views.iter().map(|v| t.targets(v)).collect::<Result<_>>()?,
        None => fwds.iter().map(|f| f.z.clone()).collect(),
    };
    let batch = |a: &Array2<f64>| EmbeddingBatch::new(a.clone());
    let (value, dqs) = if views.len() == 2 {
        let r = contrastive_loss(
            &batch(&fwds[0].q)?,
            &batch(&targets[0])?,
            &batch(&fwds[1].q)?,
            &batch(&targets[1])?,
            tau,
        )?;
        (r.value, vec![r.grad_q1, r.grad_q2])
    } else {
        let emb = fwds
            .iter()
            .zip(&targets)
            .map(|(f, z)| Ok((batch(&f.q)?, batch(z)?)))
            .collect::<Result<Vec<_>>>()?;
        let r = multiview_loss_pairs(&emb, &cross_crop_pairs(views.len() / 2), tau)?;
        (2.0 * r.value, r.grad_q.into_iter().map(|g| g * 2.0).collect())
    };
    let mut grad = model.zeros_like();
    for (f, dq) in fwds.iter().zip(&dqs) {
        model.backward_view(f, dq.view(), &mut grad)?;
    }
    Ok((value, grad, fwds))
}

pub struct Trainer {
    pub config: TrainConfig,
    pub backbone: BackboneConfig,
    pub augment: AugmentPair,
    pub train_set: Vec<ImageRecord>,
    pub holdout: Vec<ImageRecord>,
    pub state: TrainState,
    /// Where non-finite-loss dumps go.
    pub dump_dir: Option<PathBuf>,
}

/// Train and held-out records for a config.
pub fn load_data(config: &TrainConfig) -> Result<(Vec<ImageRecord>, Vec<ImageRecord>)> {
    let d = &config.data;
    match d.kind {
        DataKind::Synthetic => {
            let mut all = synth_dataset(d.n_per_class + d.holdout_per_class, d.classes, d.image_size, config.seed)?;
            let holdout = all.split_off(d.n_per_class * d.classes);
            Ok((all, holdout))
        }
        DataKind::Cifar => {
            let train = load_cifar(d.path.as_ref().expect("validated"))?;
            let holdout = match &d.test_path {
                Some(p) => load_cifar(p)?,
                None => Vec::new(),
            };
            Ok((train, holdout))
        }
    }
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        let (train, holdout) = load_data(&config)?;
        Self::with_data(config, train, holdout)
    }

    pub fn with_data(config: TrainConfig, train_set: Vec<ImageRecord>, holdout: Vec<ImageRecord>) -> Result<Self> {
        config.validate()?;
        let backbone = config.backbone()?;
        if train_set.len() < config.optim.batch_size {
            return Err(Error::invalid(
                "optim.batch_size",
                format!("{} exceeds the {} training images", config.optim.batch_size, train_set.len()),
            ));
        }
        let model = Model::new(&backbone, &config.heads()?, &mut stream(config.seed, MODEL_INIT_STREAM))?;
        let n = flatten(&model).len();
        let clip = config.clip.enabled.then(|| GroupedClip::new(model.clip_groups(), &config.clip));
        let state = TrainState {
            step: 0,
            target: config.momentum_encoder.enabled.then(|| model.clone()),
            optimizer: AdamW::new(config.optim.adamw(), n),
            clip,
            model,
            rng: stream(config.seed, TRAIN_STREAM),
            order: Vec::new(),
            cursor: 0,
            log: Vec::new(),
        };
        Ok(Self {
            augment: config.augment_pair(),
            backbone,
            config,
            train_set,
            holdout,
            state,
            dump_dir: None,
        })
    }

    pub fn steps_per_epoch(&self) -> u64 {
        (self.train_set.len() / self.config.optim.batch_size) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_per_epoch() * self.config.schedule.epochs
    }

    pub fn warmup_steps(&self) -> u64 {
        self.steps_per_epoch() * self.config.schedule.warmup_epochs
    }

    pub fn epoch(&self) -> u64 {
        self.state.step / self.steps_per_epoch()
    }

    pub fn is_finished(&self) -> bool {
        self.state.step >= self.total_steps()
    }

    /// Indices of the next batch; reshuffles at epoch boundaries and drops
    /// the incomplete tail.
    fn next_batch(&mut self) -> Vec<usize> {
        let b = self.config.optim.batch_size;
        let st = &mut self.state;
        if st.cursor == 0 || st.order.is_empty() {
            st.order = (0..self.train_set.len()).collect();
            st.order.shuffle(&mut st.rng);
            st.cursor = 0;
        }
        let batch = st.order[st.cursor..st.cursor + b].to_vec();
        st.cursor += b;
        if st.cursor + b > st.order.len() {
            st.cursor = 0;
        }
        batch
    }

    /// Runs one optimization step and returns its metric record. Any
    /// non-finite value aborts the step before parameters change; with a
    /// dump directory set the state is written there first.
    pub fn train_step(&mut self) -> Result<MetricRecord> {
        match self.step_inner() {
            Err(Error::NonFinite { context }) => Err(self.non_finite(context)),
            r => r,
        }
    }

    fn step_inner(&mut self) -> Result<MetricRecord> {
        let step = self.state.step;
        let total = self.total_steps();
        if step >= total {
            return Err(Error::invalid("step", format!("training already finished ({total} steps)")));
        }
        let lr = cosine_lr(step, self.warmup_steps(), total, self.config.optim.lr)?;
        let batch = self.next_batch();
        let step_seed: u64 = self.state.rng.gen();
        let records: Vec<&ImageRecord> = batch.iter().map(|&i| &self.train_set[i]).collect();
        let views = prepare_views(&records, &self.augment, &self.config.sampler, &self.backbone, step_seed)?;

        let st = &self.state;
        let (loss, grad, fwds) = loss_and_grad(&st.model, st.target.as_ref(), &views, self.config.loss.tau)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                context: format!("loss {loss} at step {step}"),
            });
        }
        let mut g = flatten(&grad);
        let grad_norm = l2_norm(&g);
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite {
                context: format!("gradient at step {step}"),
            });
        }
        let st = &mut self.state;
        let clip_triggered = match st.clip.as_mut() {
            Some(c) => c.apply(&mut g)?,
            None => false,
        };
        let mut params = flatten(&st.model);
        st.optimizer.step(&mut params, &g, lr)?;
        load_flat(&mut st.model, &params)?;
        for f in &fwds {
            st.model.update_running_stats(f);
        }
        if let Some(target) = st.target.as_mut() {
            let m = &self.config.momentum_encoder;
            let schedule = EmaSchedule {
                start: m.start,
                end: m.end,
                total_steps: total,
            };
            let mut t = flatten(target);
            momentum_encoder_update(&params, &mut t, schedule.coefficient(step))?;
            load_flat(target, &t)?;
        }
        st.step += 1;
        let record = MetricRecord {
            step: st.step,
            lr,
            loss,
            grad_norm,
            clip_triggered,
        };
        st.log.push(record);
        Ok(record)
    }

    fn non_finite(&self, what: String) -> Error {
        let dump = self.dump_dir.as_ref().map(|d| {
            let path = d.join(format!("nonfinite-step{}.ckpt", self.state.step));
            match self.save(&path) {
                Ok(()) => format!("; state dumped to {}", path.display()),
                Err(e) => format!("; state dump failed: {e}"),
            }
        });
        Error::NonFinite {
            context: format!("{what}{}", dump.unwrap_or_default()),
        }
    }

    /// Trains until `until_step` (or the end of the schedule). With an output
    /// directory, appends to `metrics.csv` and writes checkpoints at the
    /// configured cadence and at the end.
    pub fn run(&mut self, until_step: Option<u64>, out_dir: Option<&Path>) -> Result<()> {
        let end = until_step.unwrap_or(u64::MAX).min(self.total_steps());
        let mut log = match out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                let path = dir.join("metrics.csv");
                let fresh = !path.exists();
                let mut f = OpenOptions::new().create(true).append(true).open(path)?;
                if fresh {
                    writeln!(f, "{}", MetricRecord::CSV_HEADER)?;
                }
                Some(f)
            }
            None => None,
        };
        let every = self.config.checkpoint.every_steps;
        while self.state.step < end {
            let rec = self.train_step()?;
            if let Some(f) = log.as_mut() {
                writeln!(f, "{}", rec.csv_row())?;
            }
            log::debug!("step {} lr {:.3e} loss {:.6}", rec.step, rec.lr, rec.loss);
            if let Some(dir) = out_dir {
                if (every > 0 && rec.step % every == 0) || rec.step == end {
                    self.save(&checkpoint_path(dir, rec.step))?;
                }
            }
        }
        Ok(())
    }

    /// kNN probe of the current encoder: training images as the bank,
    /// held-out images as queries.
    pub fn probe(&self) -> Result<ProbeReport> {
        if self.holdout.is_empty() {
            return Err(Error::invalid("probe", "no held-out images configured"));
        }
        probe_with_baseline(
            &self.state.model.encoder,
            &self.train_set,
            &self.holdout,
            self.config.probe.k,
            &mut stream(self.config.seed, PROBE_STREAM),
        )
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let st = &self.state;
        let mut c = Checkpoint::new(self.config.to_toml());
        for (name, t) in st.model.to_tensors("online") {
            c.push(name, t);
        }
        if let Some(target) = &st.target {
            for (name, t) in target.to_tensors("target") {
                c.push(name, t);
            }
        }
        let n = st.optimizer.m.len();
        c.push("optim.m", Tensor::f64(&[n], st.optimizer.m.clone()));
        c.push("optim.v", Tensor::f64(&[n], st.optimizer.v.clone()));
        if let Some(clip) = &st.clip {
            for (i, s) in clip.states.iter().enumerate() {
                if let Some(e) = s.ema() {
                    c.push(format!("clip.{i}.ema"), Tensor::f64(&[e.len()], e.to_vec()));
                }
            }
        }
        let r = RngState::capture(&st.rng);
        let mut rng_words: Vec<u64> = r
            .seed
            .chunks_exact(8)
            .map(|w| u64::from_le_bytes(w.try_into().unwrap()))
            .collect();
        rng_words.extend([r.stream, r.word_pos as u64, (r.word_pos >> 64) as u64]);
        c.push("rng", Tensor::u64(rng_words));
        c.push(
            "counters",
            Tensor::u64(vec![st.step, st.optimizer.step, st.cursor as u64]),
        );
        c.push("order", Tensor::u64(st.order.iter().map(|&i| i as u64).collect()));
        let log: Vec<f64> = st
            .log
            .iter()
            .flat_map(|r| [r.step as f64, r.lr, r.loss, r.grad_norm, r.clip_triggered as u8 as f64])
            .collect();
        c.push("log", Tensor::f64(&[st.log.len(), 5], log));
        c
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    /// Rebuilds a trainer from a checkpoint, reloading the data named in its
    /// config echo.
    pub fn resume(path: &Path) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        let config = TrainConfig::from_toml(&ckpt.config)?;
        let (train, holdout) = load_data(&config)?;
        Self::from_checkpoint(&ckpt, train, holdout)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, train: Vec<ImageRecord>, holdout: Vec<ImageRecord>) -> Result<Self> {
        let config = TrainConfig::from_toml(&ckpt.config)?;
        let mut t = Self::with_data(config, train, holdout)?;
        let st = &mut t.state;
        st.model.load_tensors(ckpt, "online")?;
        if let Some(target) = st.target.as_mut() {
            target.load_tensors(ckpt, "target")?;
        }
        let n = st.optimizer.m.len();
        let (m, v) = (ckpt.f64_data("optim.m")?, ckpt.f64_data("optim.v")?);
        if m.len() != n || v.len() != n {
            return Err(Error::Corrupt("optimizer state size mismatch".into()));
        }
        st.optimizer.m = m.to_vec();
        st.optimizer.v = v.to_vec();
        if let Some(clip) = st.clip.as_mut() {
            for (i, s) in clip.states.iter_mut().enumerate() {
                let name = format!("clip.{i}.ema");
                if ckpt.has(&name) {
                    s.set_ema(Some(ckpt.f64_data(&name)?.to_vec()));
                }
            }
        }
        let words = ckpt.u64_data("rng")?;
        if words.len() != 7 {
            return Err(Error::Corrupt("rng state has wrong length".into()));
        }
        let mut seed = [0u8; 32];
        for (chunk, w) in seed.chunks_exact_mut(8).zip(&words[..4]) {
            chunk.copy_from_slice(&w.to_le_bytes());
        }
        st.rng = RngState {
            seed,
            stream: words[4],
            word_pos: words[5] as u128 | (words[6] as u128) << 64,
        }
        .restore();
        let counters = ckpt.u64_data("counters")?;
        if counters.len() != 3 {
            return Err(Error::Corrupt("counters have wrong length".into()));
        }
        st.step = counters[0];
        st.optimizer.step = counters[1];
        st.cursor = counters[2] as usize;
        st.order = ckpt.u64_data("order")?.iter().map(|&i| i as usize).collect();
        if st.order.iter().any(|&i| i >= t.train_set.len()) || st.cursor > st.order.len() {
            return Err(Error::Corrupt("sample order does not match the dataset".into()));
        }
        let log = ckpt.f64_data("log")?;
        if log.len() % 5 != 0 {
            return Err(Error::Corrupt("metric log has wrong shape".into()));
        }
        st.log = log
            .chunks_exact(5)
            .map(|r| MetricRecord {
                step: r[0] as u64,
                lr: r[1],
                loss: r[2],
                grad_norm: r[3],
                clip_triggered: r[4] != 0.0,
            })
            .collect();
        Ok(t)
    }
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("checkpoint-{step:06}.ckpt"))
}
