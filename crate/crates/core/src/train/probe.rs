//! Cosine k-nearest-neighbour probe on frozen encoder representations.

use crate::data::augment::resample;
use crate::data::ImageRecord;
use crate::error::{Error, Result};
use crate::geometry::CropBox;
use crate::model::{extract_patches, Encoder};
use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;

/// Representations of whole images (every patch kept), one row per record.
/// Images whose size differs from the backbone's are bilinearly resized.
pub fn represent(encoder: &Encoder, records: &[ImageRecord]) -> Result<Array2<f64>> {
    let cfg = &encoder.config;
    let all: Vec<usize> = (0..cfg.n_patches()).collect();
    let patches = records
        .iter()
        .map(|r| {
            let img = &r.image;
            if img.width == cfg.image_size && img.height == cfg.image_size {
                extract_patches(img, &all, cfg)
            } else {
                let crop = CropBox::full(img.width as f64, img.height as f64, cfg.image_size)?;
                extract_patches(&resample(img, &crop), &all, cfg)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    encoder.encode_batch(&patches)
}

fn normalized(x: &Array2<f64>) -> Array2<f64> {
    let norms = x.map_axis(Axis(1), |r| r.dot(&r).sqrt().max(1e-12));
    x / &norms.insert_axis(Axis(1))
}

/// Majority vote among the `k` most cosine-similar bank rows. Ties go to the
/// label with the larger summed similarity, then to the smaller label.
pub fn knn_classify(bank: &Array2<f64>, bank_labels: &[usize], queries: &Array2<f64>, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > bank.nrows() {
        return Err(Error::invalid("k", format!("{k} not in 1..={}", bank.nrows())));
    }
    if bank_labels.len() != bank.nrows() || bank.ncols() != queries.ncols() {
        return Err(Error::ShapeMismatch {
            context: "knn bank",
            expected: vec![bank.nrows(), queries.ncols()],
            actual: vec![bank_labels.len(), bank.ncols()],
        });
    }
    let sim = normalized(queries).dot(&normalized(bank).t());
    let n_labels = bank_labels.iter().max().map_or(0, |m| m + 1);
    let mut out = Vec::with_capacity(queries.nrows());
    for row in sim.rows() {
        let mut idx: Vec<usize> = (0..row.len()).collect();
        idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        let mut votes = vec![(0usize, 0.0f64); n_labels];
        for &j in &idx[..k] {
            votes[bank_labels[j]].0 += 1;
            votes[bank_labels[j]].1 += row[j];
        }
        let best = (0..n_labels)
            .max_by(|&a, &b| {
                votes[a]
                    .0
                    .cmp(&votes[b].0)
                    .then(votes[a].1.total_cmp(&votes[b].1))
                    .then(b.cmp(&a))
            })
            .expect("at least one label");
        out.push(best);
    }
    Ok(out)
}

pub fn accuracy(predicted: &[usize], truth: &[usize]) -> f64 {
    let hits = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    hits as f64 / truth.len().max(1) as f64
}

/// Accuracy of a cosine-kNN classifier with `bank` as the labeled memory and
/// `queries` as the held-out set.
pub fn knn_probe(encoder: &Encoder, bank: &[ImageRecord], queries: &[ImageRecord], k: usize) -> Result<f64> {
    if k == 0 || k > bank.len() {
        return Err(Error::invalid("k", format!("{k} not in 1..={}", bank.len())));
    }
    let bank_feats = represent(encoder, bank)?;
    let query_feats = represent(encoder, queries)?;
    let labels: Vec<usize> = bank.iter().map(|r| r.label).collect();
    let truth: Vec<usize> = queries.iter().map(|r| r.label).collect();
    Ok(accuracy(&knn_classify(&bank_feats, &labels, &query_feats, k)?, &truth))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeReport {
    pub k: usize,
    pub accuracy: f64,
    /// Same probe with the bank labels randomly permuted.
    pub shuffled_accuracy: f64,
}

impl ProbeReport {
    pub const CSV_HEADER: &'static str = "k,accuracy,shuffled_accuracy";

    pub fn csv_row(&self) -> String {
        format!("{},{},{}", self.k, self.accuracy, self.shuffled_accuracy)
    }
}

/// Number of bank-label permutations averaged into the baseline. Neighbouring
/// queries share neighbours, so a single permutation is far noisier than a
/// binomial draw.
pub const BASELINE_SHUFFLES: usize = 20;

/// Probe plus its shuffled-label baseline, sharing one set of representations.
pub fn probe_with_baseline<R: Rng + ?Sized>(
    encoder: &Encoder,
    bank: &[ImageRecord],
    queries: &[ImageRecord],
    k: usize,
    rng: &mut R,
) -> Result<ProbeReport> {
    if k == 0 || k > bank.len() {
        return Err(Error::invalid("k", format!("{k} not in 1..={}", bank.len())));
    }
    let bank_feats = represent(encoder, bank)?;
    let query_feats = represent(encoder, queries)?;
    let mut labels: Vec<usize> = bank.iter().map(|r| r.label).collect();
    let truth: Vec<usize> = queries.iter().map(|r| r.label).collect();
    let accuracy = accuracy(&knn_classify(&bank_feats, &labels, &query_feats, k)?, &truth);
    let mut shuffled_accuracy = 0.0;
    for _ in 0..BASELINE_SHUFFLES {
        labels.shuffle(rng);
        shuffled_accuracy += self::accuracy(&knn_classify(&bank_feats, &labels, &query_feats, k)?, &truth);
    }
    shuffled_accuracy /= BASELINE_SHUFFLES as f64;
    Ok(ProbeReport {
        k,
        accuracy,
        shuffled_accuracy,
    })
}
