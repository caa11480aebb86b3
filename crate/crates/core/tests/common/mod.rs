#![allow(dead_code)]

use aps_core::model::{flatten, layout, load_flat, Model, PatchPixels};
use aps_core::objective::{contrastive_loss, EmbeddingBatch};
use aps_core::rng::seeded;
use ndarray::Array2;
use rand::seq::index::sample;
use rand::Rng;

/// Below this magnitude errors are measured in absolute terms: with steps
/// near 1e-6 the loss round-off leaves about 1e-8 of noise in a difference
/// quotient, which would swamp entries that are exactly zero.
pub const FD_FLOOR: f64 = 1e-3;

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

/// Derivative at 0 of `f` by Ridders' polynomial extrapolation of central
/// differences over a shrinking step, starting from `h`.
pub fn ridders(mut f: impl FnMut(f64) -> f64, h: f64) -> f64 {
    const SHRINK: f64 = 1.4;
    const N: usize = 10;
    let mut a = [[0.0f64; N]; N];
    let mut hh = h;
    a[0][0] = (f(hh) - f(-hh)) / (2.0 * hh);
    let mut best = a[0][0];
    let mut err = f64::INFINITY;
    for i in 1..N {
        hh /= SHRINK;
        a[0][i] = (f(hh) - f(-hh)) / (2.0 * hh);
        let mut fac = SHRINK * SHRINK;
        for j in 1..=i {
            a[j][i] = (a[j - 1][i] * fac - a[j - 1][i - 1]) / (fac - 1.0);
            fac *= SHRINK * SHRINK;
            let e = (a[j][i] - a[j - 1][i]).abs().max((a[j][i] - a[j - 1][i - 1]).abs());
            if e <= err {
                err = e;
                best = a[j][i];
            }
        }
        if (a[i][i] - a[i - 1][i - 1]).abs() >= 2.0 * err {
            break;
        }
    }
    best
}

/// Ridders' derivative with the default starting step. Two-sample batch
/// normalization makes the loss curve on a ~1e-5 scale, so start there.
pub fn numeric_derivative(f: impl FnMut(f64) -> f64) -> f64 {
    ridders(f, 1e-5)
}

/// Random pixels at `k` distinct random grid positions.
pub fn random_patches<R: Rng>(model: &Model, k: usize, rng: &mut R) -> PatchPixels {
    let cfg = &model.encoder.config;
    let mut ids = sample(rng, cfg.n_patches(), k).into_vec();
    ids.sort_unstable();
    let pixels = Array2::from_shape_simple_fn((k, cfg.patch_dim()), || rng.gen::<f64>());
    PatchPixels {
        pixels,
        position_ids: ids,
    }
}

pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst: String,
    pub checked: usize,
    pub stop_gradient_zero: bool,
}

fn loss_with_frozen_targets(model: &Model, v1: &[PatchPixels], v2: &[PatchPixels], z1: &Array2<f64>, z2: &Array2<f64>, tau: f64) -> f64 {
    let q1 = model.forward_view(v1).unwrap().q;
    let q2 = model.forward_view(v2).unwrap().q;
    let b = |a: &Array2<f64>| EmbeddingBatch::new(a.clone()).unwrap();
    contrastive_loss(&b(&q1), &b(z1), &b(&q2), &b(z2), tau).unwrap().value
}

/// Full-stack loss-to-parameter check. Targets `z` are computed once at the
/// base point and held fixed, which is what stop-gradient means.
/// Every tensor contributes `per_tensor` randomly chosen entries.
pub fn full_stack_gradcheck(model: &Model, v1: &[PatchPixels], v2: &[PatchPixels], tau: f64, per_tensor: usize, seed: u64) -> GradCheck {
    let f1 = model.forward_view(v1).unwrap();
    let f2 = model.forward_view(v2).unwrap();
    let b = |a: &Array2<f64>| EmbeddingBatch::new(a.clone()).unwrap();
    let loss = contrastive_loss(&b(&f1.q), &b(&f1.z), &b(&f2.q), &b(&f2.z), tau).unwrap();
    let stop_gradient_zero = loss.grad_z1.iter().chain(loss.grad_z2.iter()).all(|&v| v == 0.0);
    let mut grad = model.zeros_like();
    model.backward_view(&f1, loss.grad_q1.view(), &mut grad).unwrap();
    model.backward_view(&f2, loss.grad_q2.view(), &mut grad).unwrap();
    let analytic = flatten(&grad);

    let base = flatten(model);
    let mut rng = seeded(seed);
    let mut probe = model.clone();
    let mut max_rel_error = 0.0;
    let mut worst = String::new();
    let mut checked = 0;
    for info in layout(model) {
        let n = info.range.len();
        for j in sample(&mut rng, n, per_tensor.min(n)) {
            let i = info.range.start + j;
            let numeric = numeric_derivative(|delta| {
                let mut p = base.clone();
                p[i] += delta;
                load_flat(&mut probe, &p).unwrap();
                loss_with_frozen_targets(&probe, v1, v2, &f1.z, &f2.z, tau)
            });
            let e = rel_error(analytic[i], numeric);
            if e > max_rel_error {
                max_rel_error = e;
                worst = format!("{}[{j}]: analytic {:e}, numeric {:e}", info.name, analytic[i], numeric);
            }
            checked += 1;
        }
    }
    GradCheck {
        max_rel_error,
        worst,
        checked,
        stop_gradient_zero,
    }
}
