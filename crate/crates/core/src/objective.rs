//! Temperature-scaled contrastive objective with stop-gradient targets.
//!
//! `D(q, z) = −Σ_i log softmax_j(sim(q_i, z_j) / τ)_i` with cosine similarity,
//! and the symmetric loss `L = τ · [D(q1, sg(z2)) + D(q2, sg(z1))]`.
//! Gradients are closed-form; the `z` arguments are constants, so their
//! gradients are exactly zero.

use crate::error::{Error, Result};
use ndarray::{Array1, Array2, ArrayView2, Axis};

/// Row-major `N × dim` embeddings with finite entries and no zero rows.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    values: Array2<f64>,
}

impl EmbeddingBatch {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "embedding batch".into(),
            });
        }
        if let Some(row) = values
            .outer_iter()
            .position(|r| r.iter().all(|&v| v == 0.0))
        {
            return Err(Error::ZeroNormRow {
                which: "embedding batch",
                row,
            });
        }
        Ok(Self { values })
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.values
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub value: f64,
    pub grad_q1: Array2<f64>,
    pub grad_q2: Array2<f64>,
    pub grad_z1: Array2<f64>,
    pub grad_z2: Array2<f64>,
}

/// Loss over several views with per-view gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewLoss {
    pub value: f64,
    pub grad_q: Vec<Array2<f64>>,
    pub grad_z: Vec<Array2<f64>>,
}

fn check_shapes(q: &EmbeddingBatch, z: &EmbeddingBatch) -> Result<()> {
    if q.values.dim() != z.values.dim() {
        return Err(Error::ShapeMismatch {
            context: "embedding pair",
            expected: vec![q.rows(), q.dim()],
            actual: vec![z.rows(), z.dim()],
        });
    }
    Ok(())
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid("tau", format!("temperature {tau} must be > 0")))
    }
}

fn normalize_rows(x: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let norms: Array1<f64> = x
        .outer_iter()
        .map(|r| r.dot(&r).sqrt())
        .collect();
    let unit = x / &norms.view().insert_axis(Axis(1));
    (unit, norms)
}

/// Entry `(i, j)` is the cosine similarity of `q_i` and `z_j`.
pub fn cosine_similarity_matrix(q: &EmbeddingBatch, z: &EmbeddingBatch) -> Result<Array2<f64>> {
    check_shapes(q, z)?;
    let (qn, _) = normalize_rows(&q.values);
    let (zn, _) = normalize_rows(&z.values);
    Ok(qn.dot(&zn.t()).mapv(|v| v.clamp(-1.0, 1.0)))
}

/// `D(q, sg(z))` and its gradient with respect to `q`.
fn info_nce_grad(q: &EmbeddingBatch, z: &EmbeddingBatch, tau: f64) -> Result<(f64, Array2<f64>)> {
    check_shapes(q, z)?;
    check_tau(tau)?;
    let (qn, qnorm) = normalize_rows(&q.values);
    let (zn, _) = normalize_rows(&z.values);
    let sim = qn.dot(&zn.t());
    let n = sim.nrows();
    let mut value = 0.0;
    // dD/dsim
    let mut g = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        let row = sim.row(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v / tau));
        let exps: Vec<f64> = row.iter().map(|&v| (v / tau - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        value += sum.ln() - (row[i] / tau - max);
        for j in 0..n {
            g[[i, j]] = exps[j] / sum / tau;
        }
        g[[i, i]] -= 1.0 / tau;
    }
    // dsim_ij/dq_i = (zn_j − sim_ij · qn_i) / ‖q_i‖
    let mut grad = g.dot(&zn);
    let radial = (&g * &sim).sum_axis(Axis(1));
    for i in 0..n {
        let mut row = grad.row_mut(i);
        row.scaled_add(-radial[i], &qn.row(i));
        row /= qnorm[i];
    }
    Ok((value, grad))
}

/// `D(q, sg(z))`: row-wise cross entropy with the matching row as positive.
pub fn info_nce(q: &EmbeddingBatch, z: &EmbeddingBatch, tau: f64) -> Result<f64> {
    info_nce_grad(q, z, tau).map(|(v, _)| v)
}

/// `τ · [D(q1, sg(z2)) + D(q2, sg(z1))]` with gradients.
pub fn contrastive_loss(
    q1: &EmbeddingBatch,
    z1: &EmbeddingBatch,
    q2: &EmbeddingBatch,
    z2: &EmbeddingBatch,
    tau: f64,
) -> Result<LossResult> {
    check_shapes(q1, z1)?;
    check_shapes(q1, q2)?;
    check_shapes(q1, z2)?;
    let (d1, g1) = info_nce_grad(q1, z2, tau)?;
    let (d2, g2) = info_nce_grad(q2, z1, tau)?;
    Ok(LossResult {
        value: tau * (d1 + d2),
        grad_q1: g1 * tau,
        grad_q2: g2 * tau,
        grad_z1: Array2::zeros(z1.values.dim()),
        grad_z2: Array2::zeros(z2.values.dim()),
    })
}

/// Mean of `τ · D(q_j, sg(z_k))` over all ordered pairs `j ≠ k`.
pub fn multiview_loss(views: &[(EmbeddingBatch, EmbeddingBatch)], tau: f64) -> Result<MultiViewLoss> {
    let pairs: Vec<(usize, usize)> = (0..views.len())
        .flat_map(|j| (0..views.len()).filter(move |&k| k != j).map(move |k| (j, k)))
        .collect();
    multiview_loss_pairs(views, &pairs, tau)
}

/// Mean of `τ · D(q_j, sg(z_k))` over the given ordered `(j, k)` pairs.
pub fn multiview_loss_pairs(
    views: &[(EmbeddingBatch, EmbeddingBatch)],
    pairs: &[(usize, usize)],
    tau: f64,
) -> Result<MultiViewLoss> {
    if views.len() < 2 {
        return Err(Error::invalid("views", "at least two views required"));
    }
    if pairs.is_empty() {
        return Err(Error::invalid("pairs", "no view pairs"));
    }
    let shape = views[0].0.values.dim();
    for (q, z) in views {
        check_shapes(&views[0].0, q)?;
        check_shapes(q, z)?;
    }
    let scale = tau / pairs.len() as f64;
    let mut value = 0.0;
    let mut grad_q = vec![Array2::zeros(shape); views.len()];
    for &(j, k) in pairs {
        if j >= views.len() || k >= views.len() || j == k {
            return Err(Error::invalid("pairs", format!("bad pair ({j}, {k})")));
        }
        let (d, g) = info_nce_grad(&views[j].0, &views[k].1, tau)?;
        value += scale * d;
        grad_q[j].scaled_add(scale, &g);
    }
    Ok(MultiViewLoss {
        value,
        grad_q,
        grad_z: vec![Array2::zeros(shape); views.len()],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use ndarray::array;
    use rand::Rng;

    fn batch(a: Array2<f64>) -> EmbeddingBatch {
        EmbeddingBatch::new(a).unwrap()
    }

    fn random(n: usize, d: usize, seed: u64) -> EmbeddingBatch {
        let mut rng = seeded(seed);
        batch(Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0..1.0)))
    }

    /// Scalar reference for `D(q, z)` written directly from the definition.
    fn reference_d(q: &Array2<f64>, z: &Array2<f64>, tau: f64) -> f64 {
        let n = q.nrows();
        let cos = |a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>| {
            a.dot(&b) / (a.dot(&a).sqrt() * b.dot(&b).sqrt())
        };
        (0..n)
            .map(|i| {
                let denom: f64 = (0..n).map(|j| (cos(q.row(i), z.row(j)) / tau).exp()).sum();
                -((cos(q.row(i), z.row(i)) / tau).exp() / denom).ln()
            })
            .sum()
    }

    #[test]
    fn similarity_examples() {
        let q = batch(array![[1.0, 0.0], [0.0, 2.0]]);
        let s = cosine_similarity_matrix(&q, &q).unwrap();
        assert_eq!(s, array![[1.0, 0.0], [0.0, 1.0]]);
        let q = batch(array![[1.0, 0.0]]);
        let z = batch(array![[1.0, 1.0]]);
        let s = cosine_similarity_matrix(&q, &z).unwrap();
        assert!((s[[0, 0]] - 0.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn zero_row_reports_index() {
        let err = EmbeddingBatch::new(array![[1.0, 0.0], [0.0, 0.0]]).unwrap_err();
        assert!(matches!(err, Error::ZeroNormRow { row: 1, .. }));
    }

    #[test]
    fn single_sample_is_zero() {
        let q = random(1, 4, 1);
        assert_eq!(info_nce(&q, &random(1, 4, 2), 0.1).unwrap(), 0.0);
    }

    #[test]
    fn orthonormal_pair_closed_form() {
        let q = batch(array![[1.0, 0.0], [0.0, 1.0]]);
        let d = info_nce(&q, &q, 0.1).unwrap();
        let e10 = 10f64.exp();
        let expected = 2.0 * (1.0 / e10).ln_1p();
        assert!((d - expected).abs() < 1e-15, "{d} {expected}");
        assert!((d - 9.0799e-5).abs() < 1e-8);
    }

    #[test]
    fn matches_scalar_reference() {
        let q = random(5, 3, 3);
        let z = random(5, 3, 4);
        let d = info_nce(&q, &z, 0.2).unwrap();
        assert!((d - reference_d(&q.values, &z.values, 0.2)).abs() < 1e-12);
    }

    #[test]
    fn permutation_invariance() {
        let (q1, z1, q2, z2) = (random(4, 3, 1), random(4, 3, 2), random(4, 3, 3), random(4, 3, 4));
        let perm = [2usize, 0, 3, 1];
        let p = |b: &EmbeddingBatch| batch(b.values.select(Axis(0), &perm));
        let a = contrastive_loss(&q1, &z1, &q2, &z2, 0.1).unwrap().value;
        let b = contrastive_loss(&p(&q1), &p(&z1), &p(&q2), &p(&z2), 0.1).unwrap().value;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn tau_and_shape_errors() {
        let q = random(3, 2, 1);
        assert!(info_nce(&q, &q, 0.0).is_err());
        assert!(info_nce(&q, &random(2, 2, 1), 0.1).is_err());
        assert!(contrastive_loss(&q, &q, &q, &random(3, 4, 2), 0.1).is_err());
    }

    #[test]
    fn n1_swapped_views_zero() {
        let a = random(1, 5, 7);
        let b = random(1, 5, 8);
        let r = contrastive_loss(&a, &b, &b, &a, 0.1).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(r.grad_q1.iter().chain(r.grad_q2.iter()).all(|v| v.is_finite()));
    }

    #[test]
    fn row_rescaling_keeps_value_and_gradient_is_tangent() {
        let (q1, z1, q2, z2) = (random(4, 6, 11), random(4, 6, 12), random(4, 6, 13), random(4, 6, 14));
        let base = contrastive_loss(&q1, &z1, &q2, &z2, 0.1).unwrap();
        let mut scaled = q1.values.clone();
        scaled.row_mut(2).mapv_inplace(|v| v * 2.0);
        let r = contrastive_loss(&batch(scaled), &z1, &q2, &z2, 0.1).unwrap();
        assert!((r.value - base.value).abs() < 1e-12);
        for i in 0..4 {
            let dot = base.grad_q1.row(i).dot(&q1.values.row(i));
            assert!(dot.abs() < 1e-12, "row {i}: {dot}");
        }
    }

    #[test]
    fn stop_gradient_is_exact() {
        let (q1, z1, q2, z2) = (random(3, 4, 1), random(3, 4, 2), random(3, 4, 3), random(3, 4, 4));
        let r = contrastive_loss(&q1, &z1, &q2, &z2, 0.1).unwrap();
        assert!(r.grad_z1.iter().chain(r.grad_z2.iter()).all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let q = random(4, 3, 21);
        let z = random(4, 3, 22);
        let (_, g) = info_nce_grad(&q, &z, 0.1).unwrap();
        let h = 1e-6;
        for i in 0..4 {
            for k in 0..3 {
                let mut plus = q.values.clone();
                plus[[i, k]] += h;
                let mut minus = q.values.clone();
                minus[[i, k]] -= h;
                let fd = (reference_d(&plus, &z.values, 0.1) - reference_d(&minus, &z.values, 0.1)) / (2.0 * h);
                assert!((fd - g[[i, k]]).abs() < 1e-6, "({i},{k}): {fd} vs {}", g[[i, k]]);
            }
        }
    }

    #[test]
    fn multiview_two_views_is_half_of_pair_loss() {
        let (q1, z1, q2, z2) = (random(3, 4, 1), random(3, 4, 2), random(3, 4, 3), random(3, 4, 4));
        let pair = contrastive_loss(&q1, &z1, &q2, &z2, 0.1).unwrap();
        let mv = multiview_loss(&[(q1, z1), (q2, z2)], 0.1).unwrap();
        assert!((mv.value - pair.value / 2.0).abs() < 1e-12);
        assert!((&mv.grad_q[0] - &(&pair.grad_q1 / 2.0)).iter().all(|v| v.abs() < 1e-12));
        assert!(multiview_loss(&mv_one(), 0.1).is_err());
    }

    fn mv_one() -> Vec<(EmbeddingBatch, EmbeddingBatch)> {
        vec![(random(2, 2, 1), random(2, 2, 2))]
    }

    #[test]
    fn multiview_identical_single_sample_is_zero() {
        let a = random(1, 3, 5);
        let views = vec![(a.clone(), a.clone()); 4];
        assert_eq!(multiview_loss(&views, 0.1).unwrap().value, 0.0);
    }
}
