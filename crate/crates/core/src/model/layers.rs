//! Dense building blocks with explicit forward caches and reverse passes.
//!
//! `backward` methods accumulate into a gradient struct of the same type, so a
//! batch of per-sample passes can share one gradient buffer.

use super::params::parameters;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub const LAYER_NORM_EPS: f64 = 1e-6;
pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;

/// Normal(0, std²) truncated to ±2 std by rejection.
pub fn trunc_normal<R: Rng + ?Sized>(rng: &mut R, shape: (usize, usize), std: f64) -> Array2<f64> {
    let normal = Normal::new(0.0, std).expect("valid std");
    Array2::from_shape_simple_fn(shape, || loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            break v;
        }
    })
}

/// `y = x W + b` with `W` stored as `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}
parameters!(Linear { w, b });

impl Linear {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, d_in: usize, d_out: usize) -> Self {
        Self {
            w: trunc_normal(rng, (d_in, d_out), 0.02),
            b: Array1::zeros(d_out),
        }
    }

    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self {
            w: Array2::zeros((d_in, d_out)),
            b: Array1::zeros(d_out),
        }
    }

    pub fn d_in(&self) -> usize {
        self.w.nrows()
    }

    pub fn d_out(&self) -> usize {
        self.w.ncols()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&self, x: ArrayView2<f64>, dy: ArrayView2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.w += &x.t().dot(&dy);
        grad.b += &dy.sum_axis(Axis(0));
        dy.dot(&self.w.t())
    }
}

/// Per-row normalization over features with learnable scale and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}
parameters!(LayerNorm { gamma, beta });

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
        }
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> (Array2<f64>, LayerNormCache) {
        let d = x.ncols() as f64;
        let mean = x.sum_axis(Axis(1)) / d;
        let centered = &x - &mean.insert_axis(Axis(1));
        let var = centered.mapv(|v| v * v).sum_axis(Axis(1)) / d;
        let inv_std = var.mapv(|v| 1.0 / (v + LAYER_NORM_EPS).sqrt());
        let xhat = centered * &inv_std.view().insert_axis(Axis(1));
        let y = &xhat * &self.gamma + &self.beta;
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache, dy: ArrayView2<f64>, grad: &mut LayerNorm) -> Array2<f64> {
        grad.gamma += &(&dy * &cache.xhat).sum_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0));
        let dxhat = &dy * &self.gamma;
        let d = dy.ncols() as f64;
        let mean_dxhat = dxhat.sum_axis(Axis(1)) / d;
        let mean_dxhat_xhat = (&dxhat * &cache.xhat).sum_axis(Axis(1)) / d;
        let mut dx = dxhat - &mean_dxhat.insert_axis(Axis(1));
        dx -= &(&cache.xhat * &mean_dxhat_xhat.insert_axis(Axis(1)));
        dx * &cache.inv_std.view().insert_axis(Axis(1))
    }
}

/// Per-feature normalization over the batch. Without affine parameters it is
/// the parameter-free variant used at the end of the heads.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub affine: Option<Affine>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}
parameters!(Affine { gamma, beta });

impl super::params::Parameters for BatchNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.affine.visit(prefix, f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.affine.visit_mut(prefix, f);
    }
    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        use super::params::join;
        self.running_mean.visit(&join(prefix, "running_mean"), f);
        self.running_var.visit(&join(prefix, "running_var"), f);
    }
    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        use super::params::join;
        self.running_mean.visit_mut(&join(prefix, "running_mean"), f);
        self.running_var.visit_mut(&join(prefix, "running_var"), f);
    }
}

#[derive(Debug, Clone)]
pub struct BatchNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
}

impl BatchNorm {
    pub fn new(dim: usize, affine: bool) -> Self {
        Self {
            affine: affine.then(|| Affine {
                gamma: Array1::ones(dim),
                beta: Array1::zeros(dim),
            }),
            running_mean: Array1::zeros(dim),
            running_var: Array1::ones(dim),
        }
    }

    fn finish(&self, xhat: &Array2<f64>) -> Array2<f64> {
        match &self.affine {
            Some(a) => xhat * &a.gamma + &a.beta,
            None => xhat.clone(),
        }
    }

    /// Normalizes with the statistics of `x` itself (biased variance).
    pub fn forward_train(&self, x: ArrayView2<f64>) -> (Array2<f64>, BatchNormCache) {
        let n = x.nrows() as f64;
        let mean = x.sum_axis(Axis(0)) / n;
        let centered = &x - &mean;
        let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / n;
        let inv_std = var.mapv(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt());
        let xhat = centered * &inv_std;
        let y = self.finish(&xhat);
        (y, BatchNormCache { xhat, inv_std, mean, var })
    }

    /// Normalizes with the frozen running statistics.
    pub fn forward_eval(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let inv_std = self.running_var.mapv(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt());
        let xhat = (&x - &self.running_mean) * &inv_std;
        self.finish(&xhat)
    }

    /// Folds batch statistics into the running estimates (unbiased variance).
    pub fn update_running(&mut self, cache: &BatchNormCache, batch: usize) {
        let m = BATCH_NORM_MOMENTUM;
        let unbias = if batch > 1 {
            batch as f64 / (batch - 1) as f64
        } else {
            1.0
        };
        self.running_mean = &self.running_mean * (1.0 - m) + &cache.mean * m;
        self.running_var = &self.running_var * (1.0 - m) + &cache.var * (m * unbias);
    }

    pub fn backward(&self, cache: &BatchNormCache, dy: ArrayView2<f64>, grad: &mut BatchNorm) -> Array2<f64> {
        let dxhat = match (&self.affine, grad.affine.as_mut()) {
            (Some(a), Some(g)) => {
                g.gamma += &(&dy * &cache.xhat).sum_axis(Axis(0));
                g.beta += &dy.sum_axis(Axis(0));
                &dy * &a.gamma
            }
            _ => dy.to_owned(),
        };
        let n = dy.nrows() as f64;
        let mean_dxhat = dxhat.sum_axis(Axis(0)) / n;
        let mean_dxhat_xhat = (&dxhat * &cache.xhat).sum_axis(Axis(0)) / n;
        let dx = dxhat - &mean_dxhat - &(&cache.xhat * &mean_dxhat_xhat);
        dx * &cache.inv_std
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row /= s;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::{flatten, load_flat, Parameters};
    use crate::rng::seeded;
    use ndarray::array;

    fn probe(y: &Array2<f64>, w: &Array2<f64>) -> f64 {
        (y * w).sum()
    }

    /// Central differences of `f` with respect to every entry of `x`.
    fn fd_input(x: &Array2<f64>, f: impl Fn(&Array2<f64>) -> f64) -> Array2<f64> {
        let h = 1e-6;
        let mut g = Array2::zeros(x.raw_dim());
        for idx in ndarray::indices(x.raw_dim()) {
            let mut p = x.clone();
            p[idx] += h;
            let mut m = x.clone();
            m[idx] -= h;
            g[idx] = (f(&p) - f(&m)) / (2.0 * h);
        }
        g
    }

    fn fd_params<P: Parameters + Clone>(p: &P, f: impl Fn(&P) -> f64) -> Vec<f64> {
        let h = 1e-6;
        let base = flatten(p);
        (0..base.len())
            .map(|i| {
                let mut a = p.clone();
                let mut v = base.clone();
                v[i] += h;
                load_flat(&mut a, &v).unwrap();
                let fp = f(&a);
                v[i] -= 2.0 * h;
                load_flat(&mut a, &v).unwrap();
                (fp - f(&a)) / (2.0 * h)
            })
            .collect()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) {
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            let scale = x.abs().max(y.abs()).max(1e-3);
            assert!((x - y).abs() / scale < tol, "entry {i}: {x} vs {y}");
        }
    }

    #[test]
    fn linear_gradients() {
        let mut rng = seeded(1);
        let mut l = Linear::new(&mut rng, 3, 4);
        l.w.mapv_inplace(|v| v * 50.0);
        l.b = array![0.1, -0.2, 0.3, 0.0];
        let x = trunc_normal(&mut rng, (5, 3), 1.0);
        let w = trunc_normal(&mut rng, (5, 4), 1.0);
        let mut g = Linear::zeros(3, 4);
        let dx = l.backward(x.view(), w.view(), &mut g);
        close(dx.as_slice().unwrap(), fd_input(&x, |x| probe(&l.forward(x.view()), &w)).as_slice().unwrap(), 1e-6);
        close(&flatten(&g), &fd_params(&l, |l| probe(&l.forward(x.view()), &w)), 1e-6);
    }

    #[test]
    fn layer_norm_gradients() {
        let mut rng = seeded(2);
        let mut ln = LayerNorm::new(5);
        ln.gamma = array![1.0, 0.5, -1.2, 2.0, 0.3];
        ln.beta = array![0.0, 0.1, 0.2, -0.3, 0.4];
        let x = trunc_normal(&mut rng, (3, 5), 1.0);
        let w = trunc_normal(&mut rng, (3, 5), 1.0);
        let (_, cache) = ln.forward(x.view());
        let mut g = LayerNorm::new(5);
        crate::model::params::zero(&mut g);
        let dx = ln.backward(&cache, w.view(), &mut g);
        close(dx.as_slice().unwrap(), fd_input(&x, |x| probe(&ln.forward(x.view()).0, &w)).as_slice().unwrap(), 1e-5);
        close(&flatten(&g), &fd_params(&ln, |l| probe(&l.forward(x.view()).0, &w)), 1e-5);
    }

    #[test]
    fn batch_norm_gradients() {
        let mut rng = seeded(3);
        for affine in [true, false] {
            let mut bn = BatchNorm::new(3, affine);
            if let Some(a) = bn.affine.as_mut() {
                a.gamma = array![1.5, -0.5, 0.7];
                a.beta = array![0.2, 0.0, -0.1];
            }
            let x = trunc_normal(&mut rng, (4, 3), 1.0);
            let w = trunc_normal(&mut rng, (4, 3), 1.0);
            let (_, cache) = bn.forward_train(x.view());
            let mut g = bn.clone();
            crate::model::params::zero(&mut g);
            let dx = bn.backward(&cache, w.view(), &mut g);
            let f = |bn: &BatchNorm, x: &Array2<f64>| probe(&bn.forward_train(x.view()).0, &w);
            close(dx.as_slice().unwrap(), fd_input(&x, |x| f(&bn, x)).as_slice().unwrap(), 1e-5);
            close(&flatten(&g), &fd_params(&bn, |b| f(b, &x)), 1e-5);
        }
    }

    #[test]
    fn batch_norm_identical_rows_give_zero() {
        let bn = BatchNorm::new(3, false);
        let x = array![[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]];
        let (y, _) = bn.forward_train(x.view());
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_norm_eval_is_idempotent_and_frozen() {
        let mut bn = BatchNorm::new(2, true);
        let x = array![[1.0, -1.0], [3.0, 0.0], [2.0, 5.0]];
        let (_, cache) = bn.forward_train(x.view());
        bn.update_running(&cache, 3);
        assert!((bn.running_mean[0] - 0.2).abs() < 1e-15);
        assert!((bn.running_var[0] - (0.9 + 0.1 * 1.0)).abs() < 1e-15);
        let before = bn.clone();
        let a = bn.forward_eval(x.view());
        let b = bn.forward_eval(x.view());
        assert_eq!(a, b);
        assert_eq!(bn, before);
    }

    #[test]
    fn gelu_derivative() {
        for x in [-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(10.0) - 10.0).abs() < 1e-12);
    }

    #[test]
    fn truncated_normal_is_bounded() {
        let w = trunc_normal(&mut seeded(4), (100, 50), 0.02);
        assert!(w.iter().all(|v| v.abs() <= 0.04));
        let std = (w.mapv(|v| v * v).mean().unwrap()).sqrt();
        assert!(std > 0.015 && std < 0.02);
    }
}
