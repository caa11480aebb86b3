//! Projection and prediction MLPs.

use super::layers::{BatchNorm, BatchNormCache, Linear};
use super::params::parameters;
use crate::error::{Error, Result};
use ndarray::{Array2, ArrayView2};
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct HeadLayer {
    pub linear: Linear,
    pub norm: Option<BatchNorm>,
    pub relu: bool,
}
parameters!(HeadLayer { linear, norm });

#[derive(Debug, Clone, PartialEq)]
pub struct MlpHead {
    pub layers: Vec<HeadLayer>,
}
parameters!(MlpHead { layers });

#[derive(Debug, Clone)]
struct LayerCache {
    input: Array2<f64>,
    norm: Option<BatchNormCache>,
    output: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct HeadCache {
    layers: Vec<LayerCache>,
}

impl MlpHead {
    /// Hidden layers get Linear → BN → ReLU; the last gets Linear → BN without
    /// affine parameters (when `final_norm`).
    pub fn new<R: Rng + ?Sized>(rng: &mut R, d_in: usize, widths: &[usize], hidden_norm: bool, final_norm: bool) -> Self {
        let mut layers = Vec::with_capacity(widths.len());
        let mut prev = d_in;
        for (i, &w) in widths.iter().enumerate() {
            let last = i + 1 == widths.len();
            let norm = match (last, hidden_norm, final_norm) {
                (false, true, _) => Some(BatchNorm::new(w, true)),
                (true, _, true) => Some(BatchNorm::new(w, false)),
                _ => None,
            };
            layers.push(HeadLayer {
                linear: Linear::new(rng, prev, w),
                norm,
                relu: !last,
            });
            prev = w;
        }
        Self { layers }
    }

    pub fn d_in(&self) -> usize {
        self.layers[0].linear.d_in()
    }

    pub fn d_out(&self) -> usize {
        self.layers.last().expect("non-empty head").linear.d_out()
    }

    fn check(&self, x: ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.d_in() {
            return Err(Error::ShapeMismatch {
                context: "head input",
                expected: vec![x.nrows(), self.d_in()],
                actual: vec![x.nrows(), x.ncols()],
            });
        }
        if x.nrows() == 0 {
            return Err(Error::invalid("batch", "empty batch"));
        }
        Ok(())
    }

    /// Batch-statistics forward pass.
    pub fn forward_train(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, HeadCache)> {
        self.check(x)?;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        for layer in &self.layers {
            let mut y = layer.linear.forward(h.view());
            let norm = layer.norm.as_ref().map(|bn| {
                let (out, c) = bn.forward_train(y.view());
                y = out;
                c
            });
            if layer.relu {
                y.mapv_inplace(|v| v.max(0.0));
            }
            caches.push(LayerCache {
                input: h,
                norm,
                output: y.clone(),
            });
            h = y;
        }
        Ok((h, HeadCache { layers: caches }))
    }

    /// Running-statistics forward pass; does not change any state.
    pub fn forward_eval(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check(x)?;
        let mut h = x.to_owned();
        for layer in &self.layers {
            h = layer.linear.forward(h.view());
            if let Some(bn) = &layer.norm {
                h = bn.forward_eval(h.view());
            }
            if layer.relu {
                h.mapv_inplace(|v| v.max(0.0));
            }
        }
        Ok(h)
    }

    pub fn update_running(&mut self, cache: &HeadCache) {
        for (layer, c) in self.layers.iter_mut().zip(&cache.layers) {
            if let (Some(bn), Some(nc)) = (layer.norm.as_mut(), c.norm.as_ref()) {
                bn.update_running(nc, c.input.nrows());
            }
        }
    }

    pub fn backward(&self, cache: &HeadCache, dy: ArrayView2<f64>, grad: &mut MlpHead) -> Array2<f64> {
        let mut d = dy.to_owned();
        for ((layer, c), g) in self
            .layers
            .iter()
            .zip(&cache.layers)
            .zip(grad.layers.iter_mut())
            .rev()
        {
            if layer.relu {
                ndarray::Zip::from(&mut d)
                    .and(&c.output)
                    .for_each(|dv, &o| {
                        if o <= 0.0 {
                            *dv = 0.0
                        }
                    });
            }
            if let (Some(bn), Some(nc), Some(gbn)) = (&layer.norm, &c.norm, g.norm.as_mut()) {
                d = bn.backward(nc, d.view(), gbn);
            }
            d = layer.linear.backward(c.input.view(), d.view(), &mut g.linear);
        }
        d
    }
}
