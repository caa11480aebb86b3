//! Vision transformer backbone with projection and prediction heads.
//!
//! All tensors are `f64`. Forward passes return caches that the matching
//! `backward` consumes; gradients accumulate into a zeroed copy of the model.

pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod heads;
pub mod layers;
pub mod params;

pub use checkpoint::{Checkpoint, Tensor, CHECKPOINT_VERSION};
pub use config::{BackboneConfig, HeadConfig, PosEmbedding};
pub use encoder::{extract_patches, sincos_table, Encoder, EncoderCache, PatchPixels, TokenSequence};
pub use heads::{HeadCache, MlpHead};
pub use params::{flatten, layout, load_flat, num_params, ParamInfo, Parameters};

use crate::error::{Error, Result};
use ndarray::{Array2, ArrayView2};
use params::parameters;
use rand::Rng;
use std::ops::Range;

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub encoder: Encoder,
    pub projector: MlpHead,
    pub predictor: MlpHead,
}
parameters!(Model { encoder, projector, predictor });

/// Everything the backward pass needs from one view's forward pass.
#[derive(Debug, Clone)]
pub struct ViewForward {
    pub reps: Array2<f64>,
    pub z: Array2<f64>,
    pub q: Array2<f64>,
    encoder: Vec<EncoderCache>,
    projector: HeadCache,
    predictor: HeadCache,
}

impl Model {
    /// The prediction head consumes the projection output `z`.
    pub fn new<R: Rng + ?Sized>(backbone: &BackboneConfig, heads: &HeadConfig, rng: &mut R) -> Result<Self> {
        heads.validate()?;
        let encoder = Encoder::new(backbone, rng)?;
        let projector = MlpHead::new(rng, backbone.token_dim, &heads.projection, heads.hidden_norm, heads.final_norm);
        let predictor = MlpHead::new(rng, projector.d_out(), &heads.prediction, heads.hidden_norm, heads.final_norm);
        Ok(Self {
            encoder,
            projector,
            predictor,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        params::zero(&mut g);
        g
    }

    /// Encoder → projector → predictor on one batch of views, with batch
    /// statistics in every normalization layer.
    pub fn forward_view(&self, batch: &[PatchPixels]) -> Result<ViewForward> {
        let (reps, encoder) = self.encoder.forward_batch(batch)?;
        let (z, projector) = self.projector.forward_train(reps.view())?;
        let (q, predictor) = self.predictor.forward_train(z.view())?;
        Ok(ViewForward {
            reps,
            z,
            q,
            encoder,
            projector,
            predictor,
        })
    }

    /// `z` only, without caches: the target branch.
    pub fn targets(&self, batch: &[PatchPixels]) -> Result<Array2<f64>> {
        let (reps, _) = self.encoder.forward_batch(batch)?;
        Ok(self.projector.forward_train(reps.view())?.0)
    }

    /// Backpropagates `dL/dq` through predictor, projector and encoder.
    pub fn backward_view(&self, fwd: &ViewForward, dq: ArrayView2<f64>, grad: &mut Model) -> Result<()> {
        if dq.dim() != fwd.q.dim() {
            return Err(Error::ShapeMismatch {
                context: "upstream gradient",
                expected: vec![fwd.q.nrows(), fwd.q.ncols()],
                actual: vec![dq.nrows(), dq.ncols()],
            });
        }
        let dz = self.predictor.backward(&fwd.predictor, dq, &mut grad.predictor);
        let dreps = self.projector.backward(&fwd.projector, dz.view(), &mut grad.projector);
        self.encoder.backward_batch(&fwd.encoder, dreps.view(), &mut grad.encoder);
        Ok(())
    }

    /// Folds the batch statistics of a training forward pass into the
    /// running estimates used by [`Model::eval_heads`].
    pub fn update_running_stats(&mut self, fwd: &ViewForward) {
        self.projector.update_running(&fwd.projector);
        self.predictor.update_running(&fwd.predictor);
    }

    /// Frozen-statistics `(z, q)` for a batch of representations.
    pub fn eval_heads(&self, reps: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        let z = self.projector.forward_eval(reps)?;
        let q = self.predictor.forward_eval(z.view())?;
        Ok((z, q))
    }

    /// Flat ranges for adaptive clipping: the embedding tensors, each
    /// transformer block, the final norm, the projector and the predictor.
    pub fn clip_groups(&self) -> Vec<(String, Range<usize>)> {
        let mut out: Vec<(String, Range<usize>)> = Vec::new();
        for info in layout(self) {
            let parts: Vec<&str> = info.name.split('.').collect();
            let key = match parts.as_slice() {
                ["encoder", "blocks", b, ..] => format!("encoder.blocks.{b}"),
                ["encoder", "patch_embed" | "cls_token" | "pos", ..] => "encoder.embed".to_string(),
                [a, b, ..] if *a == "encoder" => format!("{a}.{b}"),
                [a, ..] => a.to_string(),
                [] => String::new(),
            };
            match out.last_mut() {
                Some((k, r)) if *k == key => r.end = info.range.end,
                _ => out.push((key, info.range)),
            }
        }
        out
    }

    /// Parameters and buffers as named checkpoint tensors.
    pub fn to_tensors(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit(&params::join(prefix, "param"), &mut |name, shape, data| {
            out.push((name.to_string(), Tensor::f64(shape, data.to_vec())));
        });
        self.visit_buffers(&params::join(prefix, "buffer"), &mut |name, shape, data| {
            out.push((name.to_string(), Tensor::f64(shape, data.to_vec())));
        });
        out
    }

    /// Restores parameters and buffers written by [`Model::to_tensors`].
    pub fn load_tensors(&mut self, ckpt: &Checkpoint, prefix: &str) -> Result<()> {
        let mut err: Option<Error> = None;
        let mut load = |name: &str, data: &mut [f64]| {
            if err.is_some() {
                return;
            }
            match ckpt.f64_data(name) {
                Ok(v) if v.len() == data.len() => data.copy_from_slice(v),
                Ok(v) => {
                    err = Some(Error::Corrupt(format!(
                        "{name}: expected {} values, found {}",
                        data.len(),
                        v.len()
                    )))
                }
                Err(e) => err = Some(e),
            }
        };
        self.visit_mut(&params::join(prefix, "param"), &mut load);
        self.visit_buffers_mut(&params::join(prefix, "buffer"), &mut load);
        err.map_or(Ok(()), Err)
    }
}
