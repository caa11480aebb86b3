//! Pre-norm vision transformer over sparse patch sequences.

use super::config::{BackboneConfig, PosEmbedding};
use super::layers::{gelu, gelu_grad, softmax_rows, trunc_normal, LayerNorm, LayerNormCache, Linear};
use super::params::{self, parameters, Parameters};
use crate::data::Image;
use crate::error::{Error, Result};
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rayon::prelude::*;

/// Samples per gradient-accumulation chunk in [`Encoder::backward_batch`].
/// Chunk sums are combined in order, so results do not depend on thread count.
const BACKWARD_CHUNK: usize = 8;

/// Raw pixels of the sampled patches of one view, one flattened patch per row.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPixels {
    pub pixels: Array2<f64>,
    pub position_ids: Vec<usize>,
}

/// Embedded patch tokens with the class token prepended.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: Array2<f64>,
    pub position_ids: Vec<usize>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }
}

/// Cuts the listed grid cells out of `view`. Pixels are flattened row-major
/// as (y, x, channel).
pub fn extract_patches(view: &Image, indices: &[usize], config: &BackboneConfig) -> Result<PatchPixels> {
    if view.width != config.image_size || view.height != config.image_size {
        return Err(Error::ShapeMismatch {
            context: "view pixels",
            expected: vec![config.image_size, config.image_size],
            actual: vec![view.height, view.width],
        });
    }
    let side = config.grid_side();
    let p = config.patch_size;
    let mut pixels = Array2::zeros((indices.len(), config.patch_dim()));
    for (row, &idx) in indices.iter().enumerate() {
        if idx >= side * side {
            return Err(Error::IndexOutOfRange {
                index: idx,
                len: side * side,
            });
        }
        let patch = view.patch((idx % side) * p, (idx / side) * p, p);
        pixels.row_mut(row).assign(&ArrayView1::from(&patch));
    }
    Ok(PatchPixels {
        pixels,
        position_ids: indices.to_vec(),
    })
}

/// 2D sine-cosine table: the first half of each code encodes the grid row,
/// the second half the column.
pub fn sincos_table(side: usize, dim: usize) -> Array2<f64> {
    let quarter = dim / 4;
    let omega: Vec<f64> = (0..quarter)
        .map(|i| 1.0 / 10000f64.powf(i as f64 / quarter as f64))
        .collect();
    let mut table = Array2::zeros((side * side, dim));
    for idx in 0..side * side {
        let coords = [(idx / side) as f64, (idx % side) as f64];
        for (half, &pos) in coords.iter().enumerate() {
            let base = half * 2 * quarter;
            for (i, w) in omega.iter().enumerate() {
                table[[idx, base + i]] = (pos * w).sin();
                table[[idx, base + quarter + i]] = (pos * w).cos();
            }
        }
    }
    table
}

/// Positional codes indexed by original grid position.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionTable {
    pub table: Array2<f64>,
    pub learnable: bool,
}

impl Parameters for PositionTable {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        if self.learnable {
            self.table.visit(prefix, f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        if self.learnable {
            self.table.visit_mut(prefix, f);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}
parameters!(Block { ln1, qkv, proj, ln2, fc1, fc2 });

#[derive(Debug, Clone)]
pub struct BlockCache {
    ln1: LayerNormCache,
    h1: Array2<f64>,
    qkv: Array2<f64>,
    attn: Vec<Array2<f64>>,
    o: Array2<f64>,
    ln2: LayerNormCache,
    h2: Array2<f64>,
    f1: Array2<f64>,
    g: Array2<f64>,
}

impl Block {
    fn new<R: Rng + ?Sized>(rng: &mut R, dim: usize, hidden: usize) -> Self {
        Self {
            ln1: LayerNorm::new(dim),
            qkv: Linear::new(rng, dim, 3 * dim),
            proj: Linear::new(rng, dim, dim),
            ln2: LayerNorm::new(dim),
            fc1: Linear::new(rng, dim, hidden),
            fc2: Linear::new(rng, hidden, dim),
        }
    }

    fn forward(&self, x: ArrayView2<f64>, n_heads: usize) -> (Array2<f64>, BlockCache) {
        let (l, d) = x.dim();
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (h1, ln1) = self.ln1.forward(x);
        let qkv = self.qkv.forward(h1.view());
        let mut o = Array2::zeros((l, d));
        let mut attn = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let q = qkv.slice(s![.., h * dh..(h + 1) * dh]);
            let k = qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
            let v = qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
            let p = softmax_rows(&(q.dot(&k.t()) * scale));
            o.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&p.dot(&v));
            attn.push(p);
        }
        let x1 = &x + &self.proj.forward(o.view());
        let (h2, ln2) = self.ln2.forward(x1.view());
        let f1 = self.fc1.forward(h2.view());
        let g = f1.mapv(gelu);
        let out = &x1 + &self.fc2.forward(g.view());
        let cache = BlockCache {
            ln1,
            h1,
            qkv,
            attn,
            o,
            ln2,
            h2,
            f1,
            g,
        };
        (out, cache)
    }

    fn backward(&self, cache: &BlockCache, dy: ArrayView2<f64>, grad: &mut Block, n_heads: usize) -> Array2<f64> {
        let (l, d) = dy.dim();
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let dg = self.fc2.backward(cache.g.view(), dy, &mut grad.fc2);
        let df1 = dg * &cache.f1.mapv(gelu_grad);
        let dh2 = self.fc1.backward(cache.h2.view(), df1.view(), &mut grad.fc1);
        let dx1 = &dy + &self.ln2.backward(&cache.ln2, dh2.view(), &mut grad.ln2);

        let do_ = self.proj.backward(cache.o.view(), dx1.view(), &mut grad.proj);
        let mut dqkv = Array2::zeros((l, 3 * d));
        for h in 0..n_heads {
            let cols = h * dh..(h + 1) * dh;
            let q = cache.qkv.slice(s![.., cols.clone()]);
            let k = cache.qkv.slice(s![.., d + cols.start..d + cols.end]);
            let v = cache.qkv.slice(s![.., 2 * d + cols.start..2 * d + cols.end]);
            let p = &cache.attn[h];
            let do_h = do_.slice(s![.., cols.clone()]);
            let dp = do_h.dot(&v.t());
            let dv = p.t().dot(&do_h);
            let row_dot = (&dp * p).sum_axis(Axis(1)).insert_axis(Axis(1));
            let ds = p * &(dp - &row_dot) * scale;
            let dq = ds.dot(&k);
            let dk = ds.t().dot(&q);
            dqkv.slice_mut(s![.., cols.clone()]).assign(&dq);
            dqkv.slice_mut(s![.., d + cols.start..d + cols.end]).assign(&dk);
            dqkv.slice_mut(s![.., 2 * d + cols.start..2 * d + cols.end]).assign(&dv);
        }
        let dh1 = self.qkv.backward(cache.h1.view(), dqkv.view(), &mut grad.qkv);
        dx1 + self.ln1.backward(&cache.ln1, dh1.view(), &mut grad.ln1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub config: BackboneConfig,
    pub patch_embed: Linear,
    pub cls_token: Array1<f64>,
    pub pos: PositionTable,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
}
parameters!(Encoder { patch_embed, cls_token, pos, blocks, norm });

/// Activations of one forward pass, consumed by [`Encoder::backward`].
#[derive(Debug, Clone)]
pub struct EncoderCache {
    pixels: Array2<f64>,
    position_ids: Vec<usize>,
    blocks: Vec<BlockCache>,
    norm: LayerNormCache,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(config: &BackboneConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.token_dim;
        let patch_embed = Linear::new(rng, config.patch_dim(), d);
        let cls_token = trunc_normal(rng, (1, d), 0.02).remove_axis(Axis(0));
        let pos = match config.pos_embedding {
            PosEmbedding::Learnable => PositionTable {
                table: trunc_normal(rng, (config.n_patches(), d), 0.02),
                learnable: true,
            },
            PosEmbedding::SinCos => PositionTable {
                table: sincos_table(config.grid_side(), d),
                learnable: false,
            },
        };
        let blocks = (0..config.n_blocks)
            .map(|_| Block::new(rng, d, d * config.mlp_ratio))
            .collect();
        Ok(Self {
            config: config.clone(),
            patch_embed,
            cls_token,
            pos,
            blocks,
            norm: LayerNorm::new(d),
        })
    }

    /// Same shapes, every trainable entry zero. Used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        params::zero(&mut g);
        g
    }

    fn check_positions(&self, ids: &[usize]) -> Result<()> {
        let n = self.config.n_patches();
        match ids.iter().find(|&&i| i >= n) {
            Some(&index) => Err(Error::IndexOutOfRange { index, len: n }),
            None => Ok(()),
        }
    }

    /// Linear patch embedding plus positional code, class token first.
    pub fn embed(&self, patches: &PatchPixels) -> Result<TokenSequence> {
        let (k, pd) = patches.pixels.dim();
        if pd != self.config.patch_dim() || patches.position_ids.len() != k {
            return Err(Error::ShapeMismatch {
                context: "patch pixels",
                expected: vec![patches.position_ids.len(), self.config.patch_dim()],
                actual: vec![k, pd],
            });
        }
        self.check_positions(&patches.position_ids)?;
        let mut tokens = Array2::zeros((k + 1, self.config.token_dim));
        tokens.row_mut(0).assign(&self.cls_token);
        let embedded = self.patch_embed.forward(patches.pixels.view());
        for (i, &id) in patches.position_ids.iter().enumerate() {
            let mut row = tokens.row_mut(i + 1);
            row.assign(&embedded.row(i));
            row += &self.pos.table.row(id);
        }
        Ok(TokenSequence {
            tokens,
            position_ids: patches.position_ids.clone(),
        })
    }

    pub fn patchify(&self, view: &Image, indices: &[usize]) -> Result<TokenSequence> {
        self.embed(&extract_patches(view, indices, &self.config)?)
    }

    fn run_blocks(&self, tokens: Array2<f64>) -> Result<(Array2<f64>, Vec<BlockCache>)> {
        let mut x = tokens;
        let mut caches = Vec::with_capacity(self.blocks.len());
        for (b, block) in self.blocks.iter().enumerate() {
            let (y, cache) = block.forward(x.view(), self.config.n_heads);
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("encoder block {b}"),
                });
            }
            x = y;
            caches.push(cache);
        }
        Ok((x, caches))
    }

    /// Class-token output after the final normalization.
    pub fn encode(&self, seq: &TokenSequence) -> Result<Array1<f64>> {
        if seq.tokens.ncols() != self.config.token_dim || seq.tokens.nrows() != seq.position_ids.len() + 1 {
            return Err(Error::ShapeMismatch {
                context: "token sequence",
                expected: vec![seq.position_ids.len() + 1, self.config.token_dim],
                actual: vec![seq.tokens.nrows(), seq.tokens.ncols()],
            });
        }
        let (x, _) = self.run_blocks(seq.tokens.clone())?;
        let (y, _) = self.norm.forward(x.slice(s![0..1, ..]));
        Ok(y.row(0).to_owned())
    }

    pub fn forward(&self, patches: &PatchPixels) -> Result<(Array1<f64>, EncoderCache)> {
        let seq = self.embed(patches)?;
        let (x, blocks) = self.run_blocks(seq.tokens)?;
        let (y, norm) = self.norm.forward(x.slice(s![0..1, ..]));
        let cache = EncoderCache {
            pixels: patches.pixels.clone(),
            position_ids: patches.position_ids.clone(),
            blocks,
            norm,
        };
        Ok((y.row(0).to_owned(), cache))
    }

    /// Accumulates `d(loss)/d(params)` into `grad` given `d(loss)/d(rep)`.
    pub fn backward(&self, cache: &EncoderCache, d_rep: ArrayView1<f64>, grad: &mut Encoder) {
        let l = cache.position_ids.len() + 1;
        let d = self.config.token_dim;
        let d_cls = self
            .norm
            .backward(&cache.norm, d_rep.insert_axis(Axis(0)), &mut grad.norm);
        let mut dx = Array2::zeros((l, d));
        dx.row_mut(0).assign(&d_cls.row(0));
        for (b, block) in self.blocks.iter().enumerate().rev() {
            dx = block.backward(&cache.blocks[b], dx.view(), &mut grad.blocks[b], self.config.n_heads);
        }
        grad.cls_token += &dx.row(0);
        let dtok = dx.slice(s![1.., ..]);
        if self.pos.learnable {
            for (i, &id) in cache.position_ids.iter().enumerate() {
                let mut row = grad.pos.table.row_mut(id);
                row += &dtok.row(i);
            }
        }
        self.patch_embed
            .backward(cache.pixels.view(), dtok, &mut grad.patch_embed);
    }

    /// Encodes every sample in parallel; row `i` of the result belongs to `batch[i]`.
    pub fn forward_batch(&self, batch: &[PatchPixels]) -> Result<(Array2<f64>, Vec<EncoderCache>)> {
        let outs: Vec<(Array1<f64>, EncoderCache)> =
            batch.par_iter().map(|p| self.forward(p)).collect::<Result<_>>()?;
        let mut reps = Array2::zeros((outs.len(), self.config.token_dim));
        let mut caches = Vec::with_capacity(outs.len());
        for (i, (rep, cache)) in outs.into_iter().enumerate() {
            reps.row_mut(i).assign(&rep);
            caches.push(cache);
        }
        Ok((reps, caches))
    }

    /// Representations only, without caches.
    pub fn encode_batch(&self, batch: &[PatchPixels]) -> Result<Array2<f64>> {
        let reps: Vec<Array1<f64>> = batch
            .par_iter()
            .map(|p| self.encode(&self.embed(p)?))
            .collect::<Result<_>>()?;
        let mut out = Array2::zeros((reps.len(), self.config.token_dim));
        for (i, r) in reps.iter().enumerate() {
            out.row_mut(i).assign(r);
        }
        Ok(out)
    }

    pub fn backward_batch(&self, caches: &[EncoderCache], d_reps: ArrayView2<f64>, grad: &mut Encoder) {
        let partial: Vec<Encoder> = caches
            .par_chunks(BACKWARD_CHUNK)
            .enumerate()
            .map(|(c, chunk)| {
                let mut g = self.zeros_like();
                for (j, cache) in chunk.iter().enumerate() {
                    self.backward(cache, d_reps.row(c * BACKWARD_CHUNK + j), &mut g);
                }
                g
            })
            .collect();
        for g in &partial {
            params::accumulate(grad, g);
        }
    }
}
