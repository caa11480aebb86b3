use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosEmbedding {
    Learnable,
    SinCos,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub patch_size: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub token_dim: usize,
    pub image_size: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    #[serde(default = "default_pos")]
    pub pos_embedding: PosEmbedding,
    #[serde(default = "default_channels")]
    pub channels: usize,
}

fn default_mlp_ratio() -> usize {
    4
}

fn default_pos() -> PosEmbedding {
    PosEmbedding::Learnable
}

fn default_channels() -> usize {
    3
}

impl BackboneConfig {
    fn cifar(n_heads: usize, token_dim: usize) -> Self {
        Self {
            patch_size: 2,
            n_blocks: 12,
            n_heads,
            token_dim,
            image_size: 32,
            mlp_ratio: 4,
            pos_embedding: PosEmbedding::Learnable,
            channels: 3,
        }
    }

    fn imagenet(n_heads: usize, token_dim: usize) -> Self {
        Self {
            patch_size: 16,
            n_blocks: 12,
            n_heads,
            token_dim,
            image_size: 224,
            mlp_ratio: 4,
            pos_embedding: PosEmbedding::SinCos,
            channels: 3,
        }
    }

    pub fn vit_tiny_2() -> Self {
        Self::cifar(3, 192)
    }

    pub fn vit_small_2() -> Self {
        Self::cifar(6, 384)
    }

    pub fn vit_base_2() -> Self {
        Self::cifar(12, 768)
    }

    pub fn vit_small_16() -> Self {
        Self::imagenet(6, 384)
    }

    pub fn vit_base_16() -> Self {
        Self::imagenet(12, 768)
    }

    /// Desk-scale backbone: 4 blocks, 2 heads, width 64, 8×8 grid of 4-pixel patches.
    pub fn vit_micro() -> Self {
        Self {
            patch_size: 4,
            n_blocks: 4,
            n_heads: 2,
            token_dim: 64,
            image_size: 32,
            mlp_ratio: 4,
            pos_embedding: PosEmbedding::Learnable,
            channels: 3,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        Ok(match name {
            "vit-tiny/2" | "vit-tiny" => Self::vit_tiny_2(),
            "vit-small/2" => Self::vit_small_2(),
            "vit-base/2" => Self::vit_base_2(),
            "vit-small/16" => Self::vit_small_16(),
            "vit-base/16" => Self::vit_base_16(),
            "vit-micro" | "micro" => Self::vit_micro(),
            _ => return Err(Error::Config(format!("unknown backbone preset {name:?}"))),
        })
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.token_dim / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("patch_size", self.patch_size),
            ("n_blocks", self.n_blocks),
            ("n_heads", self.n_heads),
            ("token_dim", self.token_dim),
            ("image_size", self.image_size),
            ("mlp_ratio", self.mlp_ratio),
            ("channels", self.channels),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(name, "must be positive"));
            }
        }
        if self.token_dim % self.n_heads != 0 {
            return Err(Error::invalid(
                "token_dim",
                format!("{} not divisible by n_heads {}", self.token_dim, self.n_heads),
            ));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::invalid(
                "image_size",
                format!("{} not divisible by patch_size {}", self.image_size, self.patch_size),
            ));
        }
        if self.pos_embedding == PosEmbedding::SinCos && self.token_dim % 4 != 0 {
            return Err(Error::invalid("token_dim", "sin-cos positions need a multiple of 4"));
        }
        Ok(())
    }
}

/// Output widths of the projection and prediction MLPs. Every layer but the
/// last is followed by BN + ReLU; the last by parameter-free BN when
/// `final_norm` is set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub projection: Vec<usize>,
    pub prediction: Vec<usize>,
    #[serde(default = "default_true")]
    pub hidden_norm: bool,
    #[serde(default = "default_true")]
    pub final_norm: bool,
}

fn default_true() -> bool {
    true
}

impl HeadConfig {
    pub fn cifar() -> Self {
        Self {
            projection: vec![512, 512, 128],
            prediction: vec![512, 512, 128],
            hidden_norm: true,
            final_norm: true,
        }
    }

    pub fn imagenet() -> Self {
        Self {
            projection: vec![4096, 4096, 256],
            prediction: vec![4096, 256],
            hidden_norm: true,
            final_norm: true,
        }
    }

    pub fn micro() -> Self {
        Self {
            projection: vec![128, 128, 32],
            prediction: vec![128, 32],
            hidden_norm: true,
            final_norm: true,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        Ok(match name {
            "cifar" => Self::cifar(),
            "imagenet" => Self::imagenet(),
            "micro" => Self::micro(),
            _ => return Err(Error::Config(format!("unknown head preset {name:?}"))),
        })
    }

    pub fn output_dim(&self) -> usize {
        *self.prediction.last().expect("validated")
    }

    pub fn validate(&self) -> Result<()> {
        if self.projection.is_empty() || self.prediction.is_empty() {
            return Err(Error::invalid("heads", "both heads need at least one layer"));
        }
        if self.projection.iter().chain(&self.prediction).any(|&w| w == 0) {
            return Err(Error::invalid("heads", "layer widths must be positive"));
        }
        if self.projection.last() != self.prediction.last() {
            return Err(Error::invalid(
                "heads",
                format!(
                    "projection output {} must equal prediction output {}",
                    self.projection.last().unwrap(),
                    self.prediction.last().unwrap()
                ),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        for name in ["vit-tiny/2", "vit-small/2", "vit-base/2", "vit-small/16", "vit-base/16", "vit-micro"] {
            BackboneConfig::preset(name).unwrap().validate().unwrap();
        }
        for name in ["cifar", "imagenet", "micro"] {
            HeadConfig::preset(name).unwrap().validate().unwrap();
        }
        assert!(BackboneConfig::preset("vit-huge").is_err());
    }

    #[test]
    fn table_rows() {
        let t = BackboneConfig::vit_tiny_2();
        assert_eq!((t.patch_size, t.n_blocks, t.n_heads, t.token_dim), (2, 12, 3, 192));
        assert_eq!(t.n_patches(), 256);
        let s = BackboneConfig::vit_small_16();
        assert_eq!((s.patch_size, s.n_heads, s.token_dim, s.pos_embedding), (16, 6, 384, PosEmbedding::SinCos));
        let m = BackboneConfig::vit_micro();
        assert_eq!((m.n_blocks, m.n_heads, m.token_dim), (4, 2, 64));
        assert_eq!(HeadConfig::cifar().output_dim(), 128);
        assert_eq!(HeadConfig::imagenet().prediction, vec![4096, 256]);
    }

    #[test]
    fn invalid_backbones() {
        let mut c = BackboneConfig::vit_micro();
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = BackboneConfig::vit_micro();
        c.patch_size = 5;
        assert!(c.validate().is_err());
    }
}
