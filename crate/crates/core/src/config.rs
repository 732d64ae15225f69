use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const IN_CHANNELS: usize = 3;

/// Architecture hyperparameters of a plain (non-distilled) ViT classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub depth: usize,
    pub num_classes: usize,
    pub mlp_ratio: usize,
}

impl ModelConfig {
    fn deit(embed_dim: usize, num_heads: usize) -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            embed_dim,
            num_heads,
            depth: 12,
            num_classes: 1000,
            mlp_ratio: 4,
        }
    }

    pub fn deit_tiny() -> Self {
        Self::deit(192, 3)
    }

    pub fn deit_small() -> Self {
        Self::deit(384, 6)
    }

    pub fn deit_base() -> Self {
        Self::deit(768, 12)
    }

    /// Small configuration for tests: `grid × grid` patches of `patch_size` pixels.
    pub fn toy(
        grid: usize,
        patch_size: usize,
        embed_dim: usize,
        num_heads: usize,
        depth: usize,
        num_classes: usize,
    ) -> Self {
        Self {
            image_size: grid * patch_size,
            patch_size,
            embed_dim,
            num_heads,
            depth,
            num_classes,
            mlp_ratio: 4,
        }
    }

    /// Patches per image side (P).
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Sequence length including the class token (T = P² + 1).
    pub fn tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn mlp_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if self.patch_size == 0 || self.image_size == 0 {
            return fail("image and patch size must be positive".into());
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return fail(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.embed_dim == 0 || self.num_heads == 0 {
            return fail("embed dim and head count must be positive".into());
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return fail(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.num_heads
            ));
        }
        if self.depth == 0 || self.num_classes == 0 || self.mlp_ratio == 0 {
            return fail("depth, class count and mlp ratio must be positive".into());
        }
        Ok(())
    }

    /// Canonical tensor names and shapes, in container order.
    pub fn tensor_specs(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.embed_dim;
        let ps = self.patch_size;
        let hidden = self.mlp_dim();
        let mut specs = vec![
            ("patch_embed.weight".to_string(), vec![d, IN_CHANNELS, ps, ps]),
            ("patch_embed.bias".to_string(), vec![d]),
            ("cls_token".to_string(), vec![1, 1, d]),
            ("pos_embed".to_string(), vec![1, self.tokens(), d]),
        ];
        for i in 0..self.depth {
            let p = |s: &str| format!("blocks.{i}.{s}");
            specs.extend([
                (p("ln1.weight"), vec![d]),
                (p("ln1.bias"), vec![d]),
                (p("attn.qkv.weight"), vec![3 * d, d]),
                (p("attn.qkv.bias"), vec![3 * d]),
                (p("attn.proj.weight"), vec![d, d]),
                (p("attn.proj.bias"), vec![d]),
                (p("ln2.weight"), vec![d]),
                (p("ln2.bias"), vec![d]),
                (p("mlp.fc1.weight"), vec![hidden, d]),
                (p("mlp.fc1.bias"), vec![hidden]),
                (p("mlp.fc2.weight"), vec![d, hidden]),
                (p("mlp.fc2.bias"), vec![d]),
            ]);
        }
        specs.extend([
            ("norm.weight".to_string(), vec![d]),
            ("norm.bias".to_string(), vec![d]),
            ("head.weight".to_string(), vec![self.num_classes, d]),
            ("head.bias".to_string(), vec![self.num_classes]),
        ]);
        specs
    }
}
