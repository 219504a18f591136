use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub image_size: [usize; 2],
    pub patch_size: [usize; 2],
    pub in_channels: usize,
    pub embed_dim: usize,
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
    pub window_size: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    pub use_relative_position_bias: bool,
    /// LayerNorm after the patch projection.
    pub patch_norm: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl BackboneConfig {
    /// 64×64 inputs, two stages of two blocks, 256 → 64 tokens.
    pub fn toy() -> Self {
        BackboneConfig {
            image_size: [64, 64],
            patch_size: [4, 4],
            in_channels: 1,
            embed_dim: 32,
            depths: vec![2, 2],
            heads: vec![2, 4],
            window_size: 4,
            mlp_ratio: 4,
            num_classes: 3,
            use_relative_position_bias: false,
            patch_norm: false,
        }
    }

    /// Swin-B layout at 1024×1024 with window 16. Only used for audits.
    pub fn full_scale() -> Self {
        BackboneConfig {
            image_size: [1024, 1024],
            patch_size: [4, 4],
            in_channels: 1,
            embed_dim: 128,
            depths: vec![2, 2, 18, 2],
            heads: vec![4, 8, 16, 32],
            window_size: 16,
            mlp_ratio: 4,
            num_classes: 3,
            use_relative_position_bias: true,
            patch_norm: true,
        }
    }

    pub fn num_stages(&self) -> usize {
        self.depths.len()
    }

    pub fn num_layers(&self) -> usize {
        self.depths.iter().sum()
    }

    pub fn stage_dim(&self, stage: usize) -> usize {
        self.embed_dim << stage
    }

    pub fn final_dim(&self) -> usize {
        self.stage_dim(self.num_stages() - 1)
    }

    pub fn patch_dim(&self) -> usize {
        self.in_channels * self.patch_size[0] * self.patch_size[1]
    }

    /// Token grid at the input of a stage.
    pub fn stage_grid(&self, stage: usize) -> (usize, usize) {
        let h = self.image_size[0] / self.patch_size[0];
        let w = self.image_size[1] / self.patch_size[1];
        (h >> stage, w >> stage)
    }

    /// `(stage, block)` of a global layer index.
    pub fn layer_position(&self, layer: usize) -> (usize, usize) {
        let mut rest = layer;
        for (s, &d) in self.depths.iter().enumerate() {
            if rest < d {
                return (s, rest);
            }
            rest -= d;
        }
        panic!("layer {layer} out of range");
    }

    /// Token width seen by every layer, in order.
    pub fn layer_widths(&self) -> Vec<usize> {
        (0..self.num_layers())
            .map(|i| self.stage_dim(self.layer_position(i).0))
            .collect()
    }

    /// Window side and shift actually used on a grid. A grid no larger
    /// than the window is covered by one unshifted window.
    pub fn window_for(&self, grid: (usize, usize), block: usize) -> (usize, usize) {
        let side = grid.0.min(grid.1);
        if side <= self.window_size {
            (side, 0)
        } else if block % 2 == 1 {
            (self.window_size, self.window_size / 2)
        } else {
            (self.window_size, 0)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.depths.is_empty() || self.depths.len() != self.heads.len() {
            return err(format!(
                "depths {:?} and heads {:?} must be non-empty and equally long",
                self.depths, self.heads
            ));
        }
        if self.depths.contains(&0) {
            return err("every stage needs at least one block".into());
        }
        for a in 0..2 {
            if self.patch_size[a] == 0 || self.image_size[a] % self.patch_size[a] != 0 {
                return err(format!(
                    "image size {:?} not divisible by patch size {:?}",
                    self.image_size, self.patch_size
                ));
            }
        }
        if self.in_channels == 0 || self.embed_dim == 0 || self.num_classes < 2 {
            return err("in_channels, embed_dim must be positive and num_classes ≥ 2".into());
        }
        if self.window_size < 1 || self.mlp_ratio < 1 {
            return err("window_size and mlp_ratio must be positive".into());
        }
        for s in 0..self.num_stages() {
            let d = self.stage_dim(s);
            if d % self.heads[s] != 0 {
                return err(format!(
                    "stage {s} width {d} not divisible by {} heads",
                    self.heads[s]
                ));
            }
            let (h, w) = self.stage_grid(s);
            if h == 0 || w == 0 {
                return err(format!("stage {s} has an empty grid"));
            }
            if s + 1 < self.num_stages() {
                let (h0, w0) = (
                    self.image_size[0] / self.patch_size[0] >> s,
                    self.image_size[1] / self.patch_size[1] >> s,
                );
                if h0 % 2 != 0 || w0 % 2 != 0 {
                    return err(format!("patch merging after stage {s} needs even grid sides, got {h0}×{w0}"));
                }
            }
        }
        Ok(())
    }
}
