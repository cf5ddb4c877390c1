use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of transformer stages.
pub const STAGES: usize = 3;
/// Stride of the first stem convolution.
pub const STEM_STRIDE: usize = 2;
/// Patch size of the tokenizing convolution (applied after the stem).
pub const PATCH_SIZE: usize = 7;
/// Input pixels per stage-1 token side.
pub const INPUT_REDUCTION: usize = STEM_STRIDE * PATCH_SIZE;

/// One transformer block: `heads` attention heads of width `head_dim` and
/// an FFN with `hidden` units.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BlockConfig {
    pub heads: usize,
    pub head_dim: usize,
    pub hidden: usize,
}

impl BlockConfig {
    pub fn new(heads: usize, head_dim: usize, hidden: usize) -> Self {
        BlockConfig { heads, head_dim, hidden }
    }

    /// Width of the concatenated Q/K/V projections.
    pub fn attn_dim(&self) -> usize {
        self.heads * self.head_dim
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StageConfig {
    pub embed_dim: usize,
    pub blocks: Vec<BlockConfig>,
}

impl StageConfig {
    pub fn uniform(embed_dim: usize, depth: usize, block: BlockConfig) -> Self {
        StageConfig { embed_dim, blocks: vec![block; depth] }
    }
}

/// Full architecture of a three-stage ViT-Res network.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArchConfig {
    pub stem_channels: usize,
    pub stages: [StageConfig; STAGES],
    pub num_classes: usize,
    pub input_resolution: usize,
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |d: String| Err(Error::dim("arch_config", d));
        if self.stem_channels == 0 || self.num_classes == 0 {
            return bad("stem_channels and num_classes must be positive".into());
        }
        if self.input_resolution == 0 || !self.input_resolution.is_multiple_of(INPUT_REDUCTION) {
            return bad(format!(
                "input_resolution {} is not a positive multiple of {INPUT_REDUCTION}",
                self.input_resolution
            ));
        }
        let g = self.stage1_grid();
        if !g.is_multiple_of(1 << (STAGES - 1)) {
            return bad(format!("stage-1 grid {g} cannot be halved {} times", STAGES - 1));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.embed_dim == 0 {
                return bad(format!("stage {i} has zero embed_dim"));
            }
            if i > 0 && s.embed_dim <= self.stages[i - 1].embed_dim {
                return bad(format!(
                    "embed_dim must increase across stages: stage {} has {} after {}",
                    i,
                    s.embed_dim,
                    self.stages[i - 1].embed_dim
                ));
            }
            for (j, b) in s.blocks.iter().enumerate() {
                if b.heads == 0 || b.head_dim == 0 || b.hidden == 0 {
                    return bad(format!("stage {i} block {j} has a zero extent: {b:?}"));
                }
            }
        }
        Ok(())
    }

    /// Patch-grid side at stage 1.
    pub fn stage1_grid(&self) -> usize {
        self.input_resolution / INPUT_REDUCTION
    }

    /// Patch-grid side at `stage` (0-based); halves at every reduction.
    pub fn grid(&self, stage: usize) -> usize {
        self.stage1_grid() >> stage
    }

    /// Sequence length at `stage`, classification token included.
    pub fn seq_len(&self, stage: usize) -> usize {
        self.grid(stage).pow(2) + 1
    }

    /// Patch tokens in the last stage; the token-label count `K`.
    pub fn token_label_patches(&self) -> usize {
        self.grid(STAGES - 1).pow(2)
    }

    pub fn depth(&self) -> usize {
        self.stages.iter().map(|s| s.blocks.len()).sum()
    }

    pub fn embed_dims(&self) -> [usize; STAGES] {
        [self.stages[0].embed_dim, self.stages[1].embed_dim, self.stages[2].embed_dim]
    }

    /// Same architecture at a different input resolution.
    pub fn at_resolution(&self, resolution: usize) -> Self {
        ArchConfig { input_resolution: resolution, ..self.clone() }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: ArchConfig = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// ViT-Res-Tiny: stem width 24, stages 192/384/768 with four blocks each,
/// 64-wide heads (3/6/12 of them) and 4x FFN expansion, at 224 pixels.
pub fn vit_res_tiny_config() -> ArchConfig {
    let stage = |d: usize, h: usize| StageConfig::uniform(d, 4, BlockConfig::new(h, 64, 4 * d));
    ArchConfig {
        stem_channels: 24,
        stages: [stage(192, 3), stage(384, 6), stage(768, 12)],
        num_classes: 1000,
        input_resolution: 224,
    }
}
