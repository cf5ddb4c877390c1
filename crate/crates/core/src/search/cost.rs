//! Closed-form cost model.
//!
//! Counting conventions: a linear layer over `T` tokens costs
//! `T · d_in · d_out`; a convolution costs `H' · W' · k² · C_in · C_out`;
//! attention costs `2 · h · T² · d_head` per block (scores and weighted
//! sum). Projections and FFNs run over every token including cls. Norms,
//! softmax, activations and pooling are free. Both heads are counted.

use super::gene::{decode, ArchGene};
use super::space::SearchSpaceDef;
use crate::error::Result;
use crate::model::{param_count, ArchConfig, PATCH_SIZE, STAGES, STEM_STRIDE};

/// Multiply-accumulates of one forward pass on a single image at
/// `config.input_resolution`.
pub fn estimate_macs(config: &ArchConfig) -> u64 {
    let c = config.stem_channels as u64;
    let stem_side = (config.input_resolution / STEM_STRIDE) as u64;
    let d = config.embed_dims().map(|v| v as u64);
    let classes = config.num_classes as u64;

    let mut macs = stem_side * stem_side * 9 * (3 * c + 2 * c * c);
    let g0 = config.grid(0) as u64;
    macs += g0 * g0 * (PATCH_SIZE * PATCH_SIZE) as u64 * c * d[0];
    for s in 0..STAGES {
        let g = config.grid(s) as u64;
        let t = g * g + 1;
        if s > 0 {
            macs += g * g * 9 * d[s - 1] * d[s] + d[s - 1] * d[s];
        }
        for b in &config.stages[s].blocks {
            let a = b.attn_dim() as u64;
            let f = b.hidden as u64;
            macs += 4 * t * d[s] * a + 2 * t * t * a + 2 * t * d[s] * f;
        }
    }
    let k = config.token_label_patches() as u64;
    macs + d[2] * classes + k * d[2] * classes
}

/// Learnable scalars, biases, position tables and cls token included.
pub fn count_params(config: &ArchConfig) -> u64 {
    param_count(config) as u64
}

/// MACs of the sub-network a gene describes, at the space's resolution.
pub fn gene_macs(space: &SearchSpaceDef, gene: &ArchGene) -> Result<u64> {
    Ok(estimate_macs(&decode(space, gene)?.arch(space)))
}
