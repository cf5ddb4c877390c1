//! The ViT-Res architecture.
//!
//! A three-convolution stem with a skip connection feeds a 7x7 patch
//! embedding. Three stages of pre-norm transformer blocks follow, joined by
//! residual spatial reductions that halve the token grid and widen the
//! embedding. A classification head reads the cls token and a shared
//! token-label head reads every last-stage patch token.
//!
//! The forward pass optionally takes [`ForwardMasks`]: per-example prefix
//! widths at every site, which is how the weight-sharing super-network runs
//! many sub-networks in one batch.

mod config;
mod fixtures;
mod forward;
mod params;

pub use config::{
    vit_res_tiny_config, ArchConfig, BlockConfig, StageConfig, INPUT_REDUCTION, PATCH_SIZE, STAGES, STEM_STRIDE,
};
pub use fixtures::{fixture, vit_resnas_medium, vit_resnas_small, vit_resnas_tiny, FIXTURE_NAMES};
pub use forward::{
    model_forward, BlockMask, Forward, ForwardMasks, ForwardOptions, ForwardOutput, TokenSequence,
};
pub use params::{names, param_shapes, ModelParams, ParamVars};

use crate::autodiff::{Scalar, Tape, Tensor};
use crate::error::Result;

/// Number of learnable scalars of the network described by `config`.
pub fn param_count(config: &ArchConfig) -> usize {
    param_shapes(config).iter().map(|(_, s)| s.iter().product::<usize>()).sum()
}

/// A configuration together with its weights.
#[derive(Clone, Debug, PartialEq)]
pub struct VitRes<T = f32> {
    pub config: ArchConfig,
    pub params: ModelParams<T>,
}

impl<T: Scalar> VitRes<T> {
    pub fn init(config: ArchConfig, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&config, seed)?;
        Ok(VitRes { config, params })
    }

    pub fn from_parts(config: ArchConfig, params: ModelParams<T>) -> Result<Self> {
        config.validate()?;
        params.check_against(&config)?;
        Ok(VitRes { config, params })
    }

    /// Evaluation-mode logits `([B, classes], [B, K, classes])`.
    pub fn infer(&self, images: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut tape = Tape::new();
        let vars = self.params.attach(&mut tape, false);
        let x = tape.constant(images.clone());
        let out = model_forward(&mut tape, &self.config, &vars, x, ForwardOptions::eval())?;
        let cls = tape.value(out.cls_logits).clone();
        let tok = tape.value(out.token_logits).clone();
        Ok((cls, tok))
    }
}
