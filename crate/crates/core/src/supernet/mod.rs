//! Weight-sharing super-network.
//!
//! The super-network is the widest architecture of a search space with
//! every block slot present. A sub-network is simulated by zeroing a suffix
//! of channels at every site ("ordered" masking) and by multiplying the
//! residual branches of dropped blocks by zero. Layer norms use statistics
//! of the active prefix only, so each example sees exactly the computation
//! of its own sub-network and several sub-networks can share one batch.

mod choice;

pub use choice::{SlotChoice, SubNetChoice};

use rand::Rng;

use crate::autodiff::{Scalar, Tape, Var};
use crate::error::{Error, Result};
use crate::model::{
    model_forward, names, param_shapes, BlockMask, ForwardMasks, ForwardOptions, ForwardOutput, ModelParams, ParamVars,
    VitRes, STAGES,
};
use crate::search::{decode, sample_gene, SearchSpaceDef};

/// Per-example active widths; the masks a super-network forward consumes.
pub type MaskSet = ForwardMasks;

/// Fraction of training after which the whole space is sampled.
pub const WARMUP_END: f64 = 0.25;

/// Sampling limits: gene position `i` may take one of its first
/// `allowed[i]` options (the largest ones).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bounds {
    pub allowed: Vec<usize>,
}

impl Bounds {
    pub fn full(space: &SearchSpaceDef) -> Self {
        Bounds { allowed: space.option_counts() }
    }

    pub fn maxima(space: &SearchSpaceDef) -> Self {
        Bounds { allowed: vec![1; space.option_counts().len()] }
    }

    pub fn validate(&self, space: &SearchSpaceDef) -> Result<()> {
        let counts = space.option_counts();
        if counts.len() != self.allowed.len() {
            return Err(Error::contract(format!("bounds cover {} positions, space has {}", self.allowed.len(), counts.len())));
        }
        for (i, (&a, &n)) in self.allowed.iter().zip(&counts).enumerate() {
            if a == 0 || a > n {
                return Err(Error::contract(format!("bounds allow {a} options at position {i}, which has {n}")));
            }
        }
        Ok(())
    }
}

/// Sampling limits during warmup: only maxima at the start, one more option
/// per position at evenly spaced fractions, the full space from
/// [`WARMUP_END`] on. Widths and depth grow on the same schedule.
pub fn warmup_bounds(epoch_fraction: f64, space: &SearchSpaceDef) -> Bounds {
    let progress = if epoch_fraction.is_nan() { 0.0 } else { (epoch_fraction / WARMUP_END).clamp(0.0, 1.0) };
    let allowed = space
        .option_counts()
        .into_iter()
        .map(|n| 1 + ((n - 1) as f64 * progress).floor() as usize)
        .collect();
    Bounds { allowed }
}

/// Independent uniform draw of every architectural parameter within
/// `bounds`.
pub fn sample_choice<R: Rng + ?Sized>(space: &SearchSpaceDef, rng: &mut R, bounds: &Bounds) -> Result<SubNetChoice> {
    bounds.validate(space)?;
    decode(space, &sample_gene(&bounds.allowed, rng))
}

/// Masks for a batch in which example `i` runs `choices[i · N_a / batch]`.
pub fn masks_for_batch(space: &SearchSpaceDef, choices: &[SubNetChoice], batch: usize) -> Result<MaskSet> {
    let n_a = choices.len();
    if n_a == 0 || !batch.is_multiple_of(n_a) {
        return Err(Error::contract(format!("{n_a} sub-networks do not divide a batch of {batch}")));
    }
    for c in choices {
        c.validate(space)?;
    }
    let of = |i: usize| &choices[i * n_a / batch];
    let embed = std::array::from_fn(|s| (0..batch).map(|i| of(i).embed[s]).collect());
    let blocks = std::array::from_fn(|s| {
        let head_dim = space.stages[s].head_dim;
        (0..space.stages[s].slots())
            .map(|j| BlockMask {
                keep: (0..batch).map(|i| of(i).slots[s][j].keep).collect(),
                attn_width: (0..batch).map(|i| of(i).slots[s][j].heads * head_dim).collect(),
                hidden: (0..batch).map(|i| of(i).slots[s][j].hidden).collect(),
            })
            .collect()
    });
    Ok(ForwardMasks { embed, blocks })
}

/// Masks running one choice on every example of a batch.
pub fn masks_from_choice(space: &SearchSpaceDef, choice: &SubNetChoice, batch: usize) -> Result<MaskSet> {
    masks_for_batch(space, std::slice::from_ref(choice), batch)
}

/// The choice example `example` runs under `masks`.
pub fn choice_from_masks(space: &SearchSpaceDef, masks: &MaskSet, example: usize) -> SubNetChoice {
    SubNetChoice {
        embed: masks.embed.each_ref().map(|w| w[example]),
        slots: std::array::from_fn(|s| {
            masks.blocks[s]
                .iter()
                .map(|m| SlotChoice {
                    keep: m.keep[example],
                    heads: m.attn_width[example] / space.stages[s].head_dim,
                    hidden: m.hidden[example],
                })
                .collect()
        }),
    }
}

/// One forward pass of `choices.len()` sub-networks, each on its own
/// contiguous sub-batch.
pub fn supernet_forward_multi<T: Scalar>(
    tape: &mut Tape<T>,
    space: &SearchSpaceDef,
    vars: &ParamVars,
    images: Var,
    choices: &[SubNetChoice],
    opts: ForwardOptions<'_>,
) -> Result<ForwardOutput> {
    let batch = tape.shape(images)[0];
    let masks = masks_for_batch(space, choices, batch)?;
    let config = space.max_config();
    model_forward(tape, &config, vars, images, opts.with_masks(&masks))
}

/// Standalone sub-network: every tensor sliced to its prefix widths,
/// dropped blocks omitted.
pub fn extract_subnet<T: Scalar>(space: &SearchSpaceDef, params: &ModelParams<T>, choice: &SubNetChoice) -> Result<VitRes<T>> {
    choice.validate(space)?;
    let config = choice.arch(space);
    config.validate()?;
    let kept: [Vec<usize>; STAGES] = std::array::from_fn(|s| choice.kept_slots(s));
    let mut out = ModelParams::new();
    for (name, shape) in param_shapes(&config) {
        let source = source_name(&name, &kept);
        out.insert(name, params.get(&source)?.slice_prefix(&shape)?)?;
    }
    VitRes::from_parts(config, out)
}

/// Maps `stages.s.blocks.b.*` of an extracted network to the super-network
/// slot that block came from.
fn source_name(name: &str, kept: &[Vec<usize>; STAGES]) -> String {
    for (s, slots) in kept.iter().enumerate() {
        for (b, &slot) in slots.iter().enumerate() {
            let prefix = names::block(s, b, "");
            if let Some(rest) = name.strip_prefix(&prefix) {
                return names::block(s, slot, rest);
            }
        }
    }
    name.to_string()
}

/// A search space together with the shared weights of its super-network.
#[derive(Clone, Debug, PartialEq)]
pub struct SuperNet<T = f32> {
    pub space: SearchSpaceDef,
    pub params: ModelParams<T>,
}

impl<T: Scalar> SuperNet<T> {
    pub fn init(space: SearchSpaceDef, seed: u64) -> Result<Self> {
        space.validate()?;
        let params = ModelParams::init(&space.max_config(), seed)?;
        Ok(SuperNet { space, params })
    }

    pub fn from_parts(space: SearchSpaceDef, params: ModelParams<T>) -> Result<Self> {
        space.validate()?;
        params.check_against(&space.max_config())?;
        Ok(SuperNet { space, params })
    }

    pub fn extract(&self, choice: &SubNetChoice) -> Result<VitRes<T>> {
        extract_subnet(&self.space, &self.params, choice)
    }
}
