use rand::Rng;

use super::config::{ArchConfig, PATCH_SIZE, STAGES, STEM_STRIDE};
use super::params::{names, ParamVars};
use crate::autodiff::{Scalar, Tape, Var, LN_EPS};
use crate::error::{Error, Result};
use crate::rng::StreamRng;

/// `[B, grid² + 1, d]` tokens with the classification token at index 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Var,
    pub grid: usize,
}

/// Per-example active widths of one block slot.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockMask {
    /// `false` turns the block into the identity for that example.
    pub keep: Vec<bool>,
    /// Active attention width, `heads · head_dim`.
    pub attn_width: Vec<usize>,
    pub hidden: Vec<usize>,
}

/// Per-example active prefix widths for every masked site of a network.
/// Every vector is indexed by example.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ForwardMasks {
    pub embed: [Vec<usize>; STAGES],
    pub blocks: [Vec<BlockMask>; STAGES],
}

impl ForwardMasks {
    pub fn validate(&self, config: &ArchConfig, batch: usize) -> Result<()> {
        let check = |what: &str, v: &[usize], max: usize| -> Result<()> {
            if v.len() != batch {
                return Err(Error::dim("masks", format!("{what}: {} entries for batch {batch}", v.len())));
            }
            if let Some(w) = v.iter().find(|&&w| w == 0 || w > max) {
                return Err(Error::contract(format!("{what}: active width {w} outside 1..={max}")));
            }
            Ok(())
        };
        for s in 0..STAGES {
            let stage = &config.stages[s];
            check(&format!("stage {s} embed"), &self.embed[s], stage.embed_dim)?;
            if self.blocks[s].len() != stage.blocks.len() {
                return Err(Error::dim(
                    "masks",
                    format!("stage {s}: {} block masks for {} blocks", self.blocks[s].len(), stage.blocks.len()),
                ));
            }
            for (b, (m, cfg)) in self.blocks[s].iter().zip(&stage.blocks).enumerate() {
                if m.keep.len() != batch {
                    return Err(Error::dim("masks", format!("stage {s} block {b}: keep flags for batch {batch}")));
                }
                check(&format!("stage {s} block {b} attention"), &m.attn_width, cfg.attn_dim())?;
                check(&format!("stage {s} block {b} hidden"), &m.hidden, cfg.hidden)?;
                if let Some(w) = m.attn_width.iter().find(|&&w| w % cfg.head_dim != 0) {
                    return Err(Error::contract(format!(
                        "stage {s} block {b}: attention width {w} is not a whole number of {}-wide heads",
                        cfg.head_dim
                    )));
                }
            }
        }
        Ok(())
    }
}

pub struct ForwardOptions<'a> {
    pub training: bool,
    /// Per-branch drop probability, applied only in training.
    pub drop_path_rate: f64,
    /// Source of drop-path draws; required when training with a positive rate.
    pub rng: Option<&'a mut StreamRng>,
    pub masks: Option<&'a ForwardMasks>,
    /// Keep every attention probability tensor in [`ForwardOutput::attention`].
    pub record_attention: bool,
}

impl<'a> ForwardOptions<'a> {
    pub fn eval() -> Self {
        ForwardOptions { training: false, drop_path_rate: 0.0, rng: None, masks: None, record_attention: false }
    }

    pub fn train(drop_path_rate: f64, rng: &'a mut StreamRng) -> Self {
        ForwardOptions { training: true, drop_path_rate, rng: Some(rng), masks: None, record_attention: false }
    }

    pub fn with_masks(mut self, masks: &'a ForwardMasks) -> Self {
        self.masks = Some(masks);
        self
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[B, classes]`.
    pub cls_logits: Var,
    /// `[B, K, classes]` over the last-stage patch tokens.
    pub token_logits: Var,
    /// `[B, heads, T, T]` per block in execution order, when recorded.
    pub attention: Vec<Var>,
}

/// One forward pass of a ViT-Res network on a tape.
pub struct Forward<'a, T: Scalar> {
    tape: &'a mut Tape<T>,
    config: &'a ArchConfig,
    vars: &'a ParamVars,
    opts: ForwardOptions<'a>,
    attention: Vec<Var>,
}

impl<'a, T: Scalar> Forward<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, config: &'a ArchConfig, vars: &'a ParamVars, opts: ForwardOptions<'a>) -> Result<Self> {
        if !(0.0..1.0).contains(&opts.drop_path_rate) {
            return Err(Error::contract(format!("drop path rate {} outside [0, 1)", opts.drop_path_rate)));
        }
        if opts.training && opts.drop_path_rate > 0.0 && opts.rng.is_none() {
            return Err(Error::contract("drop path in training needs an rng"));
        }
        Ok(Forward { tape, config, vars, opts, attention: Vec::new() })
    }

    pub fn tape(&mut self) -> &mut Tape<T> {
        self.tape
    }

    fn p(&self, name: &str) -> Result<Var> {
        self.vars.get(name)
    }

    fn embed_mask(&self, stage: usize) -> Option<&'a [usize]> {
        self.opts.masks.map(|m| m.embed[stage].as_slice())
    }

    fn block_mask(&self, stage: usize, block: usize) -> Option<&'a BlockMask> {
        self.opts.masks.map(|m| &m.blocks[stage][block])
    }

    fn mask(&mut self, x: Var, widths: Option<&[usize]>) -> Result<Var> {
        match widths {
            Some(w) => self.tape.mask_channels(x, w),
            None => Ok(x),
        }
    }

    fn norm(&mut self, x: Var, base: &str, widths: Option<&[usize]>) -> Result<Var> {
        let g = self.p(&format!("{base}.gamma"))?;
        let b = self.p(&format!("{base}.beta"))?;
        match widths {
            Some(w) => self.tape.masked_layer_norm(x, w, g, b, LN_EPS),
            None => self.tape.layer_norm(x, g, b, LN_EPS),
        }
    }

    fn linear(&mut self, x: Var, base: &str) -> Result<Var> {
        let w = self.p(&format!("{base}.weight"))?;
        let b = self.p(&format!("{base}.bias"))?;
        self.tape.linear(x, w, Some(b))
    }

    fn conv(&mut self, x: Var, base: &str, stride: usize, pad: usize) -> Result<Var> {
        let w = self.p(&format!("{base}.weight"))?;
        let b = self.p(&format!("{base}.bias"))?;
        self.tape.conv2d(x, w, Some(b), stride, pad)
    }

    /// Conv stem with a skip from the first to the third layer, 7x7 patch
    /// embedding, classification token and stage-1 position embeddings.
    pub fn stem_tokenize(&mut self, images: Var) -> Result<TokenSequence> {
        let shape = self.tape.shape(images).to_vec();
        let r = self.config.input_resolution;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != r || shape[3] != r {
            return Err(Error::dim("stem_tokenize", format!("expected [B, 3, {r}, {r}], got {shape:?}")));
        }
        let batch = shape[0];
        if let Some(m) = self.opts.masks {
            m.validate(self.config, batch)?;
        }
        let y1 = self.conv(images, "stem.conv1", STEM_STRIDE, 1)?;
        let y1 = self.tape.gelu(y1)?;
        let y2 = self.conv(y1, "stem.conv2", 1, 1)?;
        let y2 = self.tape.gelu(y2)?;
        let y3 = self.conv(y2, "stem.conv3", 1, 1)?;
        let y3 = self.tape.gelu(y3)?;
        let stem = self.tape.add(y1, y3)?;
        let grid = self.conv(stem, names::PATCH_EMBED, PATCH_SIZE, 0)?;
        let g = self.tape.shape(grid)[2];
        let patches = self.tape.grid_to_seq(grid)?;
        let widths = self.embed_mask(0);
        let patches = self.mask(patches, widths)?;

        let d = self.config.stages[0].embed_dim;
        let zeros = self.tape.constant(crate::autodiff::Tensor::zeros([batch, 1, d]));
        let cls_token = self.p(names::CLS_TOKEN)?;
        let cls = self.tape.add(zeros, cls_token)?;
        let tokens = self.tape.concat(&[cls, patches], 1)?;
        let pos = self.p(&names::stage(0, "pos_embed"))?;
        let tokens = self.tape.add(tokens, pos)?;
        let tokens = self.mask(tokens, widths)?;
        Ok(TokenSequence { tokens, grid: g })
    }

    /// Multi-head self-attention over all tokens; `x` is already normalized.
    pub fn mhsa(&mut self, x: Var, stage: usize, block: usize) -> Result<Var> {
        let cfg = *self.config.stages[stage].blocks.get(block).ok_or_else(|| {
            Error::dim("mhsa_forward", format!("stage {stage} has no block {block}"))
        })?;
        let shape = self.tape.shape(x).to_vec();
        let d = self.config.stages[stage].embed_dim;
        if shape.len() != 3 || shape[2] != d {
            return Err(Error::dim("mhsa_forward", format!("expected [B, T, {d}], got {shape:?}")));
        }
        let (batch, t) = (shape[0], shape[1]);
        let (h, hd) = (cfg.heads, cfg.head_dim);
        let attn_w = self.block_mask(stage, block).map(|m| m.attn_width.as_slice());
        let base = |leaf: &str| names::block(stage, block, leaf);

        let mut heads = Vec::with_capacity(3);
        for leaf in ["attn.q", "attn.k", "attn.v"] {
            let y = self.linear(x, &base(leaf))?;
            let y = self.mask(y, attn_w)?;
            heads.push(self.tape.reshape(y, &[batch, t, h, hd])?);
        }
        let q = self.tape.permute(heads[0], &[0, 2, 1, 3])?;
        let kt = self.tape.permute(heads[1], &[0, 2, 3, 1])?;
        let v = self.tape.permute(heads[2], &[0, 2, 1, 3])?;
        let scores = self.tape.matmul(q, kt)?;
        let scores = self.tape.scale(scores, T::one() / T::lit(hd as f64).sqrt())?;
        let probs = self.tape.softmax_rows(scores)?;
        if self.opts.record_attention {
            self.attention.push(probs);
        }
        let ctx = self.tape.matmul(probs, v)?;
        let ctx = self.tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = self.tape.reshape(ctx, &[batch, t, h * hd])?;
        let out = self.linear(ctx, &base("attn.proj"))?;
        let widths = self.embed_mask(stage);
        self.mask(out, widths)
    }

    /// Position-wise `d → hidden → d` MLP with GeLU.
    pub fn ffn(&mut self, x: Var, stage: usize, block: usize) -> Result<Var> {
        let d = self.config.stages[stage].embed_dim;
        if self.tape.shape(x).last() != Some(&d) {
            return Err(Error::dim("ffn_forward", format!("expected width {d}, got {:?}", self.tape.shape(x))));
        }
        let hidden_w = self.block_mask(stage, block).map(|m| m.hidden.as_slice());
        let h = self.linear(x, &names::block(stage, block, "mlp.fc1"))?;
        let h = self.mask(h, hidden_w)?;
        let h = self.tape.gelu(h)?;
        let out = self.linear(h, &names::block(stage, block, "mlp.fc2"))?;
        let widths = self.embed_mask(stage);
        self.mask(out, widths)
    }

    /// Per-example multipliers of one residual branch: the block keep flag
    /// times an inverted drop-path draw. `None` when all are one.
    fn branch_factors(&mut self, batch: usize, keep: Option<&[bool]>) -> Option<Vec<T>> {
        let mut f = vec![T::one(); batch];
        let mut trivial = true;
        if let Some(keep) = keep {
            for (fi, &k) in f.iter_mut().zip(keep) {
                if !k {
                    *fi = T::zero();
                    trivial = false;
                }
            }
        }
        let rate = self.opts.drop_path_rate;
        if self.opts.training && rate > 0.0 {
            let rng = self.opts.rng.as_mut().expect("checked in Forward::new");
            let survive = T::lit(1.0 / (1.0 - rate));
            for fi in f.iter_mut() {
                let dropped = rng.random::<f64>() < rate;
                *fi *= if dropped { T::zero() } else { survive };
            }
            trivial = false;
        }
        (!trivial).then_some(f)
    }

    fn residual(&mut self, x: Var, branch: Var, factors: Option<Vec<T>>) -> Result<Var> {
        let branch = match factors {
            Some(f) => self.tape.scale_examples(branch, &f)?,
            None => branch,
        };
        self.tape.add(x, branch)
    }

    /// Pre-norm transformer block with drop path on both branches.
    pub fn block(&mut self, seq: TokenSequence, stage: usize, block: usize) -> Result<TokenSequence> {
        let batch = self.tape.shape(seq.tokens)[0];
        let widths = self.embed_mask(stage);
        let keep = self.block_mask(stage, block).map(|m| m.keep.as_slice());

        let n1 = self.norm(seq.tokens, &names::block(stage, block, "norm1"), widths)?;
        let a = self.mhsa(n1, stage, block)?;
        let f = self.branch_factors(batch, keep);
        let x = self.residual(seq.tokens, a, f)?;

        let n2 = self.norm(x, &names::block(stage, block, "norm2"), widths)?;
        let m = self.ffn(n2, stage, block)?;
        let f = self.branch_factors(batch, keep);
        let x = self.residual(x, m, f)?;
        Ok(TokenSequence { tokens: x, grid: seq.grid })
    }

    /// Residual spatial reduction into `stage` (1 or 2): halves the grid and
    /// widens tokens to the stage's embedding dimension.
    pub fn rsr(&mut self, seq: TokenSequence, stage: usize) -> Result<TokenSequence> {
        let residual = self.rsr_residual_branch(seq, stage)?;
        let main = self.rsr_main_branch(seq, self.config.stages[stage].embed_dim)?;
        let tokens = self.tape.add(main, residual)?;
        Ok(TokenSequence { tokens, grid: seq.grid / 2 })
    }

    /// Learned path of the reduction: norm and strided 3x3 conv on the
    /// patches, norm and linear on cls, then the new position embeddings.
    pub fn rsr_residual_branch(&mut self, seq: TokenSequence, stage: usize) -> Result<Var> {
        if stage == 0 || stage >= STAGES {
            return Err(Error::dim("rsr_forward", format!("no reduction into stage {stage}")));
        }
        if !seq.grid.is_multiple_of(2) {
            return Err(Error::dim("rsr_forward", format!("grid side {} is odd", seq.grid)));
        }
        let n = seq.grid * seq.grid;
        let prev_w = self.embed_mask(stage - 1);
        let new_w = self.embed_mask(stage);
        let cls = self.tape.narrow(seq.tokens, 1, 0, 1)?;
        let patches = self.tape.narrow(seq.tokens, 1, 1, n)?;

        let r = self.norm(patches, &names::stage(stage, "rsr.norm"), prev_w)?;
        let r = self.tape.seq_to_grid(r)?;
        let r = self.conv(r, &names::stage(stage, "rsr.conv"), 2, 1)?;
        let r = self.tape.grid_to_seq(r)?;
        let r = self.mask(r, new_w)?;
        let rc = self.norm(cls, &names::stage(stage, "rsr.cls_norm"), prev_w)?;
        let rc = self.linear(rc, &names::stage(stage, "rsr.cls_proj"))?;
        let rc = self.mask(rc, new_w)?;
        let residual = self.tape.concat(&[rc, r], 1)?;
        let pos = self.p(&names::stage(stage, "pos_embed"))?;
        let residual = self.tape.add(residual, pos)?;
        self.mask(residual, new_w)
    }

    /// Parameter-free path of the reduction: 2x2 average pooling of the
    /// patches, then zero channels up to `d_new`; cls is only padded.
    pub fn rsr_main_branch(&mut self, seq: TokenSequence, d_new: usize) -> Result<Var> {
        if !seq.grid.is_multiple_of(2) {
            return Err(Error::dim("rsr_forward", format!("grid side {} is odd", seq.grid)));
        }
        let n = seq.grid * seq.grid;
        let cls = self.tape.narrow(seq.tokens, 1, 0, 1)?;
        let patches = self.tape.narrow(seq.tokens, 1, 1, n)?;
        let g = self.tape.seq_to_grid(patches)?;
        let g = self.tape.avg_pool2d(g, 2, 2)?;
        let pooled = self.tape.grid_to_seq(g)?;
        let pooled = self.tape.zero_pad_channels(pooled, d_new)?;
        let cls = self.tape.zero_pad_channels(cls, d_new)?;
        self.tape.concat(&[cls, pooled], 1)
    }

    /// Final norm, classification head on the cls token and token-label
    /// head on the last-stage patches.
    pub fn heads(&mut self, seq: TokenSequence) -> Result<(Var, Var)> {
        let widths = self.embed_mask(STAGES - 1);
        let x = self.norm(seq.tokens, names::FINAL_NORM, widths)?;
        let batch = self.tape.shape(x)[0];
        let d = self.tape.shape(x)[2];
        let cls = self.tape.narrow(x, 1, 0, 1)?;
        let cls = self.tape.reshape(cls, &[batch, d])?;
        let cls_logits = self.linear(cls, names::HEAD)?;
        let patches = self.tape.narrow(x, 1, 1, seq.grid * seq.grid)?;
        let token_logits = self.linear(patches, names::TOKEN_HEAD)?;
        Ok((cls_logits, token_logits))
    }

    pub fn run(mut self, images: Var) -> Result<ForwardOutput> {
        let mut seq = self.stem_tokenize(images)?;
        for s in 0..STAGES {
            if s > 0 {
                seq = self.rsr(seq, s)?;
            }
            for b in 0..self.config.stages[s].blocks.len() {
                seq = self.block(seq, s, b)?;
            }
        }
        let (cls_logits, token_logits) = self.heads(seq)?;
        Ok(ForwardOutput { cls_logits, token_logits, attention: self.attention })
    }
}

/// Full network: stem, three stages joined by reductions, final norm and
/// both heads.
pub fn model_forward<T: Scalar>(
    tape: &mut Tape<T>,
    config: &ArchConfig,
    vars: &ParamVars,
    images: Var,
    opts: ForwardOptions<'_>,
) -> Result<ForwardOutput> {
    Forward::new(tape, config, vars, opts)?.run(images)
}
