use indexmap::IndexMap;

use super::config::{ArchConfig, PATCH_SIZE, STAGES};
use crate::autodiff::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::{self, tag};

/// Initialisation scale of linear weights, position tables and the
/// classification token.
const LINEAR_INIT_STD: f64 = 0.02;

/// Tensor names used by the model. Blocks are numbered within their stage.
pub mod names {
    pub fn stage(s: usize, leaf: &str) -> String {
        format!("stages.{s}.{leaf}")
    }

    pub fn block(s: usize, b: usize, leaf: &str) -> String {
        format!("stages.{s}.blocks.{b}.{leaf}")
    }

    pub const CLS_TOKEN: &str = "cls_token";
    pub const PATCH_EMBED: &str = "patch_embed";
    pub const FINAL_NORM: &str = "norm";
    pub const HEAD: &str = "head";
    pub const TOKEN_HEAD: &str = "token_head";
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    /// `N(0, 0.02²)`.
    Linear,
    /// He-normal over `fan_in`.
    Conv { fan_in: usize },
    Zeros,
    Ones,
}

/// Every learnable tensor of a ViT-Res network with its initialiser, in a
/// fixed order.
fn layout(config: &ArchConfig) -> Vec<(String, Vec<usize>, Init)> {
    let mut out = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init| out.push((name, shape, init));
    let linear = |push: &mut dyn FnMut(String, Vec<usize>, Init), base: String, din: usize, dout: usize| {
        push(format!("{base}.weight"), vec![din, dout], Init::Linear);
        push(format!("{base}.bias"), vec![dout], Init::Zeros);
    };
    let norm = |push: &mut dyn FnMut(String, Vec<usize>, Init), base: String, d: usize| {
        push(format!("{base}.gamma"), vec![d], Init::Ones);
        push(format!("{base}.beta"), vec![d], Init::Zeros);
    };
    let conv = |push: &mut dyn FnMut(String, Vec<usize>, Init), base: String, cin: usize, cout: usize, k: usize| {
        push(format!("{base}.weight"), vec![cout, cin, k, k], Init::Conv { fan_in: cin * k * k });
        push(format!("{base}.bias"), vec![cout], Init::Zeros);
    };

    let c = config.stem_channels;
    let d = config.embed_dims();
    conv(&mut push, "stem.conv1".into(), 3, c, 3);
    conv(&mut push, "stem.conv2".into(), c, c, 3);
    conv(&mut push, "stem.conv3".into(), c, c, 3);
    conv(&mut push, names::PATCH_EMBED.into(), c, d[0], PATCH_SIZE);
    push(names::CLS_TOKEN.into(), vec![d[0]], Init::Linear);
    for s in 0..STAGES {
        if s > 0 {
            norm(&mut push, names::stage(s, "rsr.norm"), d[s - 1]);
            conv(&mut push, names::stage(s, "rsr.conv"), d[s - 1], d[s], 3);
            norm(&mut push, names::stage(s, "rsr.cls_norm"), d[s - 1]);
            linear(&mut push, names::stage(s, "rsr.cls_proj"), d[s - 1], d[s]);
        }
        push(names::stage(s, "pos_embed"), vec![config.seq_len(s), d[s]], Init::Linear);
        for (b, blk) in config.stages[s].blocks.iter().enumerate() {
            let a = blk.attn_dim();
            norm(&mut push, names::block(s, b, "norm1"), d[s]);
            linear(&mut push, names::block(s, b, "attn.q"), d[s], a);
            linear(&mut push, names::block(s, b, "attn.k"), d[s], a);
            linear(&mut push, names::block(s, b, "attn.v"), d[s], a);
            linear(&mut push, names::block(s, b, "attn.proj"), a, d[s]);
            norm(&mut push, names::block(s, b, "norm2"), d[s]);
            linear(&mut push, names::block(s, b, "mlp.fc1"), d[s], blk.hidden);
            linear(&mut push, names::block(s, b, "mlp.fc2"), blk.hidden, d[s]);
        }
    }
    norm(&mut push, names::FINAL_NORM.into(), d[2]);
    linear(&mut push, names::HEAD.into(), d[2], config.num_classes);
    linear(&mut push, names::TOKEN_HEAD.into(), d[2], config.num_classes);
    out
}

/// Expected `(name, shape)` of every tensor for `config`.
pub fn param_shapes(config: &ArchConfig) -> Vec<(String, Vec<usize>)> {
    layout(config).into_iter().map(|(n, s, _)| (n, s)).collect()
}

/// Named collection of every learnable tensor of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = f32> {
    tensors: IndexMap<String, Tensor<T>>,
}

/// Tape handles for a [`ModelParams`], by name.
#[derive(Clone, Debug)]
pub struct ParamVars {
    vars: IndexMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract(format!("parameter `{name}` is not attached")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

impl<T: Scalar> ModelParams<T> {
    pub fn new() -> Self {
        ModelParams { tensors: IndexMap::new() }
    }

    /// Fresh initialisation for `config`, deterministic in `seed`.
    pub fn init(config: &ArchConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, &[tag::INIT]);
        let mut tensors = IndexMap::new();
        for (name, shape, init) in layout(config) {
            let t = match init {
                Init::Linear => Tensor::randn(shape, LINEAR_INIT_STD, &mut rng),
                Init::Conv { fan_in } => Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), &mut rng),
                Init::Zeros => Tensor::zeros(shape),
                Init::Ones => Tensor::ones(shape),
            };
            tensors.insert(name, t);
        }
        Ok(ModelParams { tensors })
    }

    /// Checks names and shapes against `config`.
    pub fn check_against(&self, config: &ArchConfig) -> Result<()> {
        let expected = param_shapes(config);
        if expected.len() != self.tensors.len() {
            return Err(Error::contract(format!(
                "expected {} tensors for this architecture, found {}",
                expected.len(),
                self.tensors.len()
            )));
        }
        for (name, shape) in expected {
            let t = self.get(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::dim("model_params", format!("{name}: expected {shape:?}, found {:?}", t.shape())));
            }
        }
        Ok(())
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter `{name}`")));
        }
        self.tensors.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors.get(name).ok_or_else(|| Error::contract(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors.get_mut(name).ok_or_else(|| Error::contract(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    /// Records every tensor on `tape`; `trainable` decides whether they
    /// receive gradients.
    pub fn attach(&self, tape: &mut Tape<T>, trainable: bool) -> ParamVars {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let t = t.clone().with_requires_grad(trainable);
                let mut t = t;
                t.zero_grad();
                (k.clone(), tape.leaf(t))
            })
            .collect();
        ParamVars { vars }
    }

    /// Adds the gradients computed on `tape` into each tensor's buffer.
    pub fn accumulate_grads(&mut self, tape: &Tape<T>, vars: &ParamVars) -> Result<()> {
        for (name, var) in vars.iter() {
            if let Some(g) = tape.grad(var) {
                self.get_mut(name)?.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.tensors.values_mut().for_each(|t| t.zero_grad());
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(|t| t.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }
}

impl<T: Scalar> Default for ModelParams<T> {
    fn default() -> Self {
        Self::new()
    }
}
