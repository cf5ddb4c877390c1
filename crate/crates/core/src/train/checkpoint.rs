//! Checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "VRNS" | u32 version | u64 header length | JSON header
//! u64 tensor count
//! per tensor: u32 name length | name | u8 dtype | u32 rank | u64 dims… | raw scalars
//! ```
//!
//! Optimizer moments are stored as tensors named `optim.m.<param>` and
//! `optim.v.<param>`. Random streams are derived from `(seed, step)`, so the
//! header's seed and step restore them.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{Schedule, TrainConfig};
use super::run::TrainState;
use super::optim::AdamW;
use crate::autodiff::{DType, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::model::{ArchConfig, ModelParams, VitRes};
use crate::search::SearchSpaceDef;
use crate::supernet::SuperNet;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"VRNS";
pub const CHECKPOINT_VERSION: u32 = 1;

const MOMENT_M: &str = "optim.m.";
const MOMENT_V: &str = "optim.v.";

/// What the parameter table describes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
#[allow(clippy::large_enum_variant)]
pub enum ModelSpec {
    Arch(ArchConfig),
    Supernet(SearchSpaceDef),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerHeader {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelSpec,
    pub dtype: DType,
    pub seed: u64,
    pub epoch: u64,
    pub step: u64,
    pub optimizer: Option<OptimizerHeader>,
    pub train_config: Option<TrainConfig>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ModelParams<f32>,
    pub optimizer: Option<AdamW>,
}

impl Checkpoint {
    /// Snapshot of a run after `state.step` steps.
    pub fn capture(model: ModelSpec, params: &ModelParams<f32>, state: &TrainState, cfg: &TrainConfig) -> Self {
        Checkpoint {
            header: CheckpointHeader {
                model,
                dtype: DType::F32,
                seed: cfg.seed,
                epoch: state.epoch(),
                step: state.step,
                optimizer: None,
                train_config: Some(cfg.clone()),
            },
            params: params.clone(),
            optimizer: Some(state.optimizer.clone()),
        }
    }

    /// Training state to continue from, under `schedule`.
    pub fn train_state(&self, schedule: Schedule) -> TrainState {
        TrainState { optimizer: self.optimizer.clone().unwrap_or_default(), step: self.header.step, schedule }
    }

    pub fn model(&self) -> Result<VitRes<f32>> {
        match &self.header.model {
            ModelSpec::Arch(cfg) => VitRes::from_parts(cfg.clone(), self.params.clone()),
            ModelSpec::Supernet(_) => Err(Error::contract("checkpoint holds a super-network, not a model")),
        }
    }

    pub fn supernet(&self) -> Result<SuperNet<f32>> {
        match &self.header.model {
            ModelSpec::Supernet(space) => SuperNet::from_parts(space.clone(), self.params.clone()),
            ModelSpec::Arch(_) => Err(Error::contract("checkpoint holds a model, not a super-network")),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = self.header.clone();
        header.dtype = DType::F32;
        header.optimizer = self.optimizer.as_ref().map(|o| OptimizerHeader { beta1: o.beta1, beta2: o.beta2, eps: o.eps, t: o.t });
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);

        let mut tensors: Vec<(String, &Tensor<f32>)> = self.params.iter().map(|(n, t)| (n.to_string(), t)).collect();
        if let Some(opt) = &self.optimizer {
            for (name, (m, v)) in &opt.moments {
                tensors.push((format!("{MOMENT_M}{name}"), m));
                tensors.push((format!("{MOMENT_V}{name}"), v));
            }
        }
        out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
        for (name, t) in tensors {
            write_tensor(&mut out, &name, t);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::Format { offset: 0, detail: "bad magic, not a checkpoint".into() });
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format { offset: 4, detail: format!("version {version}, expected {CHECKPOINT_VERSION}") });
        }
        let len = r.u64("header length")? as usize;
        let at = r.pos as u64;
        let header: CheckpointHeader = serde_json::from_slice(r.take(len, "header")?)
            .map_err(|e| Error::Format { offset: at, detail: format!("header: {e}") })?;
        if header.dtype != DType::F32 {
            return Err(Error::Format { offset: at, detail: format!("dtype {:?}, expected f32", header.dtype) });
        }
        let count = r.u64("tensor count")?;
        let mut params = ModelParams::new();
        let mut optimizer = header.optimizer.as_ref().map(|o| AdamW {
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            t: o.t,
            ..AdamW::default()
        });
        let mut pending_m = std::collections::HashMap::new();
        for _ in 0..count {
            let (name, t) = read_tensor::<f32>(&mut r)?;
            if let Some(p) = name.strip_prefix(MOMENT_M) {
                pending_m.insert(p.to_string(), t);
            } else if let Some(p) = name.strip_prefix(MOMENT_V) {
                let m = pending_m.remove(p).ok_or_else(|| Error::Format {
                    offset: r.pos as u64,
                    detail: format!("second moment of `{p}` before its first moment"),
                })?;
                let opt = optimizer.as_mut().ok_or_else(|| Error::Format {
                    offset: r.pos as u64,
                    detail: "optimizer tensors without optimizer header".into(),
                })?;
                opt.moments.insert(p.to_string(), (m, t));
            } else {
                params.insert(name, t)?;
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Format { offset: r.pos as u64, detail: "trailing bytes after tensor table".into() });
        }
        match &header.model {
            ModelSpec::Arch(cfg) => params.check_against(cfg)?,
            ModelSpec::Supernet(space) => params.check_against(&space.max_config())?,
        }
        Ok(Checkpoint { header, params, optimizer })
    }
}

fn write_tensor<T: Scalar>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(T::DTYPE.code());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Format {
            offset: self.pos as u64,
            detail: format!("truncated: {what} needs {n} bytes, {} left", self.bytes.len() - self.pos),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

fn read_tensor<T: Scalar>(r: &mut Reader<'_>) -> Result<(String, Tensor<T>)> {
    let start = r.pos as u64;
    let len = r.u32("name length")? as usize;
    let name = String::from_utf8(r.take(len, "name")?.to_vec())
        .map_err(|_| Error::Format { offset: start, detail: "tensor name is not utf-8".into() })?;
    let code = r.take(1, "dtype")?[0];
    if DType::from_code(code) != Some(T::DTYPE) {
        return Err(Error::Format { offset: start, detail: format!("tensor `{name}` has dtype code {code}") });
    }
    let rank = r.u32("rank")? as usize;
    let shape = (0..rank).map(|_| r.u64("dims").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::Format {
        offset: start,
        detail: format!("tensor `{name}` shape {shape:?} overflows"),
    })?;
    let size = T::DTYPE.size();
    let raw = r.take(numel.saturating_mul(size), "tensor data")?;
    let data = raw.chunks(size).map(T::read_le).collect();
    Ok((name, Tensor::new(shape, data)?))
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    std::fs::write(path, ck.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
