use rayon::prelude::*;

use super::config::{Schedule, TrainConfig};
use super::loss::{token_label_loss, LossVars};
use super::metrics::{MetricsLog, StepRecord};
use super::optim::{clip_grad_norm, lr_schedule, AdamW};
use crate::autodiff::{Tape, Tensor};
use crate::data::{build_batch, epoch_order, Dataset, LabeledBatch, Sample};
use crate::error::{Error, Result};
use crate::model::{model_forward, ForwardOptions, ModelParams, ParamVars, VitRes};
use crate::rng::{self, tag};
use crate::search::{decode, ArchGene, Evaluator, SearchSpaceDef};
use crate::supernet::{sample_choice, supernet_forward_multi, warmup_bounds, Bounds, SubNetChoice, SuperNet};

/// Everything besides the weights that a resumed run needs.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub optimizer: AdamW,
    /// Steps completed.
    pub step: u64,
    pub schedule: Schedule,
}

impl TrainState {
    pub fn new(schedule: Schedule) -> Self {
        TrainState { optimizer: AdamW::default(), step: 0, schedule }
    }

    pub fn epoch(&self) -> u64 {
        self.schedule.epoch_of(self.step)
    }

    pub fn lr(&self, cfg: &TrainConfig) -> f64 {
        lr_schedule(self.step, self.schedule.total_steps, cfg.base_lr, self.schedule.warmup_steps)
    }
}

/// Backward, clipping, optimizer update, gradient reset.
fn apply_loss(
    params: &mut ModelParams<f32>,
    tape: &mut Tape<f32>,
    vars: &ParamVars,
    loss: LossVars,
    cfg: &TrainConfig,
    state: &mut TrainState,
) -> Result<StepRecord> {
    let value = tape.data(loss.total)[0] as f64;
    if !value.is_finite() {
        return Err(Error::Diverged { step: state.step, loss: value });
    }
    let record = StepRecord {
        step: state.step,
        epoch: state.epoch(),
        loss: value,
        cls_loss: tape.data(loss.cls)[0] as f64,
        token_loss: loss.token.map(|t| tape.data(t)[0] as f64),
        lr: state.lr(cfg),
    };
    tape.backward(loss.total)?;
    params.accumulate_grads(tape, vars)?;
    if let Some(max) = cfg.clip_grad_norm {
        clip_grad_norm(params, max);
    }
    state.optimizer.step(params, record.lr, cfg.weight_decay)?;
    params.zero_grads();
    if !params.is_finite() {
        return Err(Error::Diverged { step: state.step, loss: f64::NAN });
    }
    state.step += 1;
    Ok(record)
}

/// One optimisation step of a standalone network.
pub fn train_step(model: &mut VitRes<f32>, batch: &LabeledBatch, cfg: &TrainConfig, state: &mut TrainState) -> Result<StepRecord> {
    let mut tape = Tape::new();
    let vars = model.params.attach(&mut tape, true);
    let x = tape.constant(batch.images.clone());
    let mut drop_rng = rng::stream(cfg.seed, &[tag::DROP_PATH, state.step]);
    let out = model_forward(&mut tape, &model.config, &vars, x, ForwardOptions::train(cfg.drop_path_rate, &mut drop_rng))?;
    let loss = token_label_loss(&mut tape, out.cls_logits, out.token_logits, batch, cfg.token_loss)?;
    apply_loss(&mut model.params, &mut tape, &vars, loss, cfg, state)
}

/// Sampling bounds of a super-network step at `epoch_fraction`.
pub fn supernet_bounds(space: &SearchSpaceDef, cfg: &TrainConfig, epoch_fraction: f64) -> Bounds {
    warmup_bounds(cfg.arch_warmup_progress(epoch_fraction), space)
}

/// The `n_a` sub-networks a super-network step trains.
pub fn sample_step_choices(
    space: &SearchSpaceDef,
    cfg: &TrainConfig,
    step: u64,
    epoch_fraction: f64,
    n_a: usize,
) -> Result<Vec<SubNetChoice>> {
    let bounds = supernet_bounds(space, cfg, epoch_fraction);
    let mut r = rng::stream(cfg.seed, &[tag::ARCH_SAMPLE, step]);
    (0..n_a).map(|_| sample_choice(space, &mut r, &bounds)).collect()
}

fn supernet_step_with(
    net: &mut SuperNet<f32>,
    batch: &LabeledBatch,
    cfg: &TrainConfig,
    state: &mut TrainState,
    epoch_fraction: f64,
    n_a: usize,
) -> Result<StepRecord> {
    let choices = sample_step_choices(&net.space, cfg, state.step, epoch_fraction, n_a)?;
    let mut tape = Tape::new();
    let vars = net.params.attach(&mut tape, true);
    let x = tape.constant(batch.images.clone());
    let mut drop_rng = rng::stream(cfg.seed, &[tag::DROP_PATH, state.step]);
    let opts = ForwardOptions::train(cfg.drop_path_rate, &mut drop_rng);
    let out = supernet_forward_multi(&mut tape, &net.space, &vars, x, &choices, opts)?;
    let loss = token_label_loss(&mut tape, out.cls_logits, out.token_logits, batch, cfg.token_loss)?;
    apply_loss(&mut net.params, &mut tape, &vars, loss, cfg, state)
}

/// One step training `cfg.n_a` sampled sub-networks, each on its own
/// contiguous sub-batch, with a single backward pass.
pub fn supernet_train_step(
    net: &mut SuperNet<f32>,
    batch: &LabeledBatch,
    cfg: &TrainConfig,
    state: &mut TrainState,
    epoch_fraction: f64,
) -> Result<StepRecord> {
    supernet_step_with(net, batch, cfg, state, epoch_fraction, cfg.n_a)
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Samples correctly classified given row-major `[n, classes]` logits.
/// Ties go to the lowest class index.
pub fn count_correct(logits: &[f32], classes: usize, labels: &[usize]) -> usize {
    logits
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &label)| {
            let best = row.iter().enumerate().fold(0, |b, (i, &v)| if v > row[b] { i } else { b });
            best == label
        })
        .count()
}

/// Top-1 accuracy in evaluation mode. Batches are independent, so the
/// result does not depend on `batch_size`.
pub fn evaluate_top1(model: &VitRes<f32>, samples: &[Sample], batch_size: usize) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::contract("evaluation needs at least one sample"));
    }
    let classes = model.config.num_classes;
    let chunks: Vec<&[Sample]> = samples.chunks(batch_size.max(1)).collect();
    let correct = chunks
        .into_par_iter()
        .map(|chunk| {
            let (h, w) = (chunk[0].image.shape()[1], chunk[0].image.shape()[2]);
            let data = chunk.iter().flat_map(|s| s.image.data().iter().copied()).collect();
            let (cls, _) = model.infer(&Tensor::new([chunk.len(), 3, h, w], data)?)?;
            let labels: Vec<usize> = chunk.iter().map(|s| s.label).collect();
            Ok(count_correct(cls.data(), classes, &labels))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(correct as f64 / samples.len() as f64)
}

/// Fitness of a gene: top-1 of the extracted sub-network on held-out data.
pub struct SupernetEvaluator<'a> {
    pub net: &'a SuperNet<f32>,
    pub samples: &'a [Sample],
    pub batch_size: usize,
}

impl Evaluator for SupernetEvaluator<'_> {
    fn evaluate(&self, gene: &ArchGene) -> Result<f64> {
        let choice = decode(&self.net.space, gene)?;
        evaluate_top1(&self.net.extract(&choice)?, self.samples, self.batch_size)
    }
}

/// Callbacks at epoch boundaries.
pub trait Hooks<M> {
    fn epoch_start(&mut self, _epoch: u64, _state: &TrainState) -> Result<()> {
        Ok(())
    }

    fn epoch_end(&mut self, _epoch: u64, _model: &M, _state: &TrainState, _log: &MetricsLog) -> Result<()> {
        Ok(())
    }
}

impl<M> Hooks<M> for () {}

/// Shared epoch loop: seeded shuffle per epoch, short trailing batch,
/// evaluation every `eval_every` epochs. Stops after `total_steps` or at
/// `stop_at`, whichever comes first; resuming continues from `state.step`.
#[allow(clippy::too_many_arguments)]
fn run_loop<M>(
    model: &mut M,
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
    state: &mut TrainState,
    log: &mut MetricsLog,
    hooks: &mut dyn Hooks<M>,
    stop_at: Option<u64>,
    patches: usize,
    mut step: impl FnMut(&mut M, &LabeledBatch, &mut TrainState, usize) -> Result<StepRecord>,
    eval: impl Fn(&M, &[Sample]) -> Result<f64>,
) -> Result<()> {
    if train.is_empty() {
        return Err(Error::contract("training needs at least one sample"));
    }
    let sched = state.schedule;
    let end = stop_at.map_or(sched.total_steps, |s| s.min(sched.total_steps));
    let mut order: Option<(u64, Vec<usize>)> = None;
    while state.step < end {
        let epoch = sched.epoch_of(state.step);
        let b = (state.step % sched.steps_per_epoch) as usize;
        if b == 0 {
            hooks.epoch_start(epoch, state)?;
        }
        if order.as_ref().is_none_or(|(e, _)| *e != epoch) {
            order = Some((epoch, epoch_order(train.len(), cfg.seed, epoch)));
        }
        let idx = &order.as_ref().unwrap().1;
        let lo = b * cfg.batch_size;
        let chunk = &idx[lo..(lo + cfg.batch_size).min(idx.len())];
        let batch = build_batch(&train.samples, chunk, &cfg.aug, patches, train.num_classes, cfg.seed, epoch)?;
        let record = step(model, &batch, state, chunk.len())?;
        log.push_step(&record)?;
        let epoch_done = state.step.is_multiple_of(sched.steps_per_epoch) || state.step == sched.total_steps;
        if epoch_done {
            if let Some(v) = val.filter(|v| !v.is_empty() && cfg.eval_every > 0 && (epoch + 1).is_multiple_of(cfg.eval_every)) {
                log.push_eval(state.step, epoch, eval(model, &v.samples)?)?;
            }
            hooks.epoch_end(epoch, model, state, log)?;
        }
    }
    Ok(())
}

fn check_data(train: &Dataset, resolution: usize, classes: usize) -> Result<()> {
    if train.height != resolution || train.width != resolution {
        return Err(Error::contract(format!(
            "dataset is {}x{}, network expects {resolution}x{resolution}",
            train.height, train.width
        )));
    }
    if train.num_classes != classes {
        return Err(Error::contract(format!("dataset has {} classes, network {classes}", train.num_classes)));
    }
    Ok(())
}

/// Trains a standalone network.
#[allow(clippy::too_many_arguments)]
pub fn fit(
    model: &mut VitRes<f32>,
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
    state: &mut TrainState,
    log: &mut MetricsLog,
    hooks: &mut dyn Hooks<VitRes<f32>>,
    stop_at: Option<u64>,
) -> Result<()> {
    cfg.validate()?;
    check_data(train, model.config.input_resolution, model.config.num_classes)?;
    let k = model.config.token_label_patches();
    let eval_bs = cfg.eval_batch_size;
    run_loop(
        model,
        train,
        val,
        cfg,
        state,
        log,
        hooks,
        stop_at,
        k,
        |m, batch, st, _| train_step(m, batch, cfg, st),
        |m, samples| evaluate_top1(m, samples, eval_bs),
    )
}

/// Trains a super-network with multi-architecture sampling. A short final
/// batch runs `gcd(n_a, len)` sub-networks. Evaluation reports the largest
/// sub-network.
#[allow(clippy::too_many_arguments)]
pub fn fit_supernet(
    net: &mut SuperNet<f32>,
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
    state: &mut TrainState,
    log: &mut MetricsLog,
    hooks: &mut dyn Hooks<SuperNet<f32>>,
    stop_at: Option<u64>,
) -> Result<()> {
    cfg.validate_supernet()?;
    check_data(train, net.space.input_resolution, net.space.num_classes)?;
    let k = net.space.max_config().token_label_patches();
    let eval_bs = cfg.eval_batch_size;
    run_loop(
        net,
        train,
        val,
        cfg,
        state,
        log,
        hooks,
        stop_at,
        k,
        |n, batch, st, len| {
            let fraction = st.schedule.fraction(st.step);
            supernet_step_with(n, batch, cfg, st, fraction, gcd(cfg.n_a, len))
        },
        |n, samples| evaluate_top1(&n.extract(&SubNetChoice::maximal(&n.space))?, samples, eval_bs),
    )
}
