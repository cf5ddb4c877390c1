use std::path::Path;

use serde_json::{json, Value};

use resnas::data::{read_dataset, subtrain_subval_split, write_dataset, Dataset, SyntheticSpec};
use resnas::model::{ArchConfig, VitRes, INPUT_REDUCTION, STAGES};
use resnas::search::{
    count_params, decode, estimate_macs, evolve_step, init_population, ArchGene, Evaluator, Population, SearchSpaceDef,
    SeparableFitness,
};
use resnas::supernet::{Bounds, SubNetChoice, SuperNet};
use resnas::train::{
    evaluate_top1, fit, fit_supernet, load_checkpoint, save_checkpoint, supernet_bounds, Checkpoint, Hooks,
    MetricsLog, ModelSpec, SupernetEvaluator, TrainConfig, TrainState,
};

use crate::config::{env_seed, read_json, resolve, SearchRun, SupernetRun, TrainRun};
use crate::rundir::{RunDir, CHECKPOINT_FILE, METRICS_FILE};
use crate::{CliError, CostArgs, EvalArgs, GenDataArgs, SearchArgs, TrainArgs};

const WARMUP_FILE: &str = "warmup.csv";
const POPULATION_FILE: &str = "population.json";
const BEST_FILE: &str = "best_gene.json";
const BEST_ARCH_FILE: &str = "best_arch.json";

pub fn gen_data(a: GenDataArgs) -> Result<(), CliError> {
    if a.size == 0 || !a.size.is_multiple_of(INPUT_REDUCTION) {
        return Err(CliError::config(format!(
            "--size {} must be a positive multiple of {INPUT_REDUCTION} (stem stride times patch size)",
            a.size
        )));
    }
    let seed = a.seed.or(env_seed()?).unwrap_or(0);
    let spec = SyntheticSpec { num_classes: a.classes, count: a.classes * a.count, size: a.size, seed };
    let data = spec.generate()?;
    write_dataset(&a.out, &data)?;
    println!("wrote {} samples ({} classes, {}x{}) to {}", data.len(), a.classes, a.size, a.size, a.out.display());
    Ok(())
}

fn split(data: Dataset, per_class: usize, seed: u64) -> Result<(Dataset, Option<Dataset>), CliError> {
    if per_class == 0 {
        return Ok((data, None));
    }
    let (train, val) = subtrain_subval_split(&data.samples, per_class, seed)?;
    Ok((data.with_samples(train), Some(data.with_samples(val))))
}

/// Loads the run directory's checkpoint when resuming.
fn resume_from(dir: &RunDir, resume: bool, cfg: &TrainConfig) -> Result<Option<(Checkpoint, MetricsLog)>, CliError> {
    let path = dir.file(CHECKPOINT_FILE);
    if !resume || !path.exists() {
        return Ok(None);
    }
    let ck = load_checkpoint(&path)?;
    if ck.header.train_config.as_ref() != Some(cfg) {
        return Err(CliError::config("the checkpoint was trained with a different configuration"));
    }
    let metrics = dir.file(METRICS_FILE);
    let log = if metrics.exists() { MetricsLog::load(&metrics)? } else { MetricsLog::new() };
    Ok(Some((ck, log)))
}

/// Writes the checkpoint and metrics at every epoch end; logs sampling
/// bounds at every epoch start of super-network runs.
struct Saver<'a> {
    dir: &'a RunDir,
    cfg: &'a TrainConfig,
    space: Option<&'a SearchSpaceDef>,
}

impl Saver<'_> {
    fn save(&self, spec: ModelSpec, params: &resnas::model::ModelParams<f32>, state: &TrainState, log: &MetricsLog) -> resnas::Result<()> {
        save_checkpoint(&self.dir.file(CHECKPOINT_FILE), &Checkpoint::capture(spec, params, state, self.cfg))?;
        log.save(&self.dir.file(METRICS_FILE))
    }
}

fn report(epoch: u64, state: &TrainState, log: &MetricsLog) {
    let last = log.records().iter().rev().find(|r| r.kind == "step").and_then(|r| r.loss);
    let top1 = log.records().last().filter(|r| r.kind == "eval").and_then(|r| r.top1);
    let top1 = top1.map(|t| format!(", top-1 {t:.4}")).unwrap_or_default();
    eprintln!("epoch {epoch} done at step {}: loss {:.4}{top1}", state.step, last.unwrap_or(f64::NAN));
}

impl Hooks<VitRes<f32>> for Saver<'_> {
    fn epoch_end(&mut self, epoch: u64, model: &VitRes<f32>, state: &TrainState, log: &MetricsLog) -> resnas::Result<()> {
        report(epoch, state, log);
        self.save(ModelSpec::Arch(model.config.clone()), &model.params, state, log)
    }
}

fn bounds_summary(b: &Bounds) -> String {
    b.allowed.iter().map(usize::to_string).collect::<Vec<_>>().join(";")
}

impl Hooks<SuperNet<f32>> for Saver<'_> {
    fn epoch_start(&mut self, epoch: u64, state: &TrainState) -> resnas::Result<()> {
        let space = self.space.expect("super-network runs carry their space");
        let fraction = state.schedule.fraction(state.step);
        let b = supernet_bounds(space, self.cfg, fraction);
        let full = b == Bounds::full(space);
        eprintln!("epoch {epoch}: sampling {} space", if full { "the full" } else { "a warmup-limited" });
        self.dir
            .append_line(
                WARMUP_FILE,
                "epoch,step,fraction,full_space,allowed",
                &format!("{epoch},{},{fraction},{full},{}", state.step, bounds_summary(&b)),
            )
            .map_err(|e| resnas::Error::Contract(format!("{e:?}")))
    }

    fn epoch_end(&mut self, epoch: u64, net: &SuperNet<f32>, state: &TrainState, log: &MetricsLog) -> resnas::Result<()> {
        report(epoch, state, log);
        self.save(ModelSpec::Supernet(net.space.clone()), &net.params, state, log)
    }
}

fn seeded(cfg: &mut TrainConfig) -> Result<u64, CliError> {
    if let Some(s) = env_seed()? {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg.seed)
}

pub fn train(a: TrainArgs) -> Result<(), CliError> {
    let mut run: TrainRun = resolve(read_json(&a.config)?, &a.set)?;
    let seed = seeded(&mut run.train)?;
    let arch = run.arch.resolve()?;
    arch.validate()?;
    let (train, val) = split(read_dataset(&a.data)?, run.val_per_class, seed)?;
    let dir = RunDir::create(&a.out, &run, seed)?;
    let schedule = run.train.schedule(train.len());
    let (mut model, mut state, mut log) = match resume_from(&dir, a.resume, &run.train)? {
        Some((ck, log)) => (ck.model()?, ck.train_state(schedule), log),
        None => (VitRes::init(arch, seed)?, TrainState::new(schedule), MetricsLog::new()),
    };
    eprintln!("training {} parameters for {} steps from step {}", model.params.numel(), schedule.total_steps, state.step);
    let mut saver = Saver { dir: &dir, cfg: &run.train, space: None };
    let result = fit(&mut model, &train, val.as_ref(), &run.train, &mut state, &mut log, &mut saver, a.stop_after);
    saver.save(ModelSpec::Arch(model.config.clone()), &model.params, &state, &log)?;
    result?;
    println!("finished at step {}; checkpoint {}", state.step, dir.file(CHECKPOINT_FILE).display());
    Ok(())
}

pub fn train_supernet(a: TrainArgs) -> Result<(), CliError> {
    let mut run: SupernetRun = resolve(read_json(&a.config)?, &a.set)?;
    let seed = seeded(&mut run.train)?;
    run.train.validate_supernet()?;
    let space = run.space.resolve()?;
    let (train, val) = split(read_dataset(&a.data)?, run.val_per_class, seed)?;
    let dir = RunDir::create(&a.out, &run, seed)?;
    let schedule = run.train.schedule(train.len());
    let (mut net, mut state, mut log) = match resume_from(&dir, a.resume, &run.train)? {
        Some((ck, log)) => (ck.supernet()?, ck.train_state(schedule), log),
        None => (SuperNet::init(space.clone(), seed)?, TrainState::new(schedule), MetricsLog::new()),
    };
    eprintln!(
        "training super-network `{}` with {} sub-networks per batch for {} steps from step {}",
        space.name, run.train.n_a, schedule.total_steps, state.step
    );
    let mut saver = Saver { dir: &dir, cfg: &run.train, space: Some(&space) };
    let result = fit_supernet(&mut net, &train, val.as_ref(), &run.train, &mut state, &mut log, &mut saver, a.stop_after);
    saver.save(ModelSpec::Supernet(net.space.clone()), &net.params, &state, &log)?;
    result?;
    println!("finished at step {}; checkpoint {}", state.step, dir.file(CHECKPOINT_FILE).display());
    Ok(())
}

fn space_value(arg: &str) -> Result<Value, CliError> {
    let path = Path::new(arg);
    if path.is_file() {
        read_json(path)
    } else {
        Ok(Value::String(arg.to_string()))
    }
}

/// Equal apart from the MAC limit.
fn same_shape(a: &SearchSpaceDef, b: &SearchSpaceDef) -> bool {
    SearchSpaceDef { max_macs: None, name: String::new(), ..a.clone() }
        == SearchSpaceDef { max_macs: None, name: String::new(), ..b.clone() }
}

pub fn search(a: SearchArgs, workers: usize) -> Result<(), CliError> {
    let ck = a.supernet_checkpoint.as_deref().map(load_checkpoint).transpose()?;
    let mut v = json!({});
    if let Some(p) = &a.evo_config {
        v["evo"] = read_json(p)?;
    }
    v["space"] = match (&a.space, &ck) {
        (Some(s), _) => space_value(s)?,
        (None, Some(ck)) => match &ck.header.model {
            ModelSpec::Supernet(space) => serde_json::to_value(space).expect("space serializes"),
            ModelSpec::Arch(_) => return Err(CliError::config("the checkpoint holds a standalone model")),
        },
        (None, None) => return Err(CliError::config("--space is required without a super-network checkpoint")),
    };
    v["synthetic_fitness"] = json!(a.synthetic_fitness);
    if let Some(c) = a.constraint_macs {
        v["constraint_macs"] = json!(c);
    }
    if let Some(s) = a.seed {
        v["seed"] = json!(s);
    }
    let mut run: SearchRun = resolve(v, &a.set)?;
    if let Some(s) = env_seed()? {
        run.seed = s;
    }
    run.evo.validate()?;
    let mut space = run.space.resolve()?;
    if let Some(c) = run.constraint_macs {
        space.max_macs = Some(c);
    }

    let net;
    let val;
    let evaluator: Box<dyn Evaluator> = if run.synthetic_fitness {
        Box::new(SeparableFitness::random(&space, run.seed))
    } else {
        let ck = ck.ok_or_else(|| CliError::config("--supernet-checkpoint or --synthetic-fitness is required"))?;
        let data = a.data.as_deref().ok_or_else(|| CliError::config("--data is required to score sub-networks"))?;
        net = ck.supernet()?;
        if !same_shape(&net.space, &space) {
            return Err(CliError::config("--space does not match the checkpoint's super-network"));
        }
        let (_, v) = split(read_dataset(data)?, run.val_per_class, ck.header.seed)?;
        val = v.ok_or_else(|| CliError::config("val_per_class must be positive to score sub-networks"))?;
        Box::new(SupernetEvaluator { net: &net, samples: &val.samples, batch_size: run.eval_batch_size })
    };

    let dir = RunDir::create(&a.out, &run, run.seed)?;
    let pop_path = dir.file(POPULATION_FILE);
    let header = "iteration,best_fitness,best_macs,members";
    let row = |p: &Population| {
        let best = p.best().expect("populations are nonempty");
        format!("{},{},{},{}", p.iteration, best.fitness, best.macs, p.members.len())
    };
    let mut pop = if a.resume && pop_path.exists() {
        let text = std::fs::read_to_string(&pop_path).map_err(|e| CliError::config(format!("{}: {e}", pop_path.display())))?;
        Population::from_json(&text)?
    } else {
        let _ = std::fs::remove_file(dir.file(METRICS_FILE));
        let p = init_population(&space, evaluator.as_ref(), &run.evo, run.seed, workers)?;
        dir.append_line(METRICS_FILE, header, &row(&p))?;
        dir.write(POPULATION_FILE, p.to_json())?;
        p
    };
    while pop.iteration < run.evo.iterations {
        pop = evolve_step(pop, &space, evaluator.as_ref(), &run.evo, workers)?;
        dir.append_line(METRICS_FILE, header, &row(&pop))?;
        dir.write(POPULATION_FILE, pop.to_json())?;
        eprintln!("iteration {}: {}", pop.iteration, row(&pop));
    }

    let best = pop.best().expect("populations are nonempty").clone();
    let choice = decode(&space, &best.gene)?;
    let arch = choice.arch(&space);
    let out = json!({
        "gene": best.gene,
        "fitness": best.fitness,
        "macs": best.macs,
        "params": count_params(&arch),
        "choice": choice,
    });
    dir.write(BEST_FILE, serde_json::to_string_pretty(&out).expect("json") + "\n")?;
    dir.write(BEST_ARCH_FILE, arch.to_json() + "\n")?;
    println!("best fitness {} at {} MACs: {}", best.fitness, best.macs, serde_json::to_string(&best.gene).expect("json"));
    Ok(())
}

fn arch_from_arg(arg: &str) -> Result<ArchConfig, CliError> {
    if let Some(c) = resnas::model::fixture(arg) {
        return Ok(c);
    }
    let path = Path::new(arg);
    if !path.is_file() {
        return Err(CliError::config(format!("`{arg}` is neither a built-in architecture nor a file")));
    }
    let text = std::fs::read_to_string(path).map_err(|e| CliError::config(format!("{arg}: {e}")))?;
    Ok(ArchConfig::from_json(&text)?)
}

pub fn cost(a: CostArgs) -> Result<(), CliError> {
    let mut arch = arch_from_arg(&a.arch)?;
    if let Some(r) = a.resolution {
        arch = arch.at_resolution(r);
    }
    arch.validate()?;
    let tokens: Vec<String> = (0..STAGES).map(|s| arch.seq_len(s).to_string()).collect();
    let macs = estimate_macs(&arch);
    let params = count_params(&arch);
    println!("resolution: {}", arch.input_resolution);
    println!("tokens: {}", tokens.join(" "));
    println!("macs: {macs} ({:.2} G)", macs as f64 / 1e9);
    println!("params: {params} ({:.2} M)", params as f64 / 1e6);
    Ok(())
}

fn gene_from_file(path: &Path) -> Result<ArchGene, CliError> {
    let v = read_json(path)?;
    let g = if v.is_object() { v["gene"].clone() } else { v };
    serde_json::from_value(g).map_err(|e| CliError::config(format!("{}: no gene: {e}", path.display())))
}

pub fn eval(a: EvalArgs) -> Result<(), CliError> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let data = read_dataset(&a.data)?;
    let model = match &ck.header.model {
        ModelSpec::Arch(_) => {
            if a.gene.is_some() {
                return Err(CliError::config("--gene applies to super-network checkpoints"));
            }
            ck.model()?
        }
        ModelSpec::Supernet(space) => {
            let net = ck.supernet()?;
            let choice = match &a.gene {
                Some(p) => decode(space, &gene_from_file(p)?)?,
                None => SubNetChoice::maximal(space),
            };
            net.extract(&choice)?
        }
    };
    if data.height != model.config.input_resolution || data.num_classes != model.config.num_classes {
        return Err(CliError::config(format!(
            "dataset ({}x{}, {} classes) does not fit the network ({} pixels, {} classes)",
            data.height, data.width, data.num_classes, model.config.input_resolution, model.config.num_classes
        )));
    }
    let top1 = evaluate_top1(&model, &data.samples, a.batch_size)?;
    println!("top1: {top1}");
    Ok(())
}
