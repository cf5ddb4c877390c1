//! Acceptance checks. Each test prints one `PASS`/`FAIL` line (visible
//! with `--nocapture`) and fails when its tolerance is not met.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use resnas::autodiff::{gradcheck, Scalar, Tape, Tensor, Var, LN_EPS};
use resnas::data::{cutmix_mask, cutmix_with_mask, mixup_tokens, LabeledBatch, Sample, SyntheticSpec};
use resnas::model::{
    fixture, model_forward, vit_res_tiny_config, ArchConfig, BlockConfig, ForwardOptions, ModelParams, StageConfig, VitRes,
};
use resnas::search::{
    count_params, estimate_macs, gene_macs, rank, run_search, ArchGene, Candidate, EvoConfig, Evaluator, SearchSpaceDef,
    SeparableFitness, StageSpace,
};
use resnas::supernet::{sample_choice, supernet_forward_multi, Bounds, SuperNet};
use resnas::train::{fit, fit_supernet, token_label_loss, Checkpoint, MetricsLog, ModelSpec, TrainConfig, TrainState};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn verdict(name: &str, pass: bool, detail: String) {
    println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "{name}: {detail}");
}

fn rel_err(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

// ── cost model ───────────────────────────────────────────────────────

#[test]
fn cost_model_regression() {
    let start = Instant::now();
    let cases = [
        ("vit-resnas-tiny", 1.8e9, 41e6),
        ("vit-resnas-small", 2.8e9, 65e6),
        ("vit-resnas-medium", 4.5e9, 97e6),
        ("vit-res-tiny", 1.8e9, 43e6),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, macs, params) in cases {
        let cfg = fixture(name).unwrap();
        assert_eq!(cfg.input_resolution, 224);
        let (m, p) = (estimate_macs(&cfg) as f64, count_params(&cfg) as f64);
        let ok = (m / macs - 1.0).abs() <= 0.10 && (p / params - 1.0).abs() <= 0.05;
        pass &= ok;
        parts.push(format!("{name} {:.2}G/{:.1}M", m / 1e9, p / 1e6));
    }
    let secs = start.elapsed().as_secs_f64();
    pass &= secs < 1.0;
    verdict("cost model regression", pass, format!("{} in {secs:.3}s (MACs ±10%, params ±5%)", parts.join(", ")));
}

// ── shape ladder ─────────────────────────────────────────────────────

#[test]
fn shape_ladder() {
    let cfg = vit_res_tiny_config();
    let params = ModelParams::<f32>::init(&cfg, 0).unwrap();
    let mut tape = Tape::new();
    let vars = params.attach(&mut tape, false);
    let x = tape.constant(Tensor::uniform([1, 3, 224, 224], 0.0, 1.0, &mut rng(1)));
    let mut opts = ForwardOptions::eval();
    opts.record_attention = true;
    let out = model_forward(&mut tape, &cfg, &vars, x, opts).unwrap();
    // Attention maps are [B, heads, T, T]; blocks run stage by stage.
    let lens: Vec<usize> = out.attention.iter().map(|&a| tape.shape(a)[2]).collect();
    let mut per_stage = Vec::new();
    let mut at = 0;
    for s in &cfg.stages {
        let stage = &lens[at..at + s.blocks.len()];
        per_stage.push(stage[0]);
        at += s.blocks.len();
        assert!(stage.iter().all(|&t| t == stage[0]));
    }
    let tok = tape.shape(out.token_logits).to_vec();
    let pass = per_stage == [257, 65, 17] && tok == [1, 16, 1000] && tape.shape(out.cls_logits) == [1, 1000];
    verdict("shape ladder", pass, format!("sequence lengths {per_stage:?}, token logits {tok:?}"));
}

// ── weight sharing ───────────────────────────────────────────────────

/// Two slots per stage (the second skippable), widths up to 64.
fn sharing_space() -> SearchSpaceDef {
    let stage = |embed: &[usize], heads: &[usize], hiddens: &[usize], head_dim| StageSpace {
        embed_dims: embed.to_vec(),
        heads: heads.to_vec(),
        hiddens: hiddens.to_vec(),
        head_dim,
        skippable: vec![false, true],
    };
    SearchSpaceDef {
        name: "sharing".into(),
        stem_channels: 4,
        stages: [
            stage(&[16, 12, 8], &[2, 1], &[32, 24, 16], 4),
            stage(&[32, 24, 20], &[3, 2, 1], &[48, 32], 8),
            stage(&[64, 48, 40], &[4, 2], &[64, 48, 32], 8),
        ],
        num_classes: 7,
        input_resolution: 56,
        max_macs: None,
    }
}

#[test]
fn weight_sharing_equivalence() {
    let start = Instant::now();
    let space = sharing_space();
    let mut net = SuperNet::<f32>::init(space.clone(), 3).unwrap();
    let mut r = rng(4);
    for (_, t) in net.params.iter_mut() {
        let noise = Tensor::<f32>::randn(t.shape().to_vec(), 0.1, &mut r);
        t.data_mut().iter_mut().zip(noise.data()).for_each(|(a, b)| *a += b);
    }
    let (per, group) = (2, 4);
    let mut worst = 0.0f64;
    let mut checked = 0;
    for _ in 0..100 / group {
        let choices: Vec<_> = (0..group).map(|_| sample_choice(&space, &mut r, &Bounds::full(&space)).unwrap()).collect();
        let images = Tensor::<f32>::uniform([group * per, 3, 56, 56], 0.0, 1.0, &mut r);
        let mut tape = Tape::new();
        let vars = net.params.attach(&mut tape, false);
        let x = tape.constant(images.clone());
        let out = supernet_forward_multi(&mut tape, &space, &vars, x, &choices, ForwardOptions::eval()).unwrap();
        let (cls, tok) = (tape.data(out.cls_logits), tape.data(out.token_logits));
        let (nc, nt) = (cls.len() / (group * per), tok.len() / (group * per));
        let pixels = images.numel() / (group * per);
        for (j, c) in choices.iter().enumerate() {
            let sub = net.extract(c).unwrap();
            let own = Tensor::new([per, 3, 56, 56], images.data()[j * per * pixels..(j + 1) * per * pixels].to_vec()).unwrap();
            let (ec, et) = sub.infer(&own).unwrap();
            let masked = cls[j * per * nc..(j + 1) * per * nc].iter().chain(&tok[j * per * nt..(j + 1) * per * nt]);
            for (&a, &b) in masked.zip(ec.data().iter().chain(et.data())) {
                worst = worst.max(rel_err(a as f64, b as f64));
            }
            checked += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        "weight-sharing equivalence",
        worst <= 1e-5 && checked == 100,
        format!("{checked} sub-networks, max rel err {worst:e} (tol 1e-5) in {secs:.1}s"),
    );
}

// ── masked layer norm ────────────────────────────────────────────────

#[test]
fn masked_layer_norm_exactness() {
    let mut r = rng(5);
    let mut worst = 0.0f64;
    let mut suffix_nonzero = 0;
    for _ in 0..1000 {
        let c = r.random_range(2..=64usize);
        let w = r.random_range(1..=c);
        let mut x: Vec<f32> = (0..c).map(|_| r.random_range(-3.0..3.0)).collect();
        x[w..].iter_mut().for_each(|v| *v = 0.0);
        let gamma: Vec<f32> = (0..c).map(|_| r.random_range(0.5..1.5)).collect();
        let beta: Vec<f32> = (0..c).map(|_| r.random_range(-0.5..0.5)).collect();

        let mut tape = Tape::<f32>::new();
        let xv = tape.constant(Tensor::new([1, c], x.clone()).unwrap());
        let g = tape.constant(Tensor::new([c], gamma.clone()).unwrap());
        let b = tape.constant(Tensor::new([c], beta.clone()).unwrap());
        let masked = tape.masked_layer_norm(xv, &[w], g, b, LN_EPS).unwrap();
        let xp = tape.constant(Tensor::new([1, w], x[..w].to_vec()).unwrap());
        let gp = tape.constant(Tensor::new([w], gamma[..w].to_vec()).unwrap());
        let bp = tape.constant(Tensor::new([w], beta[..w].to_vec()).unwrap());
        let plain = tape.layer_norm(xp, gp, bp, LN_EPS).unwrap();

        let (m, p) = (tape.data(masked), tape.data(plain));
        for i in 0..w {
            worst = worst.max((m[i] - p[i]).abs() as f64);
        }
        suffix_nonzero += m[w..].iter().filter(|v| v.to_bits() != 0).count();
    }
    verdict(
        "masked layer norm exactness",
        worst <= 1e-6 && suffix_nonzero == 0,
        format!("1000 pairs, max abs diff {worst:e} (tol 1e-6), {suffix_nonzero} nonzero masked slots"),
    );
}

// ── gradients ────────────────────────────────────────────────────────

type OpCheck = (&'static str, Vec<Tensor<f64>>, Box<dyn Fn(&mut Tape<f64>, &[Var]) -> resnas::Result<Var>>);

/// Weighted sum with fixed random weights, so every output element matters.
fn probe(tape: &mut Tape<f64>, y: Var, seed: u64) -> resnas::Result<Var> {
    let w = Tensor::uniform(tape.shape(y).to_vec(), -1.0, 1.0, &mut rng(seed));
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn u(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape.to_vec(), -1.0, 1.0, &mut rng(seed))
}

fn op_checks() -> Vec<OpCheck> {
    let mut zero_tail = u(&[2, 3, 5], 20);
    for row in 0..3 {
        zero_tail.data_mut()[row * 5 + 3..row * 5 + 5].iter_mut().for_each(|v| *v = 0.0);
    }
    let targets = {
        let mut t = Tensor::<f64>::uniform([3, 4], 0.0, 1.0, &mut rng(21));
        for row in t.data_mut().chunks_mut(4) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        t
    };
    let pos = Tensor::<f64>::uniform([3], 0.5, 1.5, &mut rng(22));
    vec![
        ("add (broadcast)", vec![u(&[2, 3, 4], 1), u(&[3, 4], 2)], Box::new(|t, v| {
            let y = t.add(v[0], v[1])?;
            probe(t, y, 100)
        })),
        ("mul", vec![u(&[3, 4], 3), u(&[3, 4], 4)], Box::new(|t, v| {
            let y = t.mul(v[0], v[1])?;
            probe(t, y, 101)
        })),
        ("scale", vec![u(&[5], 5)], Box::new(|t, v| {
            let y = t.scale(v[0], 0.7)?;
            probe(t, y, 102)
        })),
        ("gelu", vec![Tensor::uniform([12], -3.0, 3.0, &mut rng(6))], Box::new(|t, v| {
            let y = t.gelu(v[0])?;
            probe(t, y, 103)
        })),
        ("matmul (batched)", vec![u(&[2, 3, 4], 7), u(&[2, 4, 2], 8)], Box::new(|t, v| {
            let y = t.matmul(v[0], v[1])?;
            probe(t, y, 104)
        })),
        ("linear", vec![u(&[2, 3, 4], 9), u(&[4, 5], 10), u(&[5], 11)], Box::new(|t, v| {
            let y = t.linear(v[0], v[1], Some(v[2]))?;
            probe(t, y, 105)
        })),
        ("transpose", vec![u(&[2, 3, 4], 12)], Box::new(|t, v| {
            let y = t.transpose(v[0])?;
            probe(t, y, 106)
        })),
        ("permute", vec![u(&[2, 3, 4], 13)], Box::new(|t, v| {
            let y = t.permute(v[0], &[2, 0, 1])?;
            probe(t, y, 107)
        })),
        ("reshape", vec![u(&[2, 6], 14)], Box::new(|t, v| {
            let y = t.reshape(v[0], &[3, 4])?;
            probe(t, y, 108)
        })),
        ("narrow", vec![u(&[2, 5, 3], 15)], Box::new(|t, v| {
            let y = t.narrow(v[0], 1, 1, 3)?;
            probe(t, y, 109)
        })),
        ("concat", vec![u(&[2, 1, 3], 16), u(&[2, 4, 3], 17)], Box::new(|t, v| {
            let y = t.concat(&[v[0], v[1]], 1)?;
            probe(t, y, 110)
        })),
        ("zero_pad_channels", vec![u(&[2, 3], 18)], Box::new(|t, v| {
            let y = t.zero_pad_channels(v[0], 5)?;
            probe(t, y, 111)
        })),
        ("slice_channels", vec![u(&[2, 5], 19)], Box::new(|t, v| {
            let y = t.slice_channels(v[0], 3)?;
            probe(t, y, 112)
        })),
        ("seq_to_grid", vec![u(&[2, 4, 3], 23)], Box::new(|t, v| {
            let y = t.seq_to_grid(v[0])?;
            probe(t, y, 113)
        })),
        ("grid_to_seq", vec![u(&[2, 3, 2, 2], 24)], Box::new(|t, v| {
            let y = t.grid_to_seq(v[0])?;
            probe(t, y, 114)
        })),
        ("softmax_rows", vec![Tensor::uniform([3, 5], -2.0, 2.0, &mut rng(25))], Box::new(|t, v| {
            let y = t.softmax_rows(v[0])?;
            probe(t, y, 115)
        })),
        ("layer_norm", vec![u(&[2, 3, 5], 26), pos.clone(), u(&[3], 27)], Box::new(|t, v| {
            let x = t.narrow(v[0], 2, 0, 3)?;
            let y = t.layer_norm(x, v[1], v[2], LN_EPS)?;
            probe(t, y, 116)
        })),
        ("masked_layer_norm", vec![zero_tail, Tensor::uniform([5], 0.5, 1.5, &mut rng(28)), u(&[5], 29)], Box::new(|t, v| {
            let y = t.masked_layer_norm(v[0], &[3, 5], v[1], v[2], LN_EPS)?;
            probe(t, y, 117)
        })),
        ("conv2d", vec![u(&[1, 2, 5, 5], 30), u(&[3, 2, 3, 3], 31), u(&[3], 32)], Box::new(|t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
            probe(t, y, 118)
        })),
        ("avg_pool2d", vec![u(&[1, 2, 4, 4], 33)], Box::new(|t, v| {
            let y = t.avg_pool2d(v[0], 2, 2)?;
            probe(t, y, 119)
        })),
        ("mask_channels", vec![u(&[2, 3, 4], 34)], Box::new(|t, v| {
            let y = t.mask_channels(v[0], &[2, 4])?;
            probe(t, y, 120)
        })),
        ("scale_examples", vec![u(&[2, 3], 35)], Box::new(|t, v| {
            let y = t.scale_examples(v[0], &[0.0, 1.25])?;
            probe(t, y, 121)
        })),
        ("sum", vec![u(&[3, 2], 36)], Box::new(|t, v| {
            let y = t.gelu(v[0])?;
            t.sum(y)
        })),
        ("mean", vec![u(&[3, 2], 37)], Box::new(|t, v| {
            let y = t.gelu(v[0])?;
            t.mean(y)
        })),
        ("soft_cross_entropy", vec![Tensor::uniform([3, 4], -2.0, 2.0, &mut rng(38))], Box::new(move |t, v| {
            t.soft_cross_entropy(v[0], &targets)
        })),
    ]
}

/// Two blocks (first and last stage) with both reductions in between.
fn composite_config() -> ArchConfig {
    ArchConfig {
        stem_channels: 3,
        stages: [
            StageConfig { embed_dim: 4, blocks: vec![BlockConfig::new(2, 2, 8)] },
            StageConfig { embed_dim: 8, blocks: vec![] },
            StageConfig { embed_dim: 12, blocks: vec![BlockConfig::new(2, 4, 16)] },
        ],
        num_classes: 3,
        input_resolution: 56,
    }
}

fn composite_loss<T: Scalar>(
    cfg: &ArchConfig,
    params: &ModelParams<T>,
    images: &Tensor<T>,
    batch: &LabeledBatch,
    trainable: bool,
) -> (Tape<T>, resnas::model::ParamVars, Var) {
    let mut tape = Tape::new();
    let vars = params.attach(&mut tape, trainable);
    let x = tape.constant(images.clone());
    let out = model_forward(&mut tape, cfg, &vars, x, ForwardOptions::eval()).unwrap();
    let loss = token_label_loss(&mut tape, out.cls_logits, out.token_logits, batch, true).unwrap().total;
    (tape, vars, loss)
}

/// Gradients of the composite model computed on a `T` tape, against
/// central differences (step `h`) of the same loss evaluated in `f64` at
/// the same point. Returns the worst `|a - n| / max(|a|, |n|, floor)` over
/// every parameter element.
fn composite_check<T: Scalar>(h: f64, floor: f64) -> (f64, usize) {
    let cfg = composite_config();
    let mut params = ModelParams::<f64>::init(&cfg, 40).unwrap();
    let mut r = rng(41);
    for (_, t) in params.iter_mut() {
        let noise = Tensor::<f64>::randn(t.shape().to_vec(), 0.3, &mut r);
        t.data_mut().iter_mut().zip(noise.data()).for_each(|(a, b)| *a += b);
    }
    // Round through T so both precisions see identical inputs.
    let params: ModelParams<T> = params.cast();
    let images = Tensor::<f64>::uniform([2, 3, 56, 56], 0.0, 1.0, &mut r).cast::<T>();
    let samples: Vec<Sample> = (0..2).map(|i| Sample { image: Tensor::zeros([3, 56, 56]), label: i }).collect();
    let refs: Vec<&Sample> = samples.iter().collect();
    let batch = LabeledBatch::plain(&refs, cfg.token_label_patches(), cfg.num_classes).unwrap();

    let (mut tape, vars, loss) = composite_loss(&cfg, &params, &images, &batch, true);
    tape.backward(loss).unwrap();
    let images64 = images.cast::<f64>();
    let eval = |p: &ModelParams<f64>| {
        let (tape, _, loss) = composite_loss(&cfg, p, &images64, &batch, false);
        tape.data(loss)[0]
    };
    let base: ModelParams<f64> = params.cast();
    let mut work = base.clone();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (name, var) in vars.iter() {
        let analytic: Vec<f64> = tape.grad(var).unwrap().iter().map(|g| g.as_f64()).collect();
        for (e, &a) in analytic.iter().enumerate() {
            let orig = base.get(name).unwrap().data()[e];
            let mut at = |d: f64| {
                work.get_mut(name).unwrap().data_mut()[e] = orig + d;
                let v = eval(&work);
                work.get_mut(name).unwrap().data_mut()[e] = orig;
                v
            };
            let n = (at(h) - at(-h)) / (2.0 * h);
            worst = worst.max((a - n).abs() / a.abs().max(n.abs()).max(floor));
            checked += 1;
        }
    }
    (worst, checked)
}

#[test]
fn gradient_correctness() {
    let start = Instant::now();
    const FLOOR: f64 = 1e-3;
    let mut failures = Vec::new();
    let mut worst_op = 0.0f64;
    let checks = op_checks();
    let ops = checks.len();
    for (name, inputs, f) in checks {
        let r = gradcheck::check(&inputs, 1e-5, FLOOR, |t, v| f(t, v)).unwrap();
        worst_op = worst_op.max(r.max_rel_err);
        if r.max_rel_err > 1e-6 {
            failures.push(format!("{name}: {r:?}"));
        }
    }
    let (w64, n64) = composite_check::<f64>(1e-5, FLOOR);
    let (w32, n32) = composite_check::<f32>(1e-5, FLOOR);
    let secs = start.elapsed().as_secs_f64();
    let pass = failures.is_empty() && w64 <= 1e-6 && w32 <= 1e-3;
    verdict(
        "gradient correctness",
        pass,
        format!(
            "{ops} ops max rel err {worst_op:e}; 2-block model, {n64} params: f64 {w64:e} (tol 1e-6), \
             f32 backward vs f64 differences {w32:e} (tol 1e-3); {secs:.1}s{}",
            if failures.is_empty() { String::new() } else { format!("; failing: {}", failures.join("; ")) }
        ),
    );
    assert_eq!(n32, n64);
}

// ── evolutionary search ──────────────────────────────────────────────

/// 2^12 genes: two-way embedding choices per stage, one fixed slot per
/// stage and a skippable second slot in the last stage.
fn enumerable_space() -> SearchSpaceDef {
    let stage = |embed: &[usize], heads: &[usize], hiddens: &[usize], skippable: Vec<bool>| StageSpace {
        embed_dims: embed.to_vec(),
        heads: heads.to_vec(),
        hiddens: hiddens.to_vec(),
        head_dim: 8,
        skippable,
    };
    SearchSpaceDef {
        name: "enumerable".into(),
        stem_channels: 4,
        stages: [
            stage(&[16, 12], &[2, 1], &[64, 32], vec![false]),
            stage(&[32, 24], &[4, 2], &[128, 64], vec![false]),
            stage(&[64, 48], &[8, 4], &[256, 128], vec![false, true]),
        ],
        num_classes: 10,
        input_resolution: 56,
        max_macs: None,
    }
}

fn all_genes(counts: &[usize]) -> Vec<ArchGene> {
    let mut out = vec![vec![]];
    for &n in counts {
        out = out.into_iter().flat_map(|g: Vec<usize>| (0..n).map(move |o| [g.clone(), vec![o]].concat())).collect();
    }
    out.into_iter().map(ArchGene).collect()
}

#[test]
fn evolutionary_search_soundness() {
    let start = Instant::now();
    let mut space = enumerable_space();
    let genes = all_genes(&space.option_counts());
    assert!(genes.len() <= 4096, "{} genes", genes.len());
    let macs: Vec<u64> = genes.iter().map(|g| gene_macs(&space, g).unwrap()).collect();
    let mut sorted = macs.clone();
    sorted.sort_unstable();
    let limit = sorted[sorted.len() * 3 / 10];
    space.max_macs = Some(limit);

    let evo = EvoConfig::default();
    let (mut found, mut binding, mut violations, mut non_monotone) = (0, 0, 0, 0);
    for seed in 0..100u64 {
        let fitness = SeparableFitness::random(&space, seed);
        let scored: Vec<Candidate> = genes
            .iter()
            .zip(&macs)
            .map(|(g, &m)| Candidate { gene: g.clone(), fitness: fitness.evaluate(g).unwrap(), macs: m })
            .collect();
        let best_any = scored.iter().min_by(|a, b| rank(a, b)).unwrap();
        let best_feasible = scored.iter().filter(|c| c.macs <= limit).min_by(|a, b| rank(a, b)).unwrap();
        binding += usize::from(best_any.macs > limit);

        let out = run_search(&space, &fitness, &evo, seed, 1).unwrap();
        found += usize::from(out.best.gene == best_feasible.gene);
        violations += out.population.members.iter().filter(|c| c.macs > limit).count();
        non_monotone += usize::from(out.history.windows(2).any(|w| w[1] < w[0]));
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        "evolutionary search soundness",
        found >= 95 && violations == 0 && non_monotone == 0 && binding == 100,
        format!(
            "{} genes, limit {limit} MACs binding in {binding}/100; optimum found in {found}/100 (need 95); \
             {violations} infeasible members; {non_monotone} non-monotone runs; {secs:.1}s",
            genes.len()
        ),
    );
}

// ── token labeling ───────────────────────────────────────────────────

fn random_sample<R: Rng>(r: &mut R, side: usize, classes: usize) -> Sample {
    Sample { image: Tensor::uniform([3, side, side], 0.0, 1.0, r), label: r.random_range(0..classes) }
}

fn expected_label(l1: usize, l2: usize, lambda: f64, classes: usize) -> Vec<f32> {
    let (a, b) = (lambda as f32, 1.0 - lambda as f32);
    (0..classes).map(|c| a * f32::from(u8::from(c == l1)) + b * f32::from(u8::from(c == l2))).collect()
}

#[test]
fn token_labeling_algebra() {
    let mut r = rng(7);
    let classes = 5;
    let mut bad = Vec::new();
    for trial in 0..1000 {
        let grid = [1usize, 2, 4][trial % 3];
        let k = grid * grid;
        let side = grid * r.random_range(1..=3usize) * 2;
        let (s1, s2) = (random_sample(&mut r, side, classes), random_sample(&mut r, side, classes));

        let mask = cutmix_mask(k, &mut r);
        let a = cutmix_with_mask(&s1, &s2, &mask, classes).unwrap();
        let mean = mask.iter().filter(|&&m| m).count() as f64 / k as f64;
        if a.lambda != mean {
            bad.push(format!("trial {trial}: cutmix λ {} vs mean(M) {mean}", a.lambda));
        }
        if a.image_label != expected_label(s1.label, s2.label, a.lambda, classes) {
            bad.push(format!("trial {trial}: cutmix image label"));
        }
        let patch = side / grid;
        for (p, &m) in mask.iter().enumerate() {
            let src = if m { &s1 } else { &s2 };
            let (py, px) = (p / grid * patch, p % grid * patch);
            for c in 0..3 {
                for y in py..py + patch {
                    for x in px..px + patch {
                        let i = (c * side + y) * side + x;
                        if a.image.data()[i].to_bits() != src.image.data()[i].to_bits() {
                            bad.push(format!("trial {trial}: cutmix pixel {i}"));
                        }
                    }
                }
            }
            let want: Vec<f32> = (0..classes).map(|c| f32::from(u8::from(c == src.label))).collect();
            if a.patch_labels[p * classes..(p + 1) * classes] != want[..] {
                bad.push(format!("trial {trial}: cutmix patch label {p}"));
            }
        }

        let lambda = r.random::<f64>();
        let m = mixup_tokens(&s1, &s2, lambda, k, classes).unwrap();
        if m.image_label != expected_label(s1.label, s2.label, lambda, classes) || m.lambda != lambda {
            bad.push(format!("trial {trial}: mixup image label"));
        }
        if m.patch_labels.chunks(classes).any(|row| row != m.image_label.as_slice()) || m.patch_labels.len() != k * classes {
            bad.push(format!("trial {trial}: mixup patch labels"));
        }
    }
    verdict(
        "token-labeling algebra",
        bad.is_empty(),
        format!("1000 CutMix and 1000 Mixup trials, {} violations{}", bad.len(), bad.first().map(|b| format!(" (first: {b})")).unwrap_or_default()),
    );
}

// ── stability ────────────────────────────────────────────────────────

#[test]
fn supernet_stability_smoke() {
    let start = Instant::now();
    let space = resnas::search::builtin_space("toy").unwrap();
    assert_eq!(space.max_config().depth(), 12);
    assert_eq!(space.max_config().token_label_patches(), 4);
    let data = SyntheticSpec { num_classes: 10, count: 320, size: 112, seed: 9 }.generate().unwrap();
    let cfg = TrainConfig {
        epochs: 20,
        batch_size: 32,
        n_a: 16,
        lr_warmup_epochs: 2.0,
        seed: 9,
        eval_every: 0,
        ..TrainConfig::default()
    };
    let schedule = cfg.schedule(data.len());
    assert_eq!(schedule.total_steps, 200);
    let mut net = SuperNet::<f32>::init(space, 9).unwrap();
    let mut state = TrainState::new(schedule);
    let mut log = MetricsLog::new();
    let result = fit_supernet(&mut net, &data, None, &cfg, &mut state, &mut log, &mut (), None);
    let losses = log.losses();
    let finite = losses.iter().all(|l| l.is_finite()) && net.params.is_finite();
    let secs = start.elapsed().as_secs_f64();
    verdict(
        "super-network stability",
        result.is_ok() && losses.len() == 200 && finite,
        format!(
            "{} steps with N_a=16 at depth 12, result {:?}, loss {:.3} -> {:.3}, finite {finite}, {secs:.1}s",
            losses.len(),
            result.as_ref().map(|_| ()).map_err(|e| e.to_string()),
            losses.first().copied().unwrap_or(f64::NAN),
            losses.last().copied().unwrap_or(f64::NAN),
        ),
    );
}

// ── determinism and persistence ──────────────────────────────────────

fn small_arch() -> ArchConfig {
    ArchConfig {
        stem_channels: 4,
        stages: [
            StageConfig::uniform(8, 1, BlockConfig::new(2, 4, 16)),
            StageConfig::uniform(16, 1, BlockConfig::new(2, 8, 32)),
            StageConfig::uniform(32, 1, BlockConfig::new(4, 8, 64)),
        ],
        num_classes: 4,
        input_resolution: 56,
    }
}

fn seeded_run(seed: u64) -> (String, VitRes<f32>, TrainState, TrainConfig) {
    let data = SyntheticSpec { num_classes: 4, count: 40, size: 56, seed: 11 }.generate().unwrap();
    let (train, val) = data.samples.split_at(32);
    let (train, val) = (data.with_samples(train.to_vec()), data.with_samples(val.to_vec()));
    let cfg = TrainConfig { epochs: 3, batch_size: 8, lr_warmup_epochs: 1.0, seed, eval_batch_size: 8, ..TrainConfig::default() };
    let mut model = VitRes::<f32>::init(small_arch(), seed).unwrap();
    let mut state = TrainState::new(cfg.schedule(train.len()));
    let mut log = MetricsLog::new();
    fit(&mut model, &train, Some(&val), &cfg, &mut state, &mut log, &mut (), None).unwrap();
    (log.to_csv().unwrap(), model, state, cfg)
}

#[test]
fn determinism_and_persistence() {
    let (csv_a, model, state, cfg) = seeded_run(12);
    let (csv_b, _, _, _) = seeded_run(12);
    let (csv_c, _, _, _) = seeded_run(13);
    let same_csv = csv_a == csv_b && csv_a != csv_c;

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.ckpt");
    let ck = Checkpoint::capture(ModelSpec::Arch(model.config.clone()), &model.params, &state, &cfg);
    resnas::train::save_checkpoint(&path, &ck).unwrap();
    let loaded = resnas::train::load_checkpoint(&path).unwrap().model().unwrap();
    let images = Tensor::<f32>::uniform([3, 3, 56, 56], 0.0, 1.0, &mut rng(14));
    let (c1, t1) = model.infer(&images).unwrap();
    let (c2, t2) = loaded.infer(&images).unwrap();
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let same_out = bits(&c1) == bits(&c2) && bits(&t1) == bits(&t2) && loaded.params == model.params;
    verdict(
        "determinism and persistence",
        same_csv && same_out,
        format!(
            "fixed-seed metrics CSVs identical: {same_csv} ({} lines); checkpoint round trip bitwise: {same_out}",
            csv_a.lines().count()
        ),
    );
}
