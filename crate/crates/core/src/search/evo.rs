use std::cmp::Ordering;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::cost::gene_macs;
use super::gene::{crossover, mutate, sample_gene, ArchGene};
use super::space::{GeneSlot, SearchSpaceDef};
use crate::error::{Error, Result};
use crate::rng::{self, tag, StreamRng};

/// Draws allowed per population initialisation or per step before the
/// constraint is declared infeasible.
pub const MAX_DRAWS: usize = 1_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvoConfig {
    pub population: usize,
    pub parents: usize,
    pub children: usize,
    pub iterations: usize,
    pub p_mutate: f64,
}

impl Default for EvoConfig {
    fn default() -> Self {
        EvoConfig { population: 500, parents: 75, children: 150, iterations: 20, p_mutate: 0.3 }
    }
}

impl EvoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population == 0 || self.parents == 0 || self.parents > self.population {
            return Err(Error::contract(format!(
                "need 1 <= parents ({}) <= population ({})",
                self.parents, self.population
            )));
        }
        if !self.children.is_multiple_of(2) {
            return Err(Error::contract(format!("children ({}) must be even", self.children)));
        }
        if !(0.0..=1.0).contains(&self.p_mutate) {
            return Err(Error::contract(format!("p_mutate {} outside [0, 1]", self.p_mutate)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub gene: ArchGene,
    pub fitness: f64,
    pub macs: u64,
}

/// Higher fitness first, then fewer MACs, then the lexicographically
/// smaller gene.
pub fn rank(a: &Candidate, b: &Candidate) -> Ordering {
    b.fitness.total_cmp(&a.fitness).then(a.macs.cmp(&b.macs)).then_with(|| a.gene.cmp(&b.gene))
}

/// Scores a sub-network; higher is better.
pub trait Evaluator: Sync {
    fn evaluate(&self, gene: &ArchGene) -> Result<f64>;
}

impl<F: Fn(&ArchGene) -> Result<f64> + Sync> Evaluator for F {
    fn evaluate(&self, gene: &ArchGene) -> Result<f64> {
        self(gene)
    }
}

/// Every candidate ever created, with the state needed to resume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Population {
    pub seed: u64,
    /// Completed evolution steps.
    pub iteration: usize,
    pub members: Vec<Candidate>,
}

impl Population {
    pub fn best(&self) -> Option<&Candidate> {
        self.members.iter().min_by(|a, b| rank(a, b))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("population serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

fn fits(space: &SearchSpaceDef, macs: u64) -> bool {
    space.max_macs.is_none_or(|m| macs <= m)
}

/// The cheapest gene: last option everywhere, every skippable slot dropped.
pub fn minimal_gene(space: &SearchSpaceDef) -> ArchGene {
    ArchGene(space.gene_layout().into_iter().map(|slot| space.options(slot) - 1).collect())
}

fn check_satisfiable(space: &SearchSpaceDef) -> Result<()> {
    let macs = gene_macs(space, &minimal_gene(space))?;
    if !fits(space, macs) {
        return Err(Error::Infeasible(format!(
            "smallest sub-network needs {macs} MACs, above the limit of {}",
            space.max_macs.unwrap_or(u64::MAX)
        )));
    }
    Ok(())
}

fn evaluate_all(evaluator: &dyn Evaluator, genes: &[ArchGene], workers: usize) -> Result<Vec<f64>> {
    if workers <= 1 {
        return genes.iter().map(|g| evaluator.evaluate(g)).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::contract(format!("cannot start {workers} workers: {e}")))?;
    pool.install(|| genes.par_iter().map(|g| evaluator.evaluate(g)).collect())
}

fn score(evaluator: &dyn Evaluator, genes: Vec<(ArchGene, u64)>, workers: usize) -> Result<Vec<Candidate>> {
    let just_genes: Vec<ArchGene> = genes.iter().map(|(g, _)| g.clone()).collect();
    let fitness = evaluate_all(evaluator, &just_genes, workers)?;
    Ok(genes.into_iter().zip(fitness).map(|((gene, macs), fitness)| Candidate { gene, fitness, macs }).collect())
}

/// Redraws `make` until its gene meets the constraint, counting draws
/// against `budget`.
fn draw_feasible(
    space: &SearchSpaceDef,
    budget: &mut usize,
    rng: &mut StreamRng,
    mut make: impl FnMut(&mut StreamRng) -> ArchGene,
) -> Result<(ArchGene, u64)> {
    loop {
        if *budget == 0 {
            return Err(Error::Infeasible(format!("no sub-network met the MAC limit within {MAX_DRAWS} draws")));
        }
        *budget -= 1;
        let g = make(rng);
        let macs = gene_macs(space, &g)?;
        if fits(space, macs) {
            return Ok((g, macs));
        }
    }
}

/// `evo.population` genes drawn uniformly, rejecting those over the MAC
/// limit, then evaluated.
pub fn init_population(
    space: &SearchSpaceDef,
    evaluator: &dyn Evaluator,
    evo: &EvoConfig,
    seed: u64,
    workers: usize,
) -> Result<Population> {
    space.validate()?;
    evo.validate()?;
    check_satisfiable(space)?;
    let mut rng = rng::stream(seed, &[tag::SEARCH, 0]);
    let counts = space.option_counts();
    let mut budget = MAX_DRAWS;
    let genes = (0..evo.population)
        .map(|_| draw_feasible(space, &mut budget, &mut rng, |r| sample_gene(&counts, r)))
        .collect::<Result<Vec<_>>>()?;
    let members = score(evaluator, genes, workers)?;
    Ok(Population { seed, iteration: 0, members })
}

/// One generation: the top `evo.parents` produce `evo.children / 2`
/// mutants and as many crossovers; every child is evaluated and appended.
pub fn evolve_step(
    mut pop: Population,
    space: &SearchSpaceDef,
    evaluator: &dyn Evaluator,
    evo: &EvoConfig,
    workers: usize,
) -> Result<Population> {
    evo.validate()?;
    if pop.members.len() < evo.parents {
        return Err(Error::contract(format!(
            "population of {} is smaller than {} parents",
            pop.members.len(),
            evo.parents
        )));
    }
    let step = pop.iteration + 1;
    let mut rng = rng::stream(pop.seed, &[tag::SEARCH, step as u64]);
    let mut ranked: Vec<&Candidate> = pop.members.iter().collect();
    ranked.sort_by(|a, b| rank(a, b));
    let parents: Vec<ArchGene> = ranked[..evo.parents].iter().map(|c| c.gene.clone()).collect();
    let n = parents.len();

    let mut budget = MAX_DRAWS;
    let mut children = Vec::with_capacity(evo.children);
    for _ in 0..evo.children / 2 {
        children.push(draw_feasible(space, &mut budget, &mut rng, |r| {
            let p = &parents[r.random_range(0..n)];
            mutate(p, space, evo.p_mutate, r)
        })?);
    }
    for _ in 0..evo.children / 2 {
        children.push(draw_feasible(space, &mut budget, &mut rng, |r| {
            let i = r.random_range(0..n);
            let j = if n >= 2 { (i + 1 + r.random_range(0..n - 1)) % n } else { i };
            crossover(&parents[i], &parents[j], r)
        })?);
    }
    pop.members.extend(score(evaluator, children, workers)?);
    pop.iteration = step;
    Ok(pop)
}

#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub best: Candidate,
    pub population: Population,
    /// Best fitness after initialisation and after every step.
    pub history: Vec<f64>,
}

/// Initialisation followed by `evo.iterations` steps.
pub fn run_search(
    space: &SearchSpaceDef,
    evaluator: &dyn Evaluator,
    evo: &EvoConfig,
    seed: u64,
    workers: usize,
) -> Result<SearchOutcome> {
    let pop = init_population(space, evaluator, evo, seed, workers)?;
    resume_search(pop, space, evaluator, evo, workers)
}

/// Continues a saved population until `evo.iterations` steps are done.
pub fn resume_search(
    mut pop: Population,
    space: &SearchSpaceDef,
    evaluator: &dyn Evaluator,
    evo: &EvoConfig,
    workers: usize,
) -> Result<SearchOutcome> {
    let best_fitness = |p: &Population| p.best().map_or(f64::NEG_INFINITY, |c| c.fitness);
    let mut history = vec![best_fitness(&pop)];
    while pop.iteration < evo.iterations {
        pop = evolve_step(pop, space, evaluator, evo, workers)?;
        history.push(best_fitness(&pop));
    }
    let best = pop.best().cloned().ok_or_else(|| Error::contract("empty population"))?;
    Ok(SearchOutcome { best, population: pop, history })
}

/// Sum of independent per-position scores: uniform noise plus a bonus that
/// grows with the option's size, so that a MAC limit binds.
#[derive(Clone, Debug, PartialEq)]
pub struct SeparableFitness {
    pub scores: Vec<Vec<f64>>,
}

impl SeparableFitness {
    pub fn random(space: &SearchSpaceDef, seed: u64) -> Self {
        let mut r = rng::stream(seed, &[tag::SYNTHETIC]);
        let scores = space
            .gene_layout()
            .into_iter()
            .map(|slot| {
                let n = space.options(slot);
                let weight = match slot {
                    GeneSlot::Embed { .. } => 2.0,
                    _ => 1.0,
                };
                (0..n).map(|i| weight * (r.random::<f64>() + (n - i) as f64 / n as f64)).collect()
            })
            .collect();
        SeparableFitness { scores }
    }
}

impl Evaluator for SeparableFitness {
    fn evaluate(&self, gene: &ArchGene) -> Result<f64> {
        if gene.len() != self.scores.len() {
            return Err(Error::contract("gene length does not match the fitness table"));
        }
        Ok(gene.0.iter().zip(&self.scores).map(|(&g, s)| s[g]).sum())
    }
}
