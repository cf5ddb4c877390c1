use rand::Rng;
use serde::{Deserialize, Serialize};

use super::space::{GeneSlot, SearchSpaceDef, KEEP_OPTIONS};
use crate::error::{Error, Result};
use crate::supernet::SubNetChoice;

/// Flat vector of option indices, one per position of
/// [`SearchSpaceDef::gene_layout`]. Index 0 is always the largest option.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ArchGene(pub Vec<usize>);

impl ArchGene {
    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn validate(&self, space: &SearchSpaceDef) -> Result<()> {
        let counts = space.option_counts();
        if counts.len() != self.0.len() {
            return Err(Error::contract(format!("gene has {} positions, space needs {}", self.0.len(), counts.len())));
        }
        if let Some((i, (&g, &n))) = self.0.iter().zip(&counts).enumerate().find(|(_, (&g, &n))| g >= n) {
            return Err(Error::contract(format!("gene position {i} holds {g}, only {n} options")));
        }
        Ok(())
    }
}

fn index_of(list: &[usize], v: usize, what: &str) -> Result<usize> {
    list.iter().position(|&x| x == v).ok_or_else(|| Error::contract(format!("{what} {v} not in {list:?}")))
}

pub fn encode(space: &SearchSpaceDef, choice: &SubNetChoice) -> Result<ArchGene> {
    choice.validate(space)?;
    let gene = space
        .gene_layout()
        .into_iter()
        .map(|slot| match slot {
            GeneSlot::Embed { stage } => index_of(&space.stages[stage].embed_dims, choice.embed[stage], "embed"),
            GeneSlot::Keep { stage, slot } => Ok(usize::from(!choice.slots[stage][slot].keep)),
            GeneSlot::Heads { stage, slot } => index_of(&space.stages[stage].heads, choice.slots[stage][slot].heads, "heads"),
            GeneSlot::Hidden { stage, slot } => {
                index_of(&space.stages[stage].hiddens, choice.slots[stage][slot].hidden, "hidden")
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ArchGene(gene))
}

pub fn decode(space: &SearchSpaceDef, gene: &ArchGene) -> Result<SubNetChoice> {
    gene.validate(space)?;
    let mut choice = SubNetChoice::maximal(space);
    for (slot, &g) in space.gene_layout().into_iter().zip(&gene.0) {
        match slot {
            GeneSlot::Embed { stage } => choice.embed[stage] = space.stages[stage].embed_dims[g],
            GeneSlot::Keep { stage, slot } => choice.slots[stage][slot].keep = KEEP_OPTIONS[g],
            GeneSlot::Heads { stage, slot } => choice.slots[stage][slot].heads = space.stages[stage].heads[g],
            GeneSlot::Hidden { stage, slot } => choice.slots[stage][slot].hidden = space.stages[stage].hiddens[g],
        }
    }
    Ok(choice)
}

/// Uniform draw where position `i` takes one of its first `allowed[i]`
/// options.
pub fn sample_gene<R: Rng + ?Sized>(allowed: &[usize], rng: &mut R) -> ArchGene {
    ArchGene(allowed.iter().map(|&n| rng.random_range(0..n)).collect())
}

/// Resamples each position uniformly from its options with probability
/// `p_mutate`.
pub fn mutate<R: Rng + ?Sized>(gene: &ArchGene, space: &SearchSpaceDef, p_mutate: f64, rng: &mut R) -> ArchGene {
    let counts = space.option_counts();
    ArchGene(
        gene.0
            .iter()
            .zip(counts)
            .map(|(&g, n)| if rng.random::<f64>() < p_mutate { rng.random_range(0..n) } else { g })
            .collect(),
    )
}

/// Takes each position from `a` or `b` with equal probability.
pub fn crossover<R: Rng + ?Sized>(a: &ArchGene, b: &ArchGene, rng: &mut R) -> ArchGene {
    ArchGene(a.0.iter().zip(&b.0).map(|(&x, &y)| if rng.random::<bool>() { x } else { y }).collect())
}

/// Whether `gene` survives decode then encode unchanged.
pub fn round_trips(space: &SearchSpaceDef, gene: &ArchGene) -> bool {
    decode(space, gene).and_then(|c| encode(space, &c)).is_ok_and(|g| &g == gene)
}
