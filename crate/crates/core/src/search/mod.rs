//! Search spaces, the gene codec, the analytic cost model and
//! MAC-constrained evolutionary search.

mod cost;
mod evo;
mod gene;
mod space;

pub use cost::{count_params, estimate_macs, gene_macs};
pub use evo::{
    evolve_step, init_population, minimal_gene, rank, resume_search, run_search, Candidate, EvoConfig, Evaluator,
    Population, SearchOutcome, SeparableFitness, MAX_DRAWS,
};
pub use gene::{crossover, decode, encode, mutate, round_trips, sample_gene, ArchGene};
pub use space::{builtin_space, GeneSlot, SearchSpaceDef, StageSpace, BUILTIN_SPACES, KEEP_OPTIONS};
