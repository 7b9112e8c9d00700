//! Two-phase evolutionary search over compression genomes.
//!
//! The pruning phase explores one-hot subset selections; the best one is then
//! promoted to a continuous merging genome and refined with Gaussian
//! perturbations. Every iteration draws `epochs_per_iter` children from the
//! top `m_cp` individuals, evaluates them (in parallel), and appends them to
//! the population.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compression::{
    identity_genome, random_pruning_genome, validate_genome, Genome, GroupAssignment, Phase,
};
use crate::error::{Error, Result};
use crate::evaluation::{genome_fitness, Task};
use crate::model::SMoEModel;
use crate::rng;

/// Resample attempts for a conflicting crossover row before falling back to
/// a random unused expert.
const CROSSOVER_RETRIES: usize = 8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchInit {
    /// Random one-hot population, pruning phase then merging phase.
    #[default]
    RandomPruning,
    /// Start from the identity genome and run the merging phase only.
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub retained: usize,
    pub n_groups: usize,
    pub prune_iters: usize,
    pub merge_iters: usize,
    pub epochs_per_iter: usize,
    pub m_cp: usize,
    pub init_population: usize,
    pub mutation_sigma: f64,
    pub prune_mutation_rate: f64,
    /// Probability that crossover copies one parent whole.
    pub p_whole: f64,
    pub init: SearchInit,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            retained: 4,
            n_groups: 4,
            prune_iters: 40,
            merge_iters: 160,
            epochs_per_iter: 16,
            m_cp: 8,
            init_population: 32,
            mutation_sigma: 0.05,
            prune_mutation_rate: 0.3,
            p_whole: 0.25,
            init: SearchInit::RandomPruning,
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("retained", self.retained),
            ("n_groups", self.n_groups),
            ("epochs_per_iter", self.epochs_per_iter),
            ("m_cp", self.m_cp),
            ("init_population", self.init_population),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !(self.mutation_sigma > 0.0 && self.mutation_sigma.is_finite()) {
            return Err(Error::Config("mutation_sigma must be positive".into()));
        }
        if !(self.prune_mutation_rate > 0.0 && self.prune_mutation_rate <= 1.0) {
            return Err(Error::Config(
                "prune_mutation_rate must lie in (0, 1]".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.p_whole) {
            return Err(Error::Config("p_whole must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Individual {
    pub genome: Genome,
    pub fitness: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub phase: Phase,
    pub best_fitness: f64,
    pub evaluations: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchTrace {
    pub records: Vec<TraceRecord>,
}

impl SearchTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,phase,best_fitness,evaluations\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{:?},{}",
                r.iteration, r.phase, r.best_fitness, r.evaluations
            );
        }
        out
    }

    pub fn is_monotone(&self) -> bool {
        self.records
            .windows(2)
            .all(|w| w[1].best_fitness >= w[0].best_fitness)
    }
}

#[derive(Clone, Debug)]
pub struct SearchOutcome {
    /// Highest-fitness individual ever evaluated.
    pub best: Individual,
    /// Best individual when the pruning phase ended, if one ran.
    pub prune_best: Option<Individual>,
    pub trace: SearchTrace,
}

fn check_compatible(a: &Genome, b: &Genome) -> Result<()> {
    let same = a.phase == b.phase
        && a.retained == b.retained
        && a.groups == b.groups
        && a.patterns.len() == b.patterns.len()
        && a.patterns
            .iter()
            .zip(&b.patterns)
            .all(|(p, q)| p.w_rm.shape() == q.w_rm.shape() && p.w_em.shape() == q.w_em.shape());
    if same {
        Ok(())
    } else {
        Err(Error::Genome(
            "crossover parents differ in structure".into(),
        ))
    }
}

fn one_hot_row(row: &mut [f64], expert: usize) {
    row.iter_mut().for_each(|v| *v = 0.0);
    row[expert] = 1.0;
}

fn selected(row: &[f64]) -> usize {
    row.iter().position(|&v| v == 1.0).unwrap_or(0)
}

/// Row-wise recombination of two parents, or a whole copy of one.
pub fn crossover(
    father: &Genome,
    mother: &Genome,
    p_whole: f64,
    rng: &mut impl Rng,
) -> Result<Genome> {
    check_compatible(father, mother)?;
    if rng.random::<f64>() < p_whole {
        return Ok(if rng.random::<bool>() { father } else { mother }.clone());
    }
    let mut child = father.clone();
    let n_experts = father.patterns.first().map_or(0, |p| p.w_em.cols());
    for (g, pattern) in child.patterns.iter_mut().enumerate() {
        let (f, m) = (&father.patterns[g], &mother.patterns[g]);
        match father.phase {
            Phase::Merging => {
                for j in 0..father.retained {
                    let src = if rng.random::<bool>() { f } else { m };
                    pattern.w_rm.row_mut(j).copy_from_slice(src.w_rm.row(j));
                    pattern.w_em.row_mut(j).copy_from_slice(src.w_em.row(j));
                }
            }
            Phase::Pruning => {
                let mut used = vec![false; n_experts];
                for j in 0..father.retained {
                    let options = [selected(f.w_em.row(j)), selected(m.w_em.row(j))];
                    let mut pick = options[usize::from(rng.random::<bool>())];
                    let mut tries = 0;
                    while used[pick] && tries < CROSSOVER_RETRIES {
                        pick = options[usize::from(rng.random::<bool>())];
                        tries += 1;
                    }
                    if used[pick] {
                        let free: Vec<usize> = (0..n_experts).filter(|&e| !used[e]).collect();
                        pick = free[rng.random_range(0..free.len())];
                    }
                    used[pick] = true;
                    one_hot_row(pattern.w_rm.row_mut(j), pick);
                    one_hot_row(pattern.w_em.row_mut(j), pick);
                }
            }
        }
    }
    Ok(child)
}

/// Phase-appropriate random perturbation.
///
/// Pruning genomes swap each row's expert for an unselected one with
/// probability `prune_mutation_rate`; merging genomes get i.i.d. Gaussian
/// noise of std `mutation_sigma` on every coefficient.
pub fn mutate(genome: &Genome, cfg: &SearchConfig, rng: &mut impl Rng) -> Genome {
    let mut out = genome.clone();
    match genome.phase {
        Phase::Pruning => {
            for pattern in &mut out.patterns {
                let n_experts = pattern.w_em.cols();
                for j in 0..pattern.w_em.rows() {
                    if rng.random::<f64>() >= cfg.prune_mutation_rate {
                        continue;
                    }
                    let current: Vec<usize> = (0..pattern.w_em.rows())
                        .map(|r| selected(pattern.w_em.row(r)))
                        .collect();
                    let free: Vec<usize> =
                        (0..n_experts).filter(|e| !current.contains(e)).collect();
                    if free.is_empty() {
                        continue;
                    }
                    let pick = free[rng.random_range(0..free.len())];
                    one_hot_row(pattern.w_rm.row_mut(j), pick);
                    one_hot_row(pattern.w_em.row_mut(j), pick);
                }
            }
        }
        Phase::Merging => {
            let noise = Normal::new(0.0, cfg.mutation_sigma)
                .expect("sigma must be finite and non-negative");
            for pattern in &mut out.patterns {
                for v in pattern.w_rm.data_mut() {
                    *v += noise.sample(rng);
                }
                for v in pattern.w_em.data_mut() {
                    *v += noise.sample(rng);
                }
            }
        }
    }
    out
}

/// Decouples a one-hot optimum into an independent merging genome.
pub fn promote_to_merging(best: &Genome) -> Result<Genome> {
    if best.phase != Phase::Pruning {
        return Err(Error::Genome(format!(
            "only pruning genomes can be promoted, got {}",
            best.phase
        )));
    }
    let mut out = best.clone();
    out.phase = Phase::Merging;
    Ok(out)
}

/// Population plus the bookkeeping shared by both phases.
struct SearchState<'a> {
    model: &'a SMoEModel,
    task: &'a Task,
    cache: HashMap<Vec<u64>, f64>,
    population: Vec<Individual>,
    best: Option<Individual>,
    evaluations: usize,
    trace: SearchTrace,
}

impl<'a> SearchState<'a> {
    /// Scores a batch in parallel; results are independent of evaluation order.
    fn evaluate(&mut self, genomes: Vec<Genome>, context: &str) -> Result<Vec<Individual>> {
        let scores: Vec<f64> = genomes
            .par_iter()
            .enumerate()
            .map(|(i, g)| match self.cache.get(&g.key()) {
                Some(&f) => Ok(f),
                None => genome_fitness(self.model, g, self.task)
                    .map_err(|e| Error::Numeric(format!("{context}, candidate {i}: {e}"))),
            })
            .collect::<Result<_>>()?;
        self.evaluations += genomes.len();
        let individuals: Vec<Individual> = genomes
            .into_iter()
            .zip(scores)
            .map(|(genome, fitness)| Individual { genome, fitness })
            .collect();
        for ind in &individuals {
            self.cache.entry(ind.genome.key()).or_insert(ind.fitness);
            if self.best.as_ref().is_none_or(|b| ind.fitness > b.fitness) {
                self.best = Some(ind.clone());
            }
        }
        Ok(individuals)
    }

    fn record(&mut self, iteration: usize, phase: Phase) {
        let best_fitness = self.best.as_ref().map_or(f64::NEG_INFINITY, |b| b.fitness);
        self.trace.records.push(TraceRecord {
            iteration,
            phase,
            best_fitness,
            evaluations: self.evaluations,
        });
    }

    /// Indices of the top `min(m_cp, |P|)` individuals, ties to the earlier one.
    fn candidate_parents(&self, m_cp: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.population.len()).collect();
        idx.sort_by(|&a, &b| {
            self.population[b]
                .fitness
                .total_cmp(&self.population[a].fitness)
        });
        idx.truncate(m_cp.min(self.population.len()));
        idx
    }

    fn iterate(&mut self, cfg: &SearchConfig, phase_id: u64, t: usize) -> Result<()> {
        let cp = self.candidate_parents(cfg.m_cp);
        let children = (0..cfg.epochs_per_iter)
            .map(|c| {
                let mut r = rng::stream(cfg.seed, &[phase_id, t as u64, c as u64]);
                let f = &self.population[cp[r.random_range(0..cp.len())]].genome;
                let m = &self.population[cp[r.random_range(0..cp.len())]].genome;
                let child = crossover(f, m, cfg.p_whole, &mut r)?;
                Ok(mutate(&child, cfg, &mut r))
            })
            .collect::<Result<Vec<_>>>()?;
        let evaluated = self.evaluate(children, &format!("iteration {t}"))?;
        self.population.extend(evaluated);
        Ok(())
    }
}

const PRUNE_STREAM: u64 = 1;
const RESEED_STREAM: u64 = 2;
const MERGE_STREAM: u64 = 3;

/// Runs the full two-phase search and returns the best individual ever seen.
pub fn search(model: &SMoEModel, task: &Task, cfg: &SearchConfig) -> Result<SearchOutcome> {
    cfg.validate()?;
    let groups = GroupAssignment::uniform(model.config.n_layers, cfg.n_groups)?;
    let mut state = SearchState {
        model,
        task,
        cache: HashMap::new(),
        population: Vec::new(),
        best: None,
        evaluations: 0,
        trace: SearchTrace::default(),
    };

    let mut prune_best = None;
    let merge_seed = match cfg.init {
        SearchInit::RandomPruning => {
            let init = (0..cfg.init_population)
                .map(|i| {
                    let mut r = rng::stream(cfg.seed, &[0, 0, i as u64]);
                    random_pruning_genome(&model.config, &groups, cfg.retained, &mut r)
                })
                .collect::<Result<Vec<_>>>()?;
            state.population = state.evaluate(init, "initial population")?;
            state.record(0, Phase::Pruning);
            for t in 1..=cfg.prune_iters {
                state.iterate(cfg, PRUNE_STREAM, t)?;
                state.record(t, Phase::Pruning);
            }
            let best = state.best.clone().expect("population is non-empty");
            prune_best = Some(best.clone());
            Individual {
                genome: promote_to_merging(&best.genome)?,
                fitness: best.fitness,
            }
        }
        SearchInit::Identity => {
            let genome = identity_genome(&model.config, &groups);
            if cfg.retained != model.config.n_experts {
                return Err(Error::Config(format!(
                    "identity start keeps all {} experts, retained = {}",
                    model.config.n_experts, cfg.retained
                )));
            }
            validate_genome(&genome, &model.config)?;
            let seeded = state.evaluate(vec![genome], "identity genome")?;
            state.population = seeded.clone();
            state.record(0, Phase::Merging);
            seeded.into_iter().next().expect("one genome")
        }
    };

    if cfg.merge_iters > 0 {
        // same compressed model, so same fitness; later phases report merging genomes
        state.best = Some(merge_seed.clone());
        let mutants = (1..cfg.init_population)
            .map(|i| {
                let mut r = rng::stream(cfg.seed, &[RESEED_STREAM, 0, i as u64]);
                mutate(&merge_seed.genome, cfg, &mut r)
            })
            .collect();
        let mut population = vec![merge_seed];
        population.extend(state.evaluate(mutants, "merging population")?);
        state.population = population;
        let offset = match cfg.init {
            SearchInit::RandomPruning => cfg.prune_iters,
            SearchInit::Identity => 0,
        };
        for t in 1..=cfg.merge_iters {
            state.iterate(cfg, MERGE_STREAM, t)?;
            state.record(offset + t, Phase::Merging);
        }
    }

    Ok(SearchOutcome {
        best: state.best.expect("at least one evaluation"),
        prune_best,
        trace: state.trace,
    })
}
