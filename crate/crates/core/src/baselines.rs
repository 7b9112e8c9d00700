//! Comparison pruning methods and the exhaustive certification oracle.
//!
//! All baselines emit per-layer pruning genomes (`n_groups = L`).

use std::fmt::Write as _;

use rand::seq::index::sample;
use rayon::prelude::*;

use crate::compression::{
    compress_block, pruning_genome_from_subsets, random_pruning_genome, Genome, GroupAssignment,
    GroupPattern,
};
use crate::error::{Error, Result};
use crate::evaluation::{genome_fitness, Task};
use crate::evolution::Individual;
use crate::model::{skip_ratio, LayerTrace, RoutingPolicy, SMoEModel};
use crate::rng;
use crate::tensor::{top_k, Matrix};

/// Per-layer subset enumeration limit before subsampling kicks in.
pub const NAEE_ENUMERATION_GUARD: usize = 20_000;
/// Subsets drawn per layer when the guard is exceeded and subsampling is on.
pub const NAEE_SUBSAMPLE: usize = 5_000;
/// Pattern limit for [`brute_force_oracle`].
pub const ORACLE_GUARD: usize = 100_000;
/// Default calibration batch size.
pub const CALIBRATION_SIZE: usize = 64;

/// Probe sequences with the full model's per-layer activations cached.
#[derive(Clone, Debug)]
pub struct CalibrationBatch {
    pub sequences: Vec<Vec<usize>>,
    /// `traces[s][l]` holds layer `l` of sequence `s`.
    pub traces: Vec<Vec<LayerTrace>>,
}

impl CalibrationBatch {
    pub fn collect(model: &SMoEModel, sequences: Vec<Vec<usize>>) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::Config("calibration batch is empty".into()));
        }
        let traces = sequences
            .par_iter()
            .map(|s| model.forward_traced(s).map(|(_, t)| t))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { sequences, traces })
    }

    pub fn n_layers(&self) -> usize {
        self.traces[0].len()
    }

    fn layer_traces(&self, layer: usize) -> impl Iterator<Item = &LayerTrace> {
        self.traces.iter().map(move |t| &t[layer])
    }
}

/// All `r`-subsets of `0..n` in lexicographic order.
pub fn combinations(n: usize, r: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if r > n {
        return out;
    }
    let mut idx: Vec<usize> = (0..r).collect();
    loop {
        out.push(idx.clone());
        let Some(i) = (0..r).rev().find(|&i| idx[i] != i + n - r) else {
            return out;
        };
        idx[i] += 1;
        for j in i + 1..r {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// `C(n, r)` without overflow for the sizes used here, saturating otherwise.
pub fn binomial(n: usize, r: usize) -> usize {
    if r > n {
        return 0;
    }
    let r = r.min(n - r);
    let mut acc: u128 = 1;
    for i in 0..r {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
        if acc > usize::MAX as u128 {
            return usize::MAX;
        }
    }
    acc as usize
}

fn keep_highest(scores: &[f64], retained: usize) -> Result<Vec<usize>> {
    let mut keep = top_k(scores, retained)?;
    keep.sort_unstable();
    Ok(keep)
}

/// Uniformly random subset per layer.
pub fn random_prune(model: &SMoEModel, retained: usize, seed: u64) -> Result<Genome> {
    let mut r = rng::seeded(seed);
    random_pruning_genome(
        &model.config,
        &GroupAssignment::per_layer(model.config.n_layers),
        retained,
        &mut r,
    )
}

/// Number of tokens routed to each expert, per layer.
pub fn activation_counts(probe: &CalibrationBatch) -> Vec<Vec<u64>> {
    (0..probe.n_layers())
        .map(|l| {
            let e = probe.traces[0][l].gates.cols();
            let mut counts = vec![0u64; e];
            for t in probe.layer_traces(l) {
                for route in &t.routes {
                    for &(i, _) in route {
                        counts[i] += 1;
                    }
                }
            }
            counts
        })
        .collect()
}

/// Routing probability mass (before top-k) accumulated per expert, per layer.
pub fn soft_activation_mass(probe: &CalibrationBatch) -> Vec<Vec<f64>> {
    (0..probe.n_layers())
        .map(|l| {
            let e = probe.traces[0][l].gates.cols();
            let mut mass = vec![0.0; e];
            for t in probe.layer_traces(l) {
                for r in 0..t.gates.rows() {
                    for (m, g) in mass.iter_mut().zip(t.gates.row(r)) {
                        *m += g;
                    }
                }
            }
            mass
        })
        .collect()
}

/// Keeps the `retained` most frequently activated experts in each layer.
pub fn frequency_prune(
    model: &SMoEModel,
    probe: &CalibrationBatch,
    retained: usize,
) -> Result<Genome> {
    let subsets = activation_counts(probe)
        .iter()
        .map(|c| {
            let scores: Vec<f64> = c.iter().map(|&v| v as f64).collect();
            keep_highest(&scores, retained)
        })
        .collect::<Result<Vec<_>>>()?;
    pruning_genome_from_subsets(
        &model.config,
        &GroupAssignment::per_layer(model.config.n_layers),
        &subsets,
    )
}

/// Keeps the `retained` experts with the largest accumulated routing mass.
pub fn soft_activation_prune(
    model: &SMoEModel,
    probe: &CalibrationBatch,
    retained: usize,
) -> Result<Genome> {
    let subsets = soft_activation_mass(probe)
        .iter()
        .map(|m| keep_highest(m, retained))
        .collect::<Result<Vec<_>>>()?;
    pruning_genome_from_subsets(
        &model.config,
        &GroupAssignment::per_layer(model.config.n_layers),
        &subsets,
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct NaeeAuditRow {
    pub layer: usize,
    pub subset: Vec<usize>,
    pub discrepancy: f64,
}

#[derive(Clone, Debug)]
pub struct NaeeResult {
    pub genome: Genome,
    /// Every evaluated subset, in enumeration order per layer.
    pub audit: Vec<NaeeAuditRow>,
}

impl NaeeResult {
    pub fn audit_csv(&self) -> String {
        let mut out = String::from("layer,subset,discrepancy\n");
        for row in &self.audit {
            let _ = writeln!(
                out,
                "{},{},{:?}",
                row.layer,
                join(&row.subset, "-"),
                row.discrepancy
            );
        }
        out
    }
}

fn join(v: &[usize], sep: &str) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(sep)
}

fn mean_squared(a: &Matrix, b: &Matrix) -> (f64, usize) {
    let sum = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    (sum, a.data().len())
}

/// Greedy front-to-back per-layer enumeration minimizing the expert-layer
/// output discrepancy against the full model on the calibration batch.
///
/// Earlier layers are already pruned when later layers are scored. When
/// `C(E, retained)` exceeds [`NAEE_ENUMERATION_GUARD`], `subsample_seed`
/// enables scoring [`NAEE_SUBSAMPLE`] random subsets instead; without it the
/// call fails.
pub fn naee_prune(
    model: &SMoEModel,
    calib: &CalibrationBatch,
    retained: usize,
    subsample_seed: Option<u64>,
) -> Result<NaeeResult> {
    let cfg = &model.config;
    if retained < cfg.top_k || retained > cfg.n_experts {
        return Err(Error::OutOfRange(format!(
            "retained = {retained} must lie in {}..={}",
            cfg.top_k, cfg.n_experts
        )));
    }
    let total = binomial(cfg.n_experts, retained);
    let mut candidates = if total <= NAEE_ENUMERATION_GUARD {
        combinations(cfg.n_experts, retained)
    } else {
        let Some(seed) = subsample_seed else {
            return Err(Error::Guard(format!(
                "C({}, {retained}) = {total} subsets per layer exceeds {NAEE_ENUMERATION_GUARD}",
                cfg.n_experts
            )));
        };
        let mut r = rng::seeded(seed);
        (0..NAEE_SUBSAMPLE)
            .map(|_| {
                let mut s = sample(&mut r, cfg.n_experts, retained).into_vec();
                s.sort_unstable();
                s
            })
            .collect()
    };
    candidates.dedup();

    let mut xs: Vec<Matrix> = calib
        .sequences
        .iter()
        .map(|s| model.embed(s))
        .collect::<Result<_>>()?;
    let mut chosen = Vec::with_capacity(cfg.n_layers);
    let mut audit = Vec::new();
    for (layer, block) in model.blocks.iter().enumerate() {
        let ys: Vec<Matrix> = xs
            .iter()
            .map(|x| x.add(&block.attention(x)?))
            .collect::<Result<_>>()?;
        let scored: Vec<(f64, Vec<Matrix>)> = candidates
            .par_iter()
            .map(|subset| {
                let pruned =
                    compress_block(block, &GroupPattern::selection(subset, cfg.n_experts))?;
                let mut sum = 0.0;
                let mut count = 0;
                let mut outputs = Vec::with_capacity(ys.len());
                for (y, full) in ys.iter().zip(calib.layer_traces(layer)) {
                    let h = pruned.moe(&pruned.route(y)?, y, cfg.top_k)?;
                    let (s, n) = mean_squared(&h, &full.moe_output);
                    sum += s;
                    count += n;
                    outputs.push(h);
                }
                Ok((sum / count as f64, outputs))
            })
            .collect::<Result<_>>()?;
        let mut best = 0;
        for (i, (d, _)) in scored.iter().enumerate() {
            audit.push(NaeeAuditRow {
                layer,
                subset: candidates[i].clone(),
                discrepancy: *d,
            });
            if *d < scored[best].0 {
                best = i;
            }
        }
        let (_, outputs) = &scored[best];
        xs = ys
            .iter()
            .zip(outputs)
            .map(|(y, h)| y.add(h))
            .collect::<Result<_>>()?;
        chosen.push(candidates[best].clone());
    }
    let genome =
        pruning_genome_from_subsets(cfg, &GroupAssignment::per_layer(cfg.n_layers), &chosen)?;
    Ok(NaeeResult { genome, audit })
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Per-layer median of `second / first` routing weight over the probe.
pub fn dynamic_skip_calibrate(model: &SMoEModel, probe: &CalibrationBatch) -> Result<Vec<f64>> {
    if model.config.top_k != 2 {
        return Err(Error::Config(format!(
            "dynamic skipping needs top-2 routing, model uses top-{}",
            model.config.top_k
        )));
    }
    (0..probe.n_layers())
        .map(|l| {
            let mut ratios = Vec::new();
            for t in probe.layer_traces(l) {
                for r in 0..t.gates.rows() {
                    let row = t.gates.row(r);
                    let idx = top_k(row, 2)?;
                    ratios.push(skip_ratio(row[idx[0]], row[idx[1]]));
                }
            }
            Ok(median(&mut ratios))
        })
        .collect()
}

/// Forward pass with dynamic skipping; returns logits and the mean number of
/// active experts per token and layer.
pub fn dynamic_skip_forward(
    model: &SMoEModel,
    thresholds: &[f64],
    tokens: &[usize],
) -> Result<(Matrix, f64)> {
    if thresholds.len() != model.config.n_layers {
        return Err(Error::Config(format!(
            "{} thresholds for {} layers",
            thresholds.len(),
            model.config.n_layers
        )));
    }
    let (logits, traces) =
        model.forward_with_policy(tokens, RoutingPolicy::DynamicSkip(thresholds))?;
    let (active, slots) = active_totals(&traces);
    Ok((logits, active as f64 / slots as f64))
}

fn active_totals(traces: &[LayerTrace]) -> (usize, usize) {
    let active = traces.iter().flat_map(|t| &t.routes).map(Vec::len).sum();
    let slots = traces.iter().map(|t| t.routes.len()).sum();
    (active, slots)
}

/// Mean active experts per token-layer over a set of sequences.
pub fn dynamic_skip_average(
    model: &SMoEModel,
    thresholds: &[f64],
    probe: &[Vec<usize>],
) -> Result<f64> {
    let totals = probe
        .par_iter()
        .map(|s| {
            let (_, traces) =
                model.forward_with_policy(s, RoutingPolicy::DynamicSkip(thresholds))?;
            Ok(active_totals(&traces))
        })
        .collect::<Result<Vec<_>>>()?;
    let (a, s) = totals
        .iter()
        .fold((0, 0), |acc, t| (acc.0 + t.0, acc.1 + t.1));
    Ok(a as f64 / s as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleRow {
    pub pattern_id: usize,
    pub subsets: Vec<Vec<usize>>,
    pub fitness: f64,
}

#[derive(Clone, Debug)]
pub struct OracleResult {
    pub best: Individual,
    pub table: Vec<OracleRow>,
}

impl OracleResult {
    pub fn table_csv(&self) -> String {
        let mut out = String::from("pattern_id,subsets,fitness\n");
        for row in &self.table {
            let subsets: Vec<String> = row.subsets.iter().map(|s| join(s, "-")).collect();
            let _ = writeln!(
                out,
                "{},{},{:?}",
                row.pattern_id,
                subsets.join("|"),
                row.fitness
            );
        }
        out
    }
}

/// Scores every group-shared pruning pattern and returns the argmax.
pub fn brute_force_oracle(
    model: &SMoEModel,
    task: &Task,
    retained: usize,
    groups: &GroupAssignment,
) -> Result<OracleResult> {
    let cfg = &model.config;
    let combos = combinations(cfg.n_experts, retained);
    let total = (0..groups.n_groups).try_fold(1usize, |acc, _| acc.checked_mul(combos.len()));
    let total = match total {
        Some(t) if t <= ORACLE_GUARD && !combos.is_empty() => t,
        _ => {
            return Err(Error::Guard(format!(
                "C({}, {retained})^{} patterns exceeds {ORACLE_GUARD}",
                cfg.n_experts, groups.n_groups
            )))
        }
    };
    let table = (0..total)
        .into_par_iter()
        .map(|id| {
            // mixed radix, group 0 most significant
            let mut rest = id;
            let mut subsets = vec![Vec::new(); groups.n_groups];
            for g in (0..groups.n_groups).rev() {
                subsets[g] = combos[rest % combos.len()].clone();
                rest /= combos.len();
            }
            let genome = pruning_genome_from_subsets(cfg, groups, &subsets)?;
            let fitness = genome_fitness(model, &genome, task)?;
            Ok(OracleRow {
                pattern_id: id,
                subsets,
                fitness,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut best = 0;
    for (i, row) in table.iter().enumerate() {
        if row.fitness > table[best].fitness {
            best = i;
        }
    }
    let genome = pruning_genome_from_subsets(cfg, groups, &table[best].subsets)?;
    Ok(OracleResult {
        best: Individual {
            genome,
            fitness: table[best].fitness,
        },
        table,
    })
}
