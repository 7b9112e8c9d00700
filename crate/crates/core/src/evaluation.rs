//! Teacher-derived fitness tasks and expert-activation statistics.

use std::fmt::Write as _;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compression::{apply_genome, Genome};
use crate::error::{Error, Result};
use crate::model::{SMoEModel, TokenRoute};
use crate::rng;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Negative mean squared error against the teacher logits.
    TeacherLogitMatch,
    /// Fraction of positions whose argmax matches the teacher label.
    TeacherLabelAccuracy,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalPositions {
    #[default]
    Final,
    All,
}

impl EvalPositions {
    fn indices(self, len: usize) -> std::ops::Range<usize> {
        match self {
            EvalPositions::Final => len - 1..len,
            EvalPositions::All => 0..len,
        }
    }
}

/// Probe sequences with the base model's cached outputs at the scored positions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub kind: TaskKind,
    pub eval_positions: EvalPositions,
    pub probe_tokens: Vec<Vec<usize>>,
    /// Teacher logits per sequence, one row per scored position.
    pub teacher_logits: Vec<Matrix>,
    /// Teacher argmax labels per sequence.
    pub teacher_labels: Vec<Vec<usize>>,
}

/// Index of the largest entry, ties to the lower index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Uniformly random token sequences drawn from a seeded stream.
pub fn random_sequences(
    vocab_size: usize,
    n_sequences: usize,
    seq_len: usize,
    seed: u64,
) -> Vec<Vec<usize>> {
    let mut rng = rng::seeded(seed);
    (0..n_sequences)
        .map(|_| {
            (0..seq_len)
                .map(|_| rng.random_range(0..vocab_size))
                .collect()
        })
        .collect()
}

impl Task {
    /// Builds a task whose targets are `teacher`'s own outputs.
    pub fn from_teacher(
        teacher: &SMoEModel,
        kind: TaskKind,
        eval_positions: EvalPositions,
        probe_tokens: Vec<Vec<usize>>,
    ) -> Result<Self> {
        if probe_tokens.is_empty() {
            return Err(Error::Config(
                "task needs at least one probe sequence".into(),
            ));
        }
        let cached: Vec<Matrix> = probe_tokens
            .par_iter()
            .map(|seq| {
                let logits = teacher.forward(seq)?;
                let rows: Vec<usize> = eval_positions.indices(seq.len()).collect();
                Ok(logits.gather_rows(&rows))
            })
            .collect::<Result<_>>()?;
        let teacher_labels = cached
            .iter()
            .map(|m| (0..m.rows()).map(|r| argmax(m.row(r))).collect())
            .collect();
        Ok(Self {
            kind,
            eval_positions,
            probe_tokens,
            teacher_logits: cached,
            teacher_labels,
        })
    }

    pub fn n_scored(&self) -> usize {
        self.teacher_labels.iter().map(Vec::len).sum()
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }
}

/// Random probe of `n_sequences × seq_len` tokens scored at the final position.
pub fn make_task(
    model: &SMoEModel,
    kind: TaskKind,
    n_sequences: usize,
    seq_len: usize,
    seed: u64,
) -> Result<Task> {
    if seq_len == 0 || seq_len > model.config.max_seq_len {
        return Err(Error::Config(format!(
            "seq_len = {seq_len} must lie in 1..={}",
            model.config.max_seq_len
        )));
    }
    let probe = random_sequences(model.config.vocab_size, n_sequences, seq_len, seed);
    Task::from_teacher(model, kind, EvalPositions::Final, probe)
}

/// Task score of `model`; higher is better.
pub fn fitness(model: &SMoEModel, task: &Task) -> Result<f64> {
    if model.config.vocab_size != task.teacher_logits[0].cols() {
        return Err(Error::Shape {
            op: "fitness",
            left: (1, model.config.vocab_size),
            right: task.teacher_logits[0].shape(),
        });
    }
    // per-sequence partial sums, reduced in sequence order
    let partials: Vec<f64> = task
        .probe_tokens
        .par_iter()
        .enumerate()
        .map(|(s, seq)| {
            let logits = model.forward(seq)?;
            let mut acc = 0.0;
            for (r, pos) in task.eval_positions.indices(seq.len()).enumerate() {
                let row = logits.row(pos);
                match task.kind {
                    TaskKind::TeacherLabelAccuracy => {
                        if argmax(row) == task.teacher_labels[s][r] {
                            acc += 1.0;
                        }
                    }
                    TaskKind::TeacherLogitMatch => {
                        let target = task.teacher_logits[s].row(r);
                        acc += row
                            .iter()
                            .zip(target)
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>();
                    }
                }
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let total: f64 = partials.iter().sum();
    let n = task.n_scored() as f64;
    let score = match task.kind {
        TaskKind::TeacherLabelAccuracy => total / n,
        TaskKind::TeacherLogitMatch => -total / (n * model.config.vocab_size as f64),
    };
    if !score.is_finite() {
        return Err(Error::Numeric(format!("non-finite fitness {score}")));
    }
    Ok(score)
}

/// Fitness of `model` compressed by `genome`.
pub fn genome_fitness(model: &SMoEModel, genome: &Genome, task: &Task) -> Result<f64> {
    fitness(&apply_genome(model, genome)?, task)
}

/// Activation statistics of one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub n_tokens: u64,
    pub activation_counts: Vec<u64>,
    pub accumulated_weights: Vec<f64>,
    /// Pearson correlation of per-token 0/1 activation indicators.
    pub activation_correlation: Matrix,
    /// `true` where the correlation is undefined (a zero-variance indicator)
    /// and reported as 0.
    pub degenerate: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertStats {
    pub layers: Vec<LayerStats>,
}

/// Mergeable running sums behind [`ExpertStats`].
#[derive(Clone, Debug)]
pub struct StatsAccumulator {
    n_experts: usize,
    tokens: Vec<u64>,
    counts: Vec<Vec<u64>>,
    weights: Vec<Vec<f64>>,
    coactivations: Vec<Vec<u64>>,
}

impl StatsAccumulator {
    pub fn new(n_layers: usize, n_experts: usize) -> Self {
        Self {
            n_experts,
            tokens: vec![0; n_layers],
            counts: vec![vec![0; n_experts]; n_layers],
            weights: vec![vec![0.0; n_experts]; n_layers],
            coactivations: vec![vec![0; n_experts * n_experts]; n_layers],
        }
    }

    pub fn observe(&mut self, layer: usize, route: &TokenRoute) {
        let e = self.n_experts;
        self.tokens[layer] += 1;
        for &(i, w) in route {
            self.counts[layer][i] += 1;
            self.weights[layer][i] += w;
            for &(j, _) in route {
                self.coactivations[layer][i * e + j] += 1;
            }
        }
    }

    pub fn merge(&mut self, other: &StatsAccumulator) {
        for l in 0..self.tokens.len() {
            self.tokens[l] += other.tokens[l];
            for (a, b) in self.counts[l].iter_mut().zip(&other.counts[l]) {
                *a += b;
            }
            for (a, b) in self.weights[l].iter_mut().zip(&other.weights[l]) {
                *a += b;
            }
            for (a, b) in self.coactivations[l]
                .iter_mut()
                .zip(&other.coactivations[l])
            {
                *a += b;
            }
        }
    }

    pub fn finish(&self) -> ExpertStats {
        let e = self.n_experts;
        let layers = (0..self.tokens.len())
            .map(|l| {
                let n = self.tokens[l] as f64;
                let s: Vec<f64> = self.counts[l].iter().map(|&c| c as f64).collect();
                // n·Var = n·s_i − s_i²
                let var: Vec<f64> = s.iter().map(|&si| n * si - si * si).collect();
                let degenerate: Vec<bool> = var.iter().map(|&v| v <= 0.0).collect();
                let corr = Matrix::from_fn(e, e, |i, j| {
                    if degenerate[i] || degenerate[j] {
                        return 0.0;
                    }
                    if i == j {
                        return 1.0;
                    }
                    let sij = self.coactivations[l][i * e + j] as f64;
                    (n * sij - s[i] * s[j]) / (var[i] * var[j]).sqrt()
                });
                LayerStats {
                    n_tokens: self.tokens[l],
                    activation_counts: self.counts[l].clone(),
                    accumulated_weights: self.weights[l].clone(),
                    activation_correlation: corr,
                    degenerate,
                }
            })
            .collect();
        ExpertStats { layers }
    }
}

/// Routing statistics of `model` over every token of every probe sequence.
pub fn collect_expert_stats(model: &SMoEModel, probe_tokens: &[Vec<usize>]) -> Result<ExpertStats> {
    if probe_tokens.is_empty() {
        return Err(Error::Config(
            "statistics need at least one probe sequence".into(),
        ));
    }
    let n_layers = model.config.n_layers;
    let e = model.config.n_experts;
    let acc = probe_tokens
        .par_iter()
        .map(|seq| {
            let (_, traces) = model.forward_traced(seq)?;
            let mut acc = StatsAccumulator::new(n_layers, e);
            for (l, t) in traces.iter().enumerate() {
                for route in &t.routes {
                    acc.observe(l, route);
                }
            }
            Ok(acc)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(StatsAccumulator::new(n_layers, e), |mut a, b| {
            a.merge(&b);
            a
        });
    Ok(acc.finish())
}

impl ExpertStats {
    /// One block per layer: counts, weights, then the correlation and mask rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let e = self.layers.first().map_or(0, |l| l.activation_counts.len());
        out.push_str("layer,row");
        for i in 0..e {
            let _ = write!(out, ",e{i}");
        }
        out.push('\n');
        for (l, s) in self.layers.iter().enumerate() {
            let line = |out: &mut String, name: &str, vals: Vec<String>| {
                let _ = writeln!(out, "{l},{name},{}", vals.join(","));
            };
            line(
                &mut out,
                "counts",
                s.activation_counts.iter().map(u64::to_string).collect(),
            );
            line(
                &mut out,
                "weights",
                s.accumulated_weights.iter().map(f64::to_string).collect(),
            );
            for i in 0..e {
                line(
                    &mut out,
                    &format!("corr{i}"),
                    s.activation_correlation
                        .row(i)
                        .iter()
                        .map(f64::to_string)
                        .collect(),
                );
            }
            line(
                &mut out,
                "degenerate",
                s.degenerate
                    .iter()
                    .map(|&d| u8::from(d).to_string())
                    .collect(),
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compression::{identity_genome, GroupAssignment};
    use crate::model::ModelConfig;

    fn model() -> SMoEModel {
        SMoEModel::random(&ModelConfig::tiny(), 17).unwrap()
    }

    #[test]
    fn task_is_deterministic_and_self_consistent() {
        let m = model();
        let a = make_task(&m, TaskKind::TeacherLabelAccuracy, 16, 6, 3).unwrap();
        let b = make_task(&m, TaskKind::TeacherLabelAccuracy, 16, 6, 3).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        assert!(a.teacher_labels.iter().flatten().all(|&l| l < 32));
        assert_eq!(fitness(&m, &a).unwrap(), 1.0);
        let lm = make_task(&m, TaskKind::TeacherLogitMatch, 16, 6, 3).unwrap();
        assert_eq!(fitness(&m, &lm).unwrap(), 0.0);
        assert!(make_task(&m, TaskKind::TeacherLogitMatch, 4, 17, 3).is_err());
    }

    #[test]
    fn identity_compression_keeps_fitness() {
        let m = model();
        let task = make_task(&m, TaskKind::TeacherLogitMatch, 8, 5, 1).unwrap();
        let c = apply_genome(
            &m,
            &identity_genome(&m.config, &GroupAssignment::per_layer(2)),
        )
        .unwrap();
        assert!((fitness(&c, &task).unwrap() - fitness(&m, &task).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn zero_model_logit_fitness_is_negative_teacher_energy() {
        let m = model();
        let task = make_task(&m, TaskKind::TeacherLogitMatch, 8, 5, 2).unwrap();
        let zero = SMoEModel::zeros(&m.config).unwrap();
        let mut sum = 0.0;
        let mut count = 0.0;
        for t in &task.teacher_logits {
            for v in t.data() {
                sum += v * v;
                count += 1.0;
            }
        }
        assert!((fitness(&zero, &task).unwrap() + sum / count).abs() <= 1e-12);
    }

    #[test]
    fn fitness_is_bitwise_repeatable() {
        let m = model();
        let other = SMoEModel::random(&m.config, 18).unwrap();
        let task = make_task(&m, TaskKind::TeacherLogitMatch, 8, 5, 2).unwrap();
        let a = fitness(&other, &task).unwrap();
        let b = fitness(&other, &task).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn stats_conservation() {
        let m = model();
        let probe = random_sequences(32, 10, 8, 4);
        let stats = collect_expert_stats(&m, &probe).unwrap();
        for l in &stats.layers {
            assert_eq!(l.n_tokens, 80);
            assert_eq!(l.activation_counts.iter().sum::<u64>(), 160);
            assert!((l.accumulated_weights.iter().sum::<f64>() - 80.0).abs() <= 1e-9);
            let c = &l.activation_correlation;
            for i in 0..4 {
                for j in 0..4 {
                    assert_eq!(c.get(i, j), c.get(j, i));
                }
                if !l.degenerate[i] {
                    assert_eq!(c.get(i, i), 1.0);
                }
            }
        }
        assert!(stats.to_csv().lines().count() > 1);
    }

    #[test]
    fn always_selected_expert_is_flagged() {
        let mut acc = StatsAccumulator::new(1, 3);
        acc.observe(0, &vec![(0, 0.6), (1, 0.4)]);
        acc.observe(0, &vec![(0, 0.7), (2, 0.3)]);
        acc.observe(0, &vec![(0, 0.5), (1, 0.5)]);
        let s = acc.finish();
        let l = &s.layers[0];
        assert_eq!(l.degenerate, vec![true, false, false]);
        assert_eq!(l.activation_correlation.get(0, 1), 0.0);
        assert_eq!(l.activation_correlation.get(0, 0), 0.0);
        assert!((l.activation_correlation.get(1, 2) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn sharded_accumulation_matches_single_pass() {
        let routes: Vec<TokenRoute> = (0..50)
            .map(|t| {
                vec![
                    (t % 4, 0.7),
                    ((t / 4) % 3 + if (t / 4) % 3 >= t % 4 { 1 } else { 0 }, 0.3),
                ]
            })
            .collect();
        let mut whole = StatsAccumulator::new(1, 4);
        let mut a = StatsAccumulator::new(1, 4);
        let mut b = StatsAccumulator::new(1, 4);
        for (i, r) in routes.iter().enumerate() {
            whole.observe(0, r);
            if i < 20 {
                a.observe(0, r)
            } else {
                b.observe(0, r)
            }
        }
        a.merge(&b);
        let (x, y) = (whole.finish(), a.finish());
        assert_eq!(x.layers[0].activation_counts, y.layers[0].activation_counts);
        assert_eq!(
            x.layers[0].activation_correlation,
            y.layers[0].activation_correlation
        );
    }
}
