//! Router-mapping / expert-merging parameterization of a compressed model.
//!
//! Every layer group carries a pair `(W_RM, W_EM)` of shape `E'×E`. Row `j` of
//! `W_EM` builds new expert `j` as a linear combination of the original
//! experts; `W_RM` maps the original routing weights onto the `E'` new ones.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ExpertWeights, ModelConfig, SMoEBlock, SMoEModel};
use crate::tensor::{matmul, Matrix};

pub const GENOME_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    /// One-hot, distinct rows with `W_RM = W_EM`: pure subset selection.
    Pruning,
    /// Continuous, decoupled coefficients.
    Merging,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Phase::Pruning => f.write_str("pruning"),
            Phase::Merging => f.write_str("merging"),
        }
    }
}

/// Contiguous partition of layers into groups that share one pattern.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupAssignment {
    pub n_groups: usize,
    pub layer_to_group: Vec<usize>,
}

impl GroupAssignment {
    /// Layer `l` goes to group `⌊l·n_groups/L⌋`.
    pub fn uniform(n_layers: usize, n_groups: usize) -> Result<Self> {
        if n_groups == 0 || n_groups > n_layers {
            return Err(Error::Config(format!(
                "n_groups = {n_groups} must lie in 1..={n_layers}"
            )));
        }
        Ok(Self {
            n_groups,
            layer_to_group: (0..n_layers).map(|l| l * n_groups / n_layers).collect(),
        })
    }

    pub fn per_layer(n_layers: usize) -> Self {
        Self {
            n_groups: n_layers,
            layer_to_group: (0..n_layers).collect(),
        }
    }

    pub fn n_layers(&self) -> usize {
        self.layer_to_group.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupPattern {
    pub w_rm: Matrix,
    pub w_em: Matrix,
}

impl GroupPattern {
    /// One-hot rows selecting `experts` (in row order), shared by both matrices.
    pub fn selection(experts: &[usize], n_experts: usize) -> Self {
        let m = Matrix::from_fn(experts.len(), n_experts, |r, c| {
            if experts[r] == c {
                1.0
            } else {
                0.0
            }
        });
        Self {
            w_rm: m.clone(),
            w_em: m,
        }
    }

    /// Expert chosen by each row when every row is one-hot.
    pub fn selected_experts(&self) -> Option<Vec<usize>> {
        (0..self.w_em.rows())
            .map(|r| one_hot_index(self.w_em.row(r)))
            .collect()
    }
}

fn one_hot_index(row: &[f64]) -> Option<usize> {
    let mut hit = None;
    for (i, &v) in row.iter().enumerate() {
        if v == 1.0 {
            if hit.is_some() {
                return None;
            }
            hit = Some(i);
        } else if v != 0.0 {
            return None;
        }
    }
    hit
}

/// One candidate compression pattern: the unit of evolutionary search.
#[derive(Clone, Debug, PartialEq)]
pub struct Genome {
    pub phase: Phase,
    pub retained: usize,
    pub groups: GroupAssignment,
    pub patterns: Vec<GroupPattern>,
}

/// First invariant violation found by [`validate_genome`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub group: Option<usize>,
    pub row: Option<usize>,
    pub message: String,
}

impl Violation {
    fn new(message: impl Into<String>) -> Self {
        Self {
            group: None,
            row: None,
            message: message.into(),
        }
    }

    fn at(group: usize, row: Option<usize>, message: impl Into<String>) -> Self {
        Self {
            group: Some(group),
            row,
            message: message.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)?;
        if let Some(r) = self.row {
            write!(f, " (row {r})")?;
        }
        Ok(())
    }
}

impl From<Violation> for Error {
    fn from(v: Violation) -> Self {
        Error::Genome(v.to_string())
    }
}

/// Every group keeps all experts with identity matrices.
pub fn identity_genome(config: &ModelConfig, groups: &GroupAssignment) -> Genome {
    let e = config.n_experts;
    Genome {
        phase: Phase::Merging,
        retained: e,
        groups: groups.clone(),
        patterns: vec![
            GroupPattern {
                w_rm: Matrix::identity(e),
                w_em: Matrix::identity(e),
            };
            groups.n_groups
        ],
    }
}

fn check_retained(config: &ModelConfig, retained: usize) -> Result<()> {
    if retained == 0 || retained > config.n_experts {
        return Err(Error::OutOfRange(format!(
            "retained = {retained} must lie in 1..={}",
            config.n_experts
        )));
    }
    if retained < config.top_k {
        return Err(Error::OutOfRange(format!(
            "retained = {retained} is below top_k = {}",
            config.top_k
        )));
    }
    Ok(())
}

/// Uniformly random `retained`-subset per group, as ascending one-hot rows.
pub fn random_pruning_genome(
    config: &ModelConfig,
    groups: &GroupAssignment,
    retained: usize,
    rng: &mut impl Rng,
) -> Result<Genome> {
    check_retained(config, retained)?;
    let patterns = (0..groups.n_groups)
        .map(|_| {
            let mut subset = sample(rng, config.n_experts, retained).into_vec();
            subset.sort_unstable();
            GroupPattern::selection(&subset, config.n_experts)
        })
        .collect();
    Ok(Genome {
        phase: Phase::Pruning,
        retained,
        groups: groups.clone(),
        patterns,
    })
}

/// Pruning genome from explicit per-group subsets.
pub fn pruning_genome_from_subsets(
    config: &ModelConfig,
    groups: &GroupAssignment,
    subsets: &[Vec<usize>],
) -> Result<Genome> {
    let retained = subsets.first().map_or(0, Vec::len);
    check_retained(config, retained)?;
    if subsets.len() != groups.n_groups {
        return Err(Error::Genome(format!(
            "{} subsets for {} groups",
            subsets.len(),
            groups.n_groups
        )));
    }
    let genome = Genome {
        phase: Phase::Pruning,
        retained,
        groups: groups.clone(),
        patterns: subsets
            .iter()
            .map(|s| GroupPattern::selection(s, config.n_experts))
            .collect(),
    };
    validate_genome(&genome, config)?;
    Ok(genome)
}

/// Checks every genome invariant against `config`, reporting the first violation.
pub fn validate_genome(
    genome: &Genome,
    config: &ModelConfig,
) -> std::result::Result<(), Violation> {
    let groups = &genome.groups;
    if groups.n_layers() != config.n_layers {
        return Err(Violation::new(format!(
            "group assignment covers {} layers, model has {}",
            groups.n_layers(),
            config.n_layers
        )));
    }
    match GroupAssignment::uniform(config.n_layers, groups.n_groups) {
        Ok(expected) if expected == *groups => {}
        _ => {
            return Err(Violation::new(
                "layer_to_group is not the contiguous uniform partition",
            ))
        }
    }
    if genome.patterns.len() != groups.n_groups {
        return Err(Violation::new(format!(
            "{} patterns for {} groups",
            genome.patterns.len(),
            groups.n_groups
        )));
    }
    let e = config.n_experts;
    if genome.retained == 0 || genome.retained > e {
        return Err(Violation::new(format!(
            "retained = {} must lie in 1..={e}",
            genome.retained
        )));
    }
    if genome.retained < config.top_k {
        return Err(Violation::new(format!(
            "retained = {} is below top_k = {}",
            genome.retained, config.top_k
        )));
    }
    for (g, p) in genome.patterns.iter().enumerate() {
        let shape = (genome.retained, e);
        if p.w_rm.shape() != shape || p.w_em.shape() != shape {
            return Err(Violation::at(
                g,
                None,
                format!("pattern shape mismatch in group {g}, expected {shape:?}"),
            ));
        }
        match genome.phase {
            Phase::Pruning => {
                if p.w_rm != p.w_em {
                    return Err(Violation::at(
                        g,
                        None,
                        format!("W_RM differs from W_EM in group {g}"),
                    ));
                }
                let mut seen = vec![false; e];
                for r in 0..genome.retained {
                    let Some(idx) = one_hot_index(p.w_em.row(r)) else {
                        return Err(Violation::at(
                            g,
                            Some(r),
                            format!("non one-hot row in group {g}"),
                        ));
                    };
                    if seen[idx] {
                        return Err(Violation::at(
                            g,
                            Some(r),
                            format!("duplicate expert in group {g}"),
                        ));
                    }
                    seen[idx] = true;
                }
            }
            Phase::Merging => {
                for (name, m) in [("W_RM", &p.w_rm), ("W_EM", &p.w_em)] {
                    if let Some(pos) = m.data().iter().position(|v| !v.is_finite()) {
                        return Err(Violation::at(
                            g,
                            Some(pos / e),
                            format!("non-finite {name} entry in group {g}"),
                        ));
                    }
                }
            }
        }
    }
    Ok(())
}

/// `Σᵢ ω_ji W_i`, accumulated in ascending `i` from zero.
pub fn merge_matrices(coeffs: &[f64], mats: &[&Matrix]) -> Result<Matrix> {
    let (rows, cols) = mats[0].shape();
    let mut out = Matrix::zeros(rows, cols);
    for (&w, m) in coeffs.iter().zip(mats) {
        out.add_scaled(w, m)?;
    }
    Ok(out)
}

/// Applies one `(W_RM, W_EM)` pair to a block.
pub fn compress_block(block: &SMoEBlock, pattern: &GroupPattern) -> Result<SMoEBlock> {
    let w1: Vec<&Matrix> = block.experts.iter().map(|e| &e.w1).collect();
    let w2: Vec<&Matrix> = block.experts.iter().map(|e| &e.w2).collect();
    let w3: Vec<&Matrix> = block.experts.iter().map(|e| &e.w3).collect();
    let experts = (0..pattern.w_em.rows())
        .map(|j| {
            let row = pattern.w_em.row(j);
            Ok(ExpertWeights {
                w1: merge_matrices(row, &w1)?,
                w2: merge_matrices(row, &w2)?,
                w3: merge_matrices(row, &w3)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let router_map = match &block.router_map {
        None => pattern.w_rm.clone(),
        Some(prev) => matmul(&pattern.w_rm, prev)?,
    };
    Ok(SMoEBlock {
        router_map: Some(router_map),
        experts,
        ..block.clone_attention()
    })
}

/// Builds the compressed model: merged experts plus a stored router map.
pub fn apply_genome(model: &SMoEModel, genome: &Genome) -> Result<SMoEModel> {
    validate_genome(genome, &model.config)?;
    let blocks = model
        .blocks
        .iter()
        .enumerate()
        .map(|(layer, block)| {
            compress_block(block, &genome.patterns[genome.groups.layer_to_group[layer]])
        })
        .collect::<Result<Vec<_>>>()?;
    let mut config = model.config.clone();
    config.n_experts = genome.retained;
    config.validate()?;
    Ok(SMoEModel {
        config,
        embedding: model.embedding.clone(),
        blocks,
        head: model.head.clone(),
    })
}

#[derive(Serialize, Deserialize)]
struct GenomeFile {
    format_version: u32,
    phase: Phase,
    retained: usize,
    n_groups: usize,
    layer_to_group: Vec<usize>,
    patterns: Vec<GroupPattern>,
}

impl Genome {
    /// Bit patterns of every coefficient; equal keys mean identical genomes.
    pub fn key(&self) -> Vec<u64> {
        let mut key = vec![self.phase as u64, self.retained as u64];
        for p in &self.patterns {
            key.extend(p.w_rm.data().iter().map(|v| v.to_bits()));
            key.extend(p.w_em.data().iter().map(|v| v.to_bits()));
        }
        key
    }

    /// Per-group selected experts for a pruning genome.
    pub fn subsets(&self) -> Option<Vec<Vec<usize>>> {
        self.patterns
            .iter()
            .map(GroupPattern::selected_experts)
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let file = GenomeFile {
            format_version: GENOME_FORMAT_VERSION,
            phase: self.phase,
            retained: self.retained,
            n_groups: self.groups.n_groups,
            layer_to_group: self.groups.layer_to_group.clone(),
            patterns: self.patterns.clone(),
        };
        serde_json::to_string_pretty(&file).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Parses a genome without checking it against a model config.
    pub fn from_json(text: &str) -> Result<Self> {
        let file: GenomeFile =
            serde_json::from_str(text).map_err(|e| Error::Parse(format!("genome: {e}")))?;
        if file.format_version != GENOME_FORMAT_VERSION {
            return Err(Error::Parse(format!(
                "unsupported genome format_version {}",
                file.format_version
            )));
        }
        Ok(Genome {
            phase: file.phase,
            retained: file.retained,
            groups: GroupAssignment {
                n_groups: file.n_groups,
                layer_to_group: file.layer_to_group,
            },
            patterns: file.patterns,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    /// Loads a genome and rejects it unless it is valid for `config`.
    pub fn load(path: impl AsRef<Path>, config: &ModelConfig) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let genome = Self::from_json(&text)?;
        validate_genome(&genome, config)?;
        Ok(genome)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn cfg() -> ModelConfig {
        ModelConfig::tiny()
    }

    #[test]
    fn uniform_groups_are_contiguous() {
        let g = GroupAssignment::uniform(8, 4).unwrap();
        assert_eq!(g.layer_to_group, vec![0, 0, 1, 1, 2, 2, 3, 3]);
        let g = GroupAssignment::uniform(5, 2).unwrap();
        assert_eq!(g.layer_to_group, vec![0, 0, 0, 1, 1]);
        assert_eq!(
            GroupAssignment::uniform(3, 3).unwrap(),
            GroupAssignment::per_layer(3)
        );
        assert!(GroupAssignment::uniform(2, 3).is_err());
    }

    #[test]
    fn identity_genome_shape_and_validity() {
        let mut c = cfg();
        c.n_experts = 8;
        let g = identity_genome(&c, &GroupAssignment::per_layer(2));
        assert!(g.patterns.iter().all(|p| p.w_rm == Matrix::identity(8)));
        assert!(validate_genome(&g, &c).is_ok());
        assert_eq!(Genome::from_json(&g.to_json().unwrap()).unwrap(), g);
    }

    #[test]
    fn random_pruning_keep_all_is_full_selection() {
        let mut r = rng::seeded(1);
        let g = random_pruning_genome(&cfg(), &GroupAssignment::per_layer(2), 4, &mut r).unwrap();
        for s in g.subsets().unwrap() {
            assert_eq!(s, vec![0, 1, 2, 3]);
        }
        assert!(random_pruning_genome(&cfg(), &GroupAssignment::per_layer(2), 5, &mut r).is_err());
        assert!(random_pruning_genome(&cfg(), &GroupAssignment::per_layer(2), 1, &mut r).is_err());
    }

    #[test]
    fn random_pruning_subsets_are_uniform() {
        let mut r = rng::seeded(2);
        let groups = GroupAssignment::uniform(2, 1).unwrap();
        let mut counts = std::collections::HashMap::new();
        let n = 10_000;
        for _ in 0..n {
            let g = random_pruning_genome(&cfg(), &groups, 2, &mut r).unwrap();
            assert!(validate_genome(&g, &cfg()).is_ok());
            *counts
                .entry(g.subsets().unwrap()[0].clone())
                .or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 6);
        let mut chi2 = 0.0;
        for &c in counts.values() {
            let freq = c as f64 / n as f64;
            assert!((freq - 1.0 / 6.0).abs() <= 0.02, "{counts:?}");
            let expected = n as f64 / 6.0;
            chi2 += (c as f64 - expected).powi(2) / expected;
        }
        // 5 dof, p = 0.001 critical value
        assert!(chi2 < 20.52, "chi2 = {chi2}");
    }

    #[test]
    fn validate_reports_violations() {
        let groups = GroupAssignment::per_layer(2);
        let mut g =
            pruning_genome_from_subsets(&cfg(), &groups, &[vec![0, 1], vec![2, 3]]).unwrap();
        g.patterns[1] = GroupPattern::selection(&[2, 2], 4);
        let v = validate_genome(&g, &cfg()).unwrap_err();
        assert_eq!(v.group, Some(1));
        assert_eq!(v.row, Some(1));
        assert!(v.message.contains("duplicate expert in group 1"));

        let mut m = identity_genome(&cfg(), &groups);
        m.patterns[0].w_em.set(2, 3, f64::NAN);
        let v = validate_genome(&m, &cfg()).unwrap_err();
        assert_eq!((v.group, v.row), (Some(0), Some(2)));

        let mut p =
            pruning_genome_from_subsets(&cfg(), &groups, &[vec![0, 1], vec![2, 3]]).unwrap();
        p.patterns[0].w_rm.set(0, 0, 0.5);
        assert!(validate_genome(&p, &cfg()).is_err());

        let mut scrambled = identity_genome(&cfg(), &GroupAssignment::per_layer(2));
        scrambled.groups.layer_to_group = vec![1, 0];
        assert!(validate_genome(&scrambled, &cfg()).is_err());
    }

    #[test]
    fn identity_genome_preserves_logits() {
        let model = SMoEModel::random(&cfg(), 5).unwrap();
        let g = identity_genome(&cfg(), &GroupAssignment::uniform(2, 1).unwrap());
        let compressed = apply_genome(&model, &g).unwrap();
        let tokens = [1, 2, 3, 4, 5];
        let diff = compressed
            .forward(&tokens)
            .unwrap()
            .max_abs_diff(&model.forward(&tokens).unwrap());
        assert!(diff <= 1e-12);
    }

    #[test]
    fn averaging_rows_give_mean_expert() {
        let model = SMoEModel::random(&cfg(), 6).unwrap();
        let groups = GroupAssignment::per_layer(2);
        let mut g = identity_genome(&cfg(), &groups);
        for p in &mut g.patterns {
            p.w_em = Matrix::from_fn(4, 4, |_, _| 0.25);
            p.w_rm = Matrix::from_fn(4, 4, |_, _| 0.25);
        }
        let c = apply_genome(&model, &g).unwrap();
        for (orig, new) in model.blocks.iter().zip(&c.blocks) {
            let mut mean = Matrix::zeros(16, 32);
            for e in &orig.experts {
                mean.add_scaled(0.25, &e.w1).unwrap();
            }
            for e in &new.experts {
                assert_eq!(e.w1, mean);
            }
        }
    }

    #[test]
    fn merged_weights_are_exact_linear_combinations() {
        let model = SMoEModel::random(&cfg(), 7).unwrap();
        let groups = GroupAssignment::per_layer(2);
        let mut g = identity_genome(&cfg(), &groups);
        let mut r = rng::seeded(3);
        for p in &mut g.patterns {
            for v in p.w_em.data_mut() {
                *v = r.random_range(-1.0..1.0);
            }
        }
        let c = apply_genome(&model, &g).unwrap();
        for l in 0..2 {
            for j in 0..4 {
                let mut want = Matrix::zeros(32, 16);
                for i in 0..4 {
                    let w = g.patterns[l].w_em.get(j, i);
                    for (acc, v) in want
                        .data_mut()
                        .iter_mut()
                        .zip(model.blocks[l].experts[i].w2.data())
                    {
                        *acc += w * v;
                    }
                }
                let got = &c.blocks[l].experts[j].w2;
                let bits = |m: &Matrix| m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(got), bits(&want));
            }
        }
    }

    #[test]
    fn genome_file_round_trip_and_rejection() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("genome.json");
        let mut r = rng::seeded(4);
        let g = random_pruning_genome(&cfg(), &GroupAssignment::per_layer(2), 2, &mut r).unwrap();
        g.save(&path).unwrap();
        assert_eq!(Genome::load(&path, &cfg()).unwrap(), g);

        let mut other = cfg();
        other.n_layers = 4;
        assert!(Genome::load(&path, &other).is_err());
        other = cfg();
        other.n_experts = 8;
        assert!(Genome::load(&path, &other).is_err());

        fs::write(&path, "{\"format_version\": 1, \"phase\": ").unwrap();
        assert!(matches!(Genome::load(&path, &cfg()), Err(Error::Parse(_))));
    }
}
