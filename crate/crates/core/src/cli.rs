//! Command-line surface: every command reads a JSON run config and writes its
//! artifacts under the run directory.
//!
//! Relative paths inside a run config resolve against the config file's
//! directory.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::baselines::{
    brute_force_oracle, dynamic_skip_average, dynamic_skip_calibrate, frequency_prune, naee_prune,
    random_prune, soft_activation_prune, CalibrationBatch,
};
use crate::compression::{apply_genome, Genome, GroupAssignment};
use crate::error::{Error, Result};
use crate::evaluation::{
    collect_expert_stats, fitness, genome_fitness, make_task, random_sequences, Task, TaskKind,
};
use crate::evolution::{search, SearchConfig};
use crate::model::{ModelConfig, SMoEModel};
use crate::profiler::{compression_cost, count_params, format_cost_table, CostReport, ParamReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Existing checkpoint; takes precedence over `config`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<ModelConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSpec {
    pub n_sequences: usize,
    pub seq_len: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub n_sequences: usize,
    pub seq_len: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub task: TaskSpec,
    #[serde(default)]
    pub search: SearchConfig,
    /// Calibration batch for data-driven baselines and expert statistics.
    pub calibration: ProbeSpec,
    pub output_dir: PathBuf,
}

impl RunConfig {
    /// Reads a run config and resolves its relative paths.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(ckpt) = &mut cfg.model.checkpoint {
            *ckpt = base.join(&*ckpt);
        }
        cfg.output_dir = base.join(&cfg.output_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.model.checkpoint, &self.model.config, self.model.seed) {
            (Some(p), _, _) if !p.exists() => {
                return Err(Error::Config(format!(
                    "checkpoint {} does not exist",
                    p.display()
                )))
            }
            (Some(_), _, _) => {}
            (None, Some(c), Some(_)) => c.validate()?,
            (None, Some(_), None) => return Err(Error::Config("model.seed is required".into())),
            (None, None, _) => {
                return Err(Error::Config(
                    "model needs either checkpoint or config".into(),
                ))
            }
        }
        for (name, p) in [
            ("task", (self.task.n_sequences, self.task.seq_len)),
            (
                "calibration",
                (self.calibration.n_sequences, self.calibration.seq_len),
            ),
        ] {
            if p.0 == 0 || p.1 == 0 {
                return Err(Error::Config(format!(
                    "{name} needs n_sequences and seq_len >= 1"
                )));
            }
        }
        self.search.validate()
    }

    pub fn build_model(&self) -> Result<SMoEModel> {
        match (&self.model.checkpoint, &self.model.config, self.model.seed) {
            (Some(p), _, _) => SMoEModel::load(p),
            (None, Some(c), Some(seed)) => SMoEModel::random(c, seed),
            _ => Err(Error::Config(
                "model needs either checkpoint or config with seed".into(),
            )),
        }
    }

    /// Task whose targets come from `teacher`.
    pub fn build_task(&self, teacher: &SMoEModel) -> Result<Task> {
        let t = &self.task;
        make_task(teacher, t.kind, t.n_sequences, t.seq_len, t.seed)
    }

    pub fn calibration_sequences(&self, model: &SMoEModel) -> Result<Vec<Vec<usize>>> {
        let c = &self.calibration;
        if c.seq_len > model.config.max_seq_len {
            return Err(Error::Config(format!(
                "calibration seq_len {} exceeds max_seq_len {}",
                c.seq_len, model.config.max_seq_len
            )));
        }
        Ok(random_sequences(
            model.config.vocab_size,
            c.n_sequences,
            c.seq_len,
            c.seed,
        ))
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "smoe-prune",
    version,
    about = "Evolutionary expert pruning and merging for toy sparse MoE models"
)]
pub struct Cli {
    /// Worker thread cap (default: available parallelism).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BaselineMethod {
    Random,
    Frequency,
    Soft,
    Naee,
    Dynamic,
    Oracle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Mixtral,
    Tiny,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a seeded random model and save it as model.json.
    GenModel {
        #[arg(long)]
        config: PathBuf,
        /// Output path (default: <output_dir>/model.json).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the two-phase evolutionary search.
    Search {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run one comparison method and score it with the shared task.
    Baseline {
        #[arg(value_enum)]
        method: BaselineMethod,
        #[arg(long)]
        config: PathBuf,
        /// Score a random subsample when NAEE enumeration exceeds its guard.
        #[arg(long)]
        subsample: bool,
    },
    /// Apply a genome to the run's model and save the compressed checkpoint.
    Apply {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        genome: PathBuf,
        /// Output path (default: <output_dir>/model_compressed.json).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a model (optionally compressed) on the run's task.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint to score instead of the run's model; the task teacher stays the run's model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        genome: Option<PathBuf>,
        /// Override the number of experts each token activates.
        #[arg(long)]
        active_experts: Option<usize>,
    },
    /// Print parameter counts and compression cost estimates.
    Profile {
        #[arg(long, value_enum, default_value = "mixtral", conflicts_with = "config")]
        preset: Preset,
        /// Run config whose model dimensions to profile.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        csv: bool,
    },
    /// Dump expert activation statistics for the full and compressed model.
    Stats {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        genome: Option<PathBuf>,
    },
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Parse(e.to_string()))?;
    write(path, &(text + "\n"))
}

fn print_params(r: &ParamReport) {
    println!("{}", ParamReport::csv_header());
    println!("{}", r.csv_row());
}

/// Runs a parsed command line, honoring `--threads`.
pub fn run(cli: Cli) -> Result<()> {
    match cli.threads {
        Some(0) => Err(Error::Config("--threads must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?
            .install(|| dispatch(cli.command)),
        None => dispatch(cli.command),
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenModel { config, out } => cmd_gen_model(&config, out),
        Command::Search { config } => cmd_search(&config),
        Command::Baseline {
            method,
            config,
            subsample,
        } => cmd_baseline(method, &config, subsample),
        Command::Apply {
            config,
            genome,
            out,
        } => cmd_apply(&config, &genome, out),
        Command::Eval {
            config,
            checkpoint,
            genome,
            active_experts,
        } => cmd_eval(&config, checkpoint, genome, active_experts),
        Command::Profile {
            preset,
            config,
            csv,
        } => cmd_profile(preset, config, csv),
        Command::Stats { config, genome } => cmd_stats(&config, genome),
    }
}

pub fn cmd_gen_model(config: &Path, out: Option<PathBuf>) -> Result<()> {
    let run = RunConfig::load(config)?;
    if run.model.checkpoint.is_some() {
        return Err(Error::Config(
            "gen-model needs model.config and model.seed, not a checkpoint".into(),
        ));
    }
    let model = run.build_model()?;
    let out = out.unwrap_or_else(|| run.output_dir.join("model.json"));
    write(&out, &model.to_json()?)?;
    println!(
        "wrote {} (checksum {:016x})",
        out.display(),
        model.checksum()
    );
    print_params(&count_params(&model.config));
    Ok(())
}

pub fn cmd_search(config: &Path) -> Result<()> {
    let run = RunConfig::load(config)?;
    let model = run.build_model()?;
    let task = run.build_task(&model)?;
    let outcome = search(&model, &task, &run.search)?;
    let dir = &run.output_dir;
    write(&dir.join("genome.json"), &outcome.best.genome.to_json()?)?;
    write(&dir.join("trace.csv"), &outcome.trace.to_csv())?;
    let base = fitness(&model, &task)?;
    let cost = compression_cost(&model.config, run.search.retained, model.config.top_k)?;
    let prune_only = outcome.prune_best.as_ref().map(|b| b.fitness);
    let evaluations = outcome.trace.records.last().map_or(0, |r| r.evaluations);
    write_json(
        &dir.join("report.json"),
        &json!({
            "command": "search",
            "base_fitness": base,
            "prune_only_fitness": prune_only,
            "prune_merge_fitness": outcome.best.fitness,
            "evaluations": evaluations,
            "retained": run.search.retained,
            "n_groups": run.search.n_groups,
            "params_before": cost.params_before,
            "params_after": cost.params_after,
            "model_checksum": format!("{:016x}", model.checksum()),
        }),
    )?;
    println!("base model fitness      {base:.6}");
    match prune_only {
        Some(f) => println!("prune only              {f:.6}"),
        None => println!("prune only              (skipped)"),
    }
    println!("prune + merge           {:.6}", outcome.best.fitness);
    println!("artifacts in {}", dir.display());
    Ok(())
}

pub fn cmd_baseline(method: BaselineMethod, config: &Path, subsample: bool) -> Result<()> {
    let run = RunConfig::load(config)?;
    let model = run.build_model()?;
    let task = run.build_task(&model)?;
    let retained = run.search.retained;
    let name = format!("{method:?}").to_lowercase();
    let dir = run.output_dir.join(format!("baseline-{name}"));
    let calib = || -> Result<CalibrationBatch> {
        CalibrationBatch::collect(&model, run.calibration_sequences(&model)?)
    };

    let mut report = json!({ "command": "baseline", "method": name });
    let genome = match method {
        BaselineMethod::Random => Some(random_prune(&model, retained, run.search.seed)?),
        BaselineMethod::Frequency => Some(frequency_prune(&model, &calib()?, retained)?),
        BaselineMethod::Soft => Some(soft_activation_prune(&model, &calib()?, retained)?),
        BaselineMethod::Naee => {
            let seed = subsample.then_some(run.search.seed);
            let result = naee_prune(&model, &calib()?, retained, seed)?;
            write(&dir.join("naee_audit.csv"), &result.audit_csv())?;
            Some(result.genome)
        }
        BaselineMethod::Oracle => {
            let groups = GroupAssignment::uniform(model.config.n_layers, run.search.n_groups)?;
            let result = brute_force_oracle(&model, &task, retained, &groups)?;
            write(&dir.join("oracle_table.csv"), &result.table_csv())?;
            report["patterns"] = json!(result.table.len());
            Some(result.best.genome)
        }
        BaselineMethod::Dynamic => {
            let batch = calib()?;
            let thresholds = dynamic_skip_calibrate(&model, &batch)?;
            let active = dynamic_skip_average(&model, &thresholds, &task.probe_tokens)?;
            write_json(
                &dir.join("thresholds.json"),
                &json!({ "thresholds": thresholds }),
            )?;
            report["avg_active_experts"] = json!(active);
            report["thresholds"] = json!(thresholds);
            println!("dynamic skipping: avg active experts {active:.4}");
            None
        }
    };
    if let Some(genome) = genome {
        let f = genome_fitness(&model, &genome, &task)?;
        write(&dir.join("genome.json"), &genome.to_json()?)?;
        report["fitness"] = json!(f);
        report["retained"] = json!(retained);
        println!("{name}: fitness {f:.6}");
    }
    write_json(&dir.join("report.json"), &report)?;
    println!("artifacts in {}", dir.display());
    Ok(())
}

pub fn cmd_apply(config: &Path, genome: &Path, out: Option<PathBuf>) -> Result<()> {
    let run = RunConfig::load(config)?;
    let model = run.build_model()?;
    let genome = Genome::load(genome, &model.config)?;
    let compressed = apply_genome(&model, &genome)?;
    let out = out.unwrap_or_else(|| run.output_dir.join("model_compressed.json"));
    write(&out, &compressed.to_json()?)?;
    println!(
        "wrote {}: {} -> {} experts per layer, {} -> {} parameters",
        out.display(),
        model.config.n_experts,
        compressed.config.n_experts,
        model.scalar_count(),
        compressed.scalar_count()
    );
    Ok(())
}

pub fn cmd_eval(
    config: &Path,
    checkpoint: Option<PathBuf>,
    genome: Option<PathBuf>,
    active_experts: Option<usize>,
) -> Result<()> {
    let run = RunConfig::load(config)?;
    let teacher = run.build_model()?;
    let task = run.build_task(&teacher)?;
    let mut model = match checkpoint {
        Some(p) => SMoEModel::load(p)?,
        None => teacher.clone(),
    };
    if let Some(g) = genome {
        let genome = Genome::load(g, &model.config)?;
        model = apply_genome(&model, &genome)?;
    }
    if let Some(k) = active_experts {
        model = model.with_top_k(k)?;
    }
    let f = fitness(&model, &task)?;
    println!(
        "experts {} active {} fitness {f:.6}",
        model.config.n_experts, model.config.top_k
    );
    Ok(())
}

/// Cost reports for every retained count from `E` down to `top_k`, each with
/// active counts from `top_k` down to 1.
pub fn cost_grid(cfg: &ModelConfig) -> Result<Vec<CostReport>> {
    let mut out = Vec::new();
    for retained in (cfg.top_k..=cfg.n_experts).rev() {
        for active in (1..=cfg.top_k.min(retained)).rev() {
            out.push(compression_cost(cfg, retained, active)?);
        }
    }
    Ok(out)
}

pub fn cmd_profile(preset: Preset, config: Option<PathBuf>, csv: bool) -> Result<()> {
    let cfg = match config {
        Some(p) => RunConfig::load(p)?.build_model()?.config,
        None => match preset {
            Preset::Mixtral => ModelConfig::mixtral_8x7b(),
            Preset::Tiny => ModelConfig::tiny(),
        },
    };
    let params = count_params(&cfg);
    let grid = cost_grid(&cfg)?;
    if csv {
        print_params(&params);
        println!("{}", CostReport::csv_header());
        for r in &grid {
            println!("{}", r.csv_row());
        }
    } else {
        println!(
            "experts {} / total {} parameters ({:.1}% in experts)",
            params.expert_params,
            params.total_params,
            100.0 * params.expert_fraction
        );
        print!("{}", format_cost_table(&grid));
    }
    Ok(())
}

pub fn cmd_stats(config: &Path, genome: Option<PathBuf>) -> Result<()> {
    let run = RunConfig::load(config)?;
    let model = run.build_model()?;
    let probe = run.calibration_sequences(&model)?;
    let dir = &run.output_dir;
    let full = collect_expert_stats(&model, &probe)?;
    write(&dir.join("stats_full.csv"), &full.to_csv())?;
    if let Some(g) = genome {
        let genome = Genome::load(g, &model.config)?;
        let compressed = apply_genome(&model, &genome)?;
        let stats = collect_expert_stats(&compressed, &probe)?;
        write(&dir.join("stats_compressed.csv"), &stats.to_csv())?;
    }
    println!("artifacts in {}", dir.display());
    Ok(())
}
