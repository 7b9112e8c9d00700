//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Runs under `cargo test` with a custom harness.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::Rng;
use serde_json::json;

use common::{cert_model, cert_task, literal_subset_model, max_abs_diff, median};
use smoe_prune::baselines::{
    brute_force_oracle, dynamic_skip_average, dynamic_skip_calibrate, frequency_prune, naee_prune,
    random_prune, soft_activation_prune, CalibrationBatch,
};
use smoe_prune::compression::{
    apply_genome, identity_genome, random_pruning_genome, GroupAssignment,
};
use smoe_prune::evaluation::{
    collect_expert_stats, fitness, genome_fitness, random_sequences, ExpertStats,
};
use smoe_prune::evolution::{search, SearchConfig, SearchInit, SearchOutcome, SearchTrace};
use smoe_prune::model::{ModelConfig, SMoEModel};
use smoe_prune::profiler::{compression_cost, count_params};
use smoe_prune::rng;
use smoe_prune::tensor::Matrix;

const SEEDS: u64 = 10;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn random_config(r: &mut rng::Rng, n_experts: usize, n_layers: usize) -> ModelConfig {
    ModelConfig {
        d_model: [8, 12, 16][r.random_range(0..3)],
        d_ffn: [8, 16, 24][r.random_range(0..3)],
        n_layers,
        n_experts,
        top_k: r.random_range(1..=2),
        vocab_size: 24,
        max_seq_len: 10,
    }
}

fn criterion_1() -> Verdict {
    let mut r = rng::seeded(11);
    let mut worst = 0.0f64;
    let mut ok = 0;
    for i in 0..50 {
        let cfg = random_config(&mut r, [4, 8][i % 2], [1, 2, 4][i % 3]);
        let model = SMoEModel::random(&cfg, 1000 + i as u64).unwrap();
        let n_groups = r.random_range(1..=cfg.n_layers);
        let groups = GroupAssignment::uniform(cfg.n_layers, n_groups).unwrap();
        let genome = identity_genome(&cfg, &groups);
        let len = r.random_range(1..=cfg.max_seq_len);
        let tokens: Vec<usize> = (0..len)
            .map(|_| r.random_range(0..cfg.vocab_size))
            .collect();
        let base = model.forward(&tokens).unwrap();
        let compressed = apply_genome(&model, &genome)
            .unwrap()
            .forward(&tokens)
            .unwrap();
        let d = max_abs_diff(&base, &compressed);
        worst = worst.max(d);
        if d <= 1e-12 {
            ok += 1;
        }
    }
    verdict(
        ok == 50,
        format!("{ok}/50 pairs within 1e-12, max |diff| {worst:.2e}"),
    )
}

fn criterion_2() -> Verdict {
    let mut r = rng::seeded(12);
    let mut worst = 0.0f64;
    let mut ok = 0;
    for i in 0..100 {
        let cfg = random_config(&mut r, [4, 8][i % 2], [1, 2, 4][i % 3]);
        let model = SMoEModel::random(&cfg, 2000 + i as u64).unwrap();
        let groups =
            GroupAssignment::uniform(cfg.n_layers, r.random_range(1..=cfg.n_layers)).unwrap();
        let retained = r.random_range(cfg.top_k..=cfg.n_experts);
        let genome = random_pruning_genome(&cfg, &groups, retained, &mut r).unwrap();
        let per_group = genome.subsets().unwrap();
        let per_layer: Vec<Vec<usize>> = groups
            .layer_to_group
            .iter()
            .map(|&g| per_group[g].clone())
            .collect();
        let oracle = literal_subset_model(&model, &per_layer);
        let len = r.random_range(1..=cfg.max_seq_len);
        let tokens: Vec<usize> = (0..len)
            .map(|_| r.random_range(0..cfg.vocab_size))
            .collect();
        let got = apply_genome(&model, &genome)
            .unwrap()
            .forward(&tokens)
            .unwrap();
        let want = oracle.forward(&tokens).unwrap();
        let d = max_abs_diff(&got, &want);
        worst = worst.max(d);
        if d <= 1e-12 {
            ok += 1;
        }
    }
    verdict(
        ok == 100,
        format!("{ok}/100 genomes within 1e-12, max |diff| {worst:.2e}"),
    )
}

struct CertRun {
    model: SMoEModel,
    task: smoe_prune::Task,
    oracle_best: f64,
    oracle_patterns: usize,
    outcome: SearchOutcome,
}

fn cert_search_config(seed: u64) -> SearchConfig {
    SearchConfig {
        retained: 2,
        n_groups: 2,
        prune_iters: 20,
        merge_iters: 160,
        epochs_per_iter: 16,
        seed,
        ..SearchConfig::default()
    }
}

fn certification_runs() -> Vec<CertRun> {
    (0..SEEDS)
        .map(|s| {
            let model = cert_model(100 + s);
            let task = cert_task(&model, 200 + s);
            let oracle =
                brute_force_oracle(&model, &task, 2, &GroupAssignment::per_layer(2)).unwrap();
            let outcome = search(&model, &task, &cert_search_config(s)).unwrap();
            CertRun {
                oracle_best: oracle.best.fitness,
                oracle_patterns: oracle.table.len(),
                model,
                task,
                outcome,
            }
        })
        .collect()
}

fn criterion_3(runs: &[CertRun]) -> Verdict {
    let children = 20 * 16;
    let hits = runs
        .iter()
        .filter(|r| r.outcome.prune_best.as_ref().unwrap().fitness == r.oracle_best)
        .count();
    let tables_ok = runs.iter().all(|r| r.oracle_patterns == 36);
    verdict(
        hits >= 9 && tables_ok && children >= 300,
        format!("pruning phase reached the oracle optimum in {hits}/10 seeds ({children} child evaluations, 36-pattern tables: {tables_ok})"),
    )
}

fn criterion_4(runs: &[CertRun]) -> Verdict {
    let pairs: Vec<(f64, f64)> = runs
        .iter()
        .map(|r| {
            (
                r.outcome.prune_best.as_ref().unwrap().fitness,
                r.outcome.best.fitness,
            )
        })
        .collect();
    let geq = pairs.iter().filter(|(p, m)| m >= p).count();
    let gt = pairs.iter().filter(|(p, m)| m > p).count();
    verdict(
        geq == 10 && gt >= 6,
        format!("prune+merge >= prune-only in {geq}/10, strictly greater in {gt}/10"),
    )
}

fn criterion_5(traces: &[SearchTrace]) -> Verdict {
    let monotone = traces.iter().filter(|t| t.is_monotone()).count();
    verdict(
        monotone == traces.len() && !traces.is_empty(),
        format!("{monotone}/{} search traces non-decreasing", traces.len()),
    )
}

fn criterion_6() -> Verdict {
    let cfg = ModelConfig::mixtral_8x7b();
    let p = count_params(&cfg);
    let two = compression_cost(&cfg, 2, 2)
        .unwrap()
        .param_reduction_fraction;
    let four = compression_cost(&cfg, 4, 2)
        .unwrap()
        .param_reduction_fraction;
    let total_rel = p.total_params as f64 / 47e9 - 1.0;
    let pass = p.expert_params == 45_097_156_608
        && total_rel.abs() <= 0.02
        && (two - 0.72).abs() <= 0.02
        && (four - 0.474).abs() <= 0.03;
    verdict(
        pass,
        format!(
            "experts {} total {} ({:+.2}% vs 47B), E'=2 reduction {:.2}%, E'=4 reduction {:.2}%",
            p.expert_params,
            p.total_params,
            100.0 * total_rel,
            100.0 * two,
            100.0 * four
        ),
    )
}

fn write_run_config(dir: &Path, model_seed: u64, search: serde_json::Value) -> std::path::PathBuf {
    let path = dir.join("run.json");
    let value = json!({
        "model": { "config": ModelConfig::tiny(), "seed": model_seed },
        "task": { "kind": "teacher_label_accuracy", "n_sequences": 64, "seq_len": 8, "seed": 5 },
        "search": search,
        "calibration": { "n_sequences": 32, "seq_len": 8, "seed": 6 },
        "output_dir": "out"
    });
    fs::write(&path, serde_json::to_string_pretty(&value).unwrap()).unwrap();
    path
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_smoe-prune"))
}

fn criterion_7(traces: &mut Vec<SearchTrace>) -> Verdict {
    // end-to-end override through the binary
    let dir = tempfile::tempdir().unwrap();
    let config = write_run_config(dir.path(), 300, json!({ "retained": 4, "n_groups": 2 }));
    let out = bin()
        .args(["eval", "--config"])
        .arg(&config)
        .args(["--active-experts", "1"])
        .output()
        .unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout).to_string();
    let teacher = cert_model(300);
    let task = smoe_prune::make_task(
        &teacher,
        smoe_prune::TaskKind::TeacherLabelAccuracy,
        64,
        8,
        5,
    )
    .unwrap();
    let expected = fitness(&teacher.with_top_k(1).unwrap(), &task).unwrap();
    let cli_ok = out.status.success()
        && stdout.contains("active 1")
        && stdout.contains(&format!("fitness {expected:.6}"));

    let mut wins = 0;
    let mut strict = 0;
    for s in 0..SEEDS {
        let teacher = cert_model(310 + s);
        let task = cert_task(&teacher, 320 + s);
        let k1 = teacher.with_top_k(1).unwrap();
        let before = fitness(&k1, &task).unwrap();
        let cfg = SearchConfig {
            retained: 4,
            n_groups: 2,
            merge_iters: 60,
            init: SearchInit::Identity,
            seed: s,
            ..SearchConfig::default()
        };
        let outcome = search(&k1, &task, &cfg).unwrap();
        if outcome.best.fitness >= before {
            wins += 1;
        }
        if outcome.best.fitness > before {
            strict += 1;
        }
        traces.push(outcome.trace);
    }
    verdict(
        cli_ok && wins >= 9,
        format!("eval --active-experts 1 ok: {cli_ok}; searched k'=1 >= unsearched k'=1 in {wins}/10 seeds (strictly better in {strict})"),
    )
}

fn criterion_8() -> Verdict {
    let mut calib_avgs = Vec::new();
    let mut fresh_avgs = Vec::new();
    let mut bounded = true;
    for s in 0..5 {
        let model = cert_model(400 + s);
        let calib =
            CalibrationBatch::collect(&model, random_sequences(32, 64, 8, 410 + s)).unwrap();
        let t = dynamic_skip_calibrate(&model, &calib).unwrap();
        calib_avgs.push(dynamic_skip_average(&model, &t, &calib.sequences).unwrap());
        fresh_avgs.push(
            dynamic_skip_average(&model, &t, &random_sequences(32, 256, 8, 420 + s)).unwrap(),
        );
        let mut r = rng::seeded(430 + s);
        for _ in 0..50 {
            let len = r.random_range(1..=16);
            let probe = random_sequences(32, 1, len, r.random());
            let a = dynamic_skip_average(&model, &t, &probe).unwrap();
            bounded &= (1.0..=2.0).contains(&a);
        }
    }
    let near = |v: &[f64]| v.iter().all(|a| (a - 1.5).abs() <= 0.1);
    let fmt = |v: &[f64]| {
        v.iter()
            .map(|a| format!("{a:.3}"))
            .collect::<Vec<_>>()
            .join(" ")
    };
    verdict(
        near(&calib_avgs) && near(&fresh_avgs) && bounded,
        format!(
            "avg active on calibration batch [{}], same distribution [{}], held-out in [1,2]: {bounded}",
            fmt(&calib_avgs),
            fmt(&fresh_avgs)
        ),
    )
}

fn criterion_9(runs: &[CertRun]) -> Verdict {
    let mut wins = 0;
    let mut margins = Vec::new();
    for (s, run) in runs.iter().enumerate() {
        let (model, task) = (&run.model, &run.task);
        let score = |g| genome_fitness(model, &g, task).unwrap();
        let random = median(
            (0..30)
                .map(|i| score(random_prune(model, 2, 7000 + 100 * s as u64 + i).unwrap()))
                .collect(),
        );
        let calib =
            CalibrationBatch::collect(model, random_sequences(32, 64, 8, 500 + s as u64)).unwrap();
        let freq = score(frequency_prune(model, &calib, 2).unwrap());
        let soft = score(soft_activation_prune(model, &calib, 2).unwrap());
        let naee = score(naee_prune(model, &calib, 2, None).unwrap().genome);
        let best_baseline = random.max(freq).max(soft).max(naee);
        let eep = run.outcome.best.fitness;
        if eep >= best_baseline {
            wins += 1;
        }
        margins.push(eep - best_baseline);
    }
    let min_margin = margins.iter().cloned().fold(f64::INFINITY, f64::min);
    verdict(
        wins >= 9,
        format!("search >= every baseline in {wins}/10 seeds (smallest margin {min_margin:+.4})"),
    )
}

fn check_stats(stats: &ExpertStats, tokens: u64, k: usize) -> bool {
    stats.layers.iter().all(|l| {
        let e = l.activation_counts.len();
        let c = &l.activation_correlation;
        let counts_ok =
            l.n_tokens == tokens && l.activation_counts.iter().sum::<u64>() == tokens * k as u64;
        let weights_ok = (l.accumulated_weights.iter().sum::<f64>() - tokens as f64).abs() <= 1e-9;
        let corr_ok = (0..e).all(|i| {
            let diag = if l.degenerate[i] { 0.0 } else { 1.0 };
            c.get(i, i) == diag
                && (0..e).all(|j| c.get(i, j) == c.get(j, i) && c.get(i, j).abs() <= 1.0 + 1e-12)
        });
        counts_ok && weights_ok && corr_ok
    })
}

/// One layer, `d = E = 4`, identity router, zero value projection: each token's
/// gates are `softmax(x)` of an i.i.d. Gaussian embedding, so top-2 picks a
/// uniformly random pair.
fn uniform_router_model(vocab: usize) -> SMoEModel {
    let cfg = ModelConfig {
        d_model: 4,
        d_ffn: 4,
        n_layers: 1,
        n_experts: 4,
        top_k: 2,
        vocab_size: vocab,
        max_seq_len: 1,
    };
    let mut m = SMoEModel::random(&cfg, 77).unwrap();
    m.blocks[0].wv = Matrix::zeros(4, 4);
    m.blocks[0].w_router = Matrix::identity(4);
    m
}

fn criterion_10() -> Verdict {
    let mut ok = true;
    for s in 0..3 {
        let model = cert_model(600 + s);
        let probe = random_sequences(32, 64, 8, 610 + s);
        let tokens = 64 * 8;
        ok &= check_stats(&collect_expert_stats(&model, &probe).unwrap(), tokens, 2);
        for retained in [2, 3] {
            let mut r = rng::seeded(620 + s);
            let g = random_pruning_genome(
                &model.config,
                &GroupAssignment::per_layer(2),
                retained,
                &mut r,
            )
            .unwrap();
            let compressed = apply_genome(&model, &g).unwrap();
            ok &= check_stats(
                &collect_expert_stats(&compressed, &probe).unwrap(),
                tokens,
                2,
            );
        }
    }

    let n = 10_000;
    let model = uniform_router_model(n);
    let mut r = rng::seeded(640);
    let probe: Vec<Vec<usize>> = (0..n).map(|_| vec![r.random_range(0..n)]).collect();
    let stats = collect_expert_stats(&model, &probe).unwrap();
    // indicator of a uniformly random k-subset of E: p = k/E,
    // P(both) = k(k-1)/(E(E-1))
    let (e, k) = (4.0, 2.0);
    let p = k / e;
    let cov = k * (k - 1.0) / (e * (e - 1.0)) - p * p;
    let want = cov / (p * (1.0 - p));
    let corr = &stats.layers[0].activation_correlation;
    let mut worst = 0.0f64;
    for i in 0..4 {
        for j in 0..4 {
            if i != j {
                worst = worst.max((corr.get(i, j) - want).abs());
            }
        }
    }
    verdict(
        ok && worst <= 0.05,
        format!("integrity checks on full and compressed models: {ok}; uniform-router correlation off by at most {worst:.4} from {want:.4}"),
    )
}

fn criterion_11() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let config = write_run_config(
        dir.path(),
        700,
        json!({ "retained": 2, "n_groups": 2, "prune_iters": 10, "merge_iters": 30, "seed": 9 }),
    );
    let mut outputs = Vec::new();
    for threads in ["1", "1", "8", "8"] {
        let _ = fs::remove_dir_all(dir.path().join("out"));
        let status = bin()
            .args(["--threads", threads, "search", "--config"])
            .arg(&config)
            .output()
            .unwrap()
            .status;
        if !status.success() {
            return verdict(
                false,
                format!("search exited with {status} under --threads {threads}"),
            );
        }
        let genome = fs::read(dir.path().join("out/genome.json")).unwrap();
        let trace = fs::read(dir.path().join("out/trace.csv")).unwrap();
        outputs.push((genome, trace));
    }
    let same = outputs.windows(2).all(|w| w[0] == w[1]);
    verdict(
        same,
        format!(
            "genome.json and trace.csv byte-identical across 4 runs (--threads 1,1,8,8): {same}"
        ),
    )
}

fn guarded(f: impl FnOnce() -> Verdict) -> (Verdict, f64) {
    let start = Instant::now();
    let v = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        verdict(false, format!("panicked: {msg}"))
    });
    (v, start.elapsed().as_secs_f64())
}

fn main() {
    let mut results = BTreeMap::new();
    let mut traces = Vec::new();
    results.insert(1, guarded(criterion_1));
    results.insert(2, guarded(criterion_2));

    let start = Instant::now();
    let runs = catch_unwind(certification_runs).ok();
    let setup = start.elapsed().as_secs_f64();
    match &runs {
        Some(runs) => {
            traces.extend(runs.iter().map(|r| r.outcome.trace.clone()));
            let (v, t) = guarded(|| criterion_3(runs));
            results.insert(3, (v, t + setup));
            results.insert(4, guarded(|| criterion_4(runs)));
            results.insert(9, guarded(|| criterion_9(runs)));
        }
        None => {
            for c in [3, 4, 9] {
                results.insert(c, (verdict(false, "certification runs panicked"), setup));
            }
        }
    }
    results.insert(6, guarded(criterion_6));
    results.insert(7, guarded(|| criterion_7(&mut traces)));
    results.insert(8, guarded(criterion_8));
    results.insert(10, guarded(criterion_10));
    results.insert(11, guarded(criterion_11));
    results.insert(5, guarded(|| criterion_5(&traces)));

    let mut failed = 0;
    println!();
    for (c, (v, secs)) in &results {
        if !v.pass {
            failed += 1;
        }
        println!(
            "criterion {c:>2}: {} ({secs:.1}s) {}",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
    }
    println!(
        "\nacceptance: {} passed, {failed} failed",
        results.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
