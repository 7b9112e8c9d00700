// Two-phase search on the tiny model: pruning first, then merging.

use smoe_prune::evaluation::{make_task, TaskKind};
use smoe_prune::{search, ModelConfig, SMoEModel, SearchConfig};

fn main() -> smoe_prune::Result<()> {
    let model = SMoEModel::random(&ModelConfig::tiny(), 101)?;
    let task = make_task(&model, TaskKind::TeacherLabelAccuracy, 64, 8, 201)?;
    let cfg = SearchConfig {
        retained: 2,
        n_groups: 2,
        prune_iters: 20,
        merge_iters: 40,
        seed: 1,
        ..SearchConfig::default()
    };
    let outcome = search(&model, &task, &cfg)?;

    for r in outcome.trace.records.iter().step_by(10) {
        println!(
            "iter {:>3} {:<8} best {:.4} after {} evaluations",
            r.iteration, r.phase, r.best_fitness, r.evaluations
        );
    }
    let prune = outcome.prune_best.as_ref().map_or(f64::NAN, |b| b.fitness);
    println!(
        "prune only {prune:.4}, prune + merge {:.4}",
        outcome.best.fitness
    );
    let rm = &outcome.best.genome.patterns[0].w_rm;
    println!("group 0 router mapping:");
    for r in 0..rm.rows() {
        let row: Vec<String> = rm.row(r).iter().map(|v| format!("{v:+.3}")).collect();
        println!("  [{}]", row.join(" "));
    }
    Ok(())
}
