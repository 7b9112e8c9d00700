// Score every comparison method on the same task, next to the exhaustive optimum.

use smoe_prune::baselines::{
    brute_force_oracle, frequency_prune, naee_prune, random_prune, soft_activation_prune,
    CalibrationBatch,
};
use smoe_prune::evaluation::{genome_fitness, make_task, random_sequences, TaskKind};
use smoe_prune::{search, GroupAssignment, ModelConfig, SMoEModel, SearchConfig};

fn main() -> smoe_prune::Result<()> {
    let model = SMoEModel::random(&ModelConfig::tiny(), 104)?;
    let task = make_task(&model, TaskKind::TeacherLabelAccuracy, 64, 8, 204)?;
    let calib = CalibrationBatch::collect(&model, random_sequences(32, 64, 8, 9))?;
    let retained = 2;

    let mut rows = vec![
        (
            "random (seed 0)",
            genome_fitness(&model, &random_prune(&model, retained, 0)?, &task)?,
        ),
        (
            "frequency",
            genome_fitness(&model, &frequency_prune(&model, &calib, retained)?, &task)?,
        ),
        (
            "soft activation",
            genome_fitness(
                &model,
                &soft_activation_prune(&model, &calib, retained)?,
                &task,
            )?,
        ),
        (
            "naee",
            genome_fitness(
                &model,
                &naee_prune(&model, &calib, retained, None)?.genome,
                &task,
            )?,
        ),
    ];
    let oracle = brute_force_oracle(&model, &task, retained, &GroupAssignment::per_layer(2))?;
    rows.push(("oracle (36 patterns)", oracle.best.fitness));

    let cfg = SearchConfig {
        retained,
        n_groups: 2,
        prune_iters: 20,
        merge_iters: 60,
        ..SearchConfig::default()
    };
    let outcome = search(&model, &task, &cfg)?;
    rows.push((
        "search: prune only",
        outcome.prune_best.map_or(f64::NAN, |b| b.fitness),
    ));
    rows.push(("search: prune + merge", outcome.best.fitness));

    for (name, f) in rows {
        println!("{name:<24} {f:.4}");
    }
    Ok(())
}
