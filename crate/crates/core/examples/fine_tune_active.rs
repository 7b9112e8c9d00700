// Drop from two active experts per token to one, then let the merging search
// recover accuracy while keeping every expert.

use smoe_prune::evaluation::{make_task, TaskKind};
use smoe_prune::{fitness, search, ModelConfig, SMoEModel, SearchConfig, SearchInit};

fn main() -> smoe_prune::Result<()> {
    let teacher = SMoEModel::random(&ModelConfig::tiny(), 310)?;
    let task = make_task(&teacher, TaskKind::TeacherLabelAccuracy, 64, 8, 320)?;
    let one_active = teacher.with_top_k(1)?;
    println!(
        "k=2 teacher {:.4}, k'=1 unsearched {:.4}",
        fitness(&teacher, &task)?,
        fitness(&one_active, &task)?
    );

    let cfg = SearchConfig {
        retained: teacher.config.n_experts,
        n_groups: 2,
        merge_iters: 60,
        init: SearchInit::Identity,
        ..SearchConfig::default()
    };
    let outcome = search(&one_active, &task, &cfg)?;
    println!("k'=1 after merging search {:.4}", outcome.best.fitness);
    Ok(())
}
