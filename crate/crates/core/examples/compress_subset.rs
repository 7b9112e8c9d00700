// Hand-build a pruning genome and a merging genome and apply both.

use smoe_prune::compression::{pruning_genome_from_subsets, GroupPattern};
use smoe_prune::evaluation::{make_task, TaskKind};
use smoe_prune::{
    apply_genome, fitness, Genome, GroupAssignment, Matrix, ModelConfig, Phase, SMoEModel,
};

fn main() -> smoe_prune::Result<()> {
    let config = ModelConfig::tiny();
    let model = SMoEModel::random(&config, 3)?;
    let task = make_task(&model, TaskKind::TeacherLogitMatch, 32, 8, 1)?;
    let groups = GroupAssignment::per_layer(config.n_layers);

    // keep experts {0, 2} in layer 0 and {1, 3} in layer 1
    let pruned = pruning_genome_from_subsets(&config, &groups, &[vec![0, 2], vec![1, 3]])?;
    let small = apply_genome(&model, &pruned)?;
    println!(
        "pruned: {} -> {} experts per layer, {} -> {} scalars, fitness {:.5}",
        config.n_experts,
        small.config.n_experts,
        model.scalar_count(),
        small.scalar_count(),
        fitness(&small, &task)?
    );

    // merge pairs instead: each new expert averages two originals, and each
    // keeps routing weight from both
    let halves = Matrix::from_vec(2, 4, vec![0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.5, 0.5])?;
    let route = Matrix::from_vec(2, 4, vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0])?;
    let pattern = GroupPattern {
        w_rm: route,
        w_em: halves,
    };
    let merged = Genome {
        phase: Phase::Merging,
        retained: 2,
        groups,
        patterns: vec![pattern.clone(), pattern],
    };
    let merged_model = apply_genome(&model, &merged)?;
    println!(
        "merged pairs: fitness {:.5}",
        fitness(&merged_model, &task)?
    );
    println!("{}", merged.to_json()?);
    Ok(())
}
