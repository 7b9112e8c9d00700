// Expert activation counts, routing mass, and co-activation correlation,
// before and after pruning.

use smoe_prune::compression::pruning_genome_from_subsets;
use smoe_prune::evaluation::{collect_expert_stats, random_sequences};
use smoe_prune::{apply_genome, GroupAssignment, ModelConfig, SMoEModel};

fn main() -> smoe_prune::Result<()> {
    let config = ModelConfig::tiny();
    let model = SMoEModel::random(&config, 600)?;
    let probe = random_sequences(config.vocab_size, 64, 8, 3);

    let full = collect_expert_stats(&model, &probe)?;
    for (l, s) in full.layers.iter().enumerate() {
        println!("layer {l}: counts {:?}", s.activation_counts);
        for i in 0..s.activation_correlation.rows() {
            let row: Vec<String> = s
                .activation_correlation
                .row(i)
                .iter()
                .map(|v| format!("{v:+.2}"))
                .collect();
            println!("  [{}]", row.join(" "));
        }
    }

    let genome = pruning_genome_from_subsets(
        &config,
        &GroupAssignment::per_layer(2),
        &[vec![0, 1, 3], vec![0, 2, 3]],
    )?;
    let compressed = collect_expert_stats(&apply_genome(&model, &genome)?, &probe)?;
    print!("{}", compressed.to_csv());
    Ok(())
}
