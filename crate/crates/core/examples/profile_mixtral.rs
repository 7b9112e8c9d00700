// Parameter, memory, and FLOP estimates for Mixtral 8x7B dimensions.

use smoe_prune::profiler::{compression_cost, count_params, format_cost_table};
use smoe_prune::ModelConfig;

fn main() -> smoe_prune::Result<()> {
    let cfg = ModelConfig::mixtral_8x7b();
    let p = count_params(&cfg);
    println!(
        "expert parameters {} of {} ({:.1}%)",
        p.expert_params,
        p.total_params,
        100.0 * p.expert_fraction
    );

    let reports = [(8, 2), (8, 1), (4, 2), (4, 1), (2, 2), (2, 1)]
        .into_iter()
        .map(|(retained, active)| compression_cost(&cfg, retained, active))
        .collect::<smoe_prune::Result<Vec<_>>>()?;
    print!("{}", format_cost_table(&reports));
    Ok(())
}
