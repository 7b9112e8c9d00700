// Calibrate per-layer skip thresholds and measure the active expert count.

use smoe_prune::baselines::{
    dynamic_skip_average, dynamic_skip_calibrate, dynamic_skip_forward, CalibrationBatch,
};
use smoe_prune::evaluation::{argmax, random_sequences};
use smoe_prune::{ModelConfig, SMoEModel};

fn main() -> smoe_prune::Result<()> {
    let model = SMoEModel::random(&ModelConfig::tiny(), 400)?;
    let calib = CalibrationBatch::collect(&model, random_sequences(32, 64, 8, 1))?;
    let thresholds = dynamic_skip_calibrate(&model, &calib)?;
    println!("thresholds {thresholds:.3?}");

    let held_out = random_sequences(32, 256, 8, 2);
    println!(
        "avg active experts on held-out probes: {:.3}",
        dynamic_skip_average(&model, &thresholds, &held_out)?
    );

    let mut agree = 0;
    for seq in &held_out {
        let (skipped, _) = dynamic_skip_forward(&model, &thresholds, seq)?;
        let full = model.forward(seq)?;
        let last = seq.len() - 1;
        agree += usize::from(argmax(skipped.row(last)) == argmax(full.row(last)));
    }
    println!(
        "final-token argmax agrees with full routing on {agree}/{}",
        held_out.len()
    );
    Ok(())
}
