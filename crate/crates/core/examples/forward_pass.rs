// Build a seeded toy model, run a forward pass, and round-trip a checkpoint.

use smoe_prune::{ModelConfig, SMoEModel};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let config = ModelConfig::tiny();
    let model = SMoEModel::random(&config, 7)?;
    let tokens = [3, 1, 4, 1, 5, 9, 2, 6];

    let (logits, traces) = model.forward_traced(&tokens)?;
    println!("logits {:?} for {} tokens", logits.shape(), tokens.len());
    for (layer, trace) in traces.iter().enumerate() {
        let route = &trace.routes[tokens.len() - 1];
        println!("layer {layer}: last token routed to {route:?}");
    }

    let dir = std::env::temp_dir().join("smoe-prune-forward-pass");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("model.json");
    model.save(&path)?;
    let back = SMoEModel::load(&path)?;
    assert_eq!(back.forward(&tokens)?, logits);
    println!(
        "checkpoint {} reloads bit-identically (checksum {:016x})",
        path.display(),
        back.checksum()
    );
    Ok(())
}
