//! Lists the presets, round-trips a config file and shows a validation error.

use cotok::config::{Preset, Scale};
use cotok::ModelConfig;

fn main() -> cotok::Result<()> {
    println!("{:<18} {:>6} {:>9} {:>9}  fingerprint", "preset", "scale", "fused", "dense");
    for p in Preset::ALL {
        for (scale, label) in [(Scale::Desk, "desk"), (Scale::Full, "full")] {
            let cfg = p.config(scale).validate()?;
            println!(
                "{:<18} {:>6} {:>9} {:>9}  {}",
                p.keyword(),
                label,
                cfg.fused_len(),
                cfg.dense_len(),
                cfg.fingerprint()
            );
        }
    }

    let path = std::env::temp_dir().join("cotok_example_config.txt");
    let cfg = cotok::preset("desk_default")?;
    cfg.save(&path)?;
    let back = ModelConfig::load(&path)?;
    assert_eq!(back, cfg);
    println!("\nround-tripped {} ({} lines)", path.display(), cfg.to_text().lines().count());

    std::fs::write(&path, "preset=toy\ntokens_per_feature=0\n").expect("write");
    match ModelConfig::load(&path)?.validate() {
        Ok(_) => println!("unexpectedly valid"),
        Err(e) => println!("rejected: {e}"),
    }
    Ok(())
}
